"""Amortized training of the switching policy, decision rules and
evaluation metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .gnn import Adam, H2mgNodeModel, ModelConfig, load_checkpoint, make_batch, save_checkpoint
from .h2mg import Grid
from .normalize import EcdfNormalizer
from .powerlp import BASE_MVA, exchange_capacity
from .surrogate import (
    MemoryTable, SamplingPolicy, SubstationPatterns, entropy, grad_fmc, grad_mc, grad_mt,
    infeasible_score, most_probable_decision, sample_decisions,
)

log = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
ESTIMATORS = ("mc", "fmc", "mt")


class TrainingDiverged(RuntimeError):
    """A non-finite quantity appeared during training."""


@dataclass(frozen=True)
class TrainConfig:
    """Settings of one training run.

    ``val_period`` is in iterations; validation also runs after the last one.
    """

    estimator: str = "mt"
    beta: float = 1.0
    tau: float | None = None
    n_samples: int = 32
    batch_size: int = 8
    max_iter: int = 2000
    val_period: int = 100
    seed: int = 0
    profile: str = "tiny"
    sampling: SamplingPolicy = field(default_factory=lambda: SamplingPolicy("perturb", True))
    lr: float = 3e-4
    clip: float | None = 0.04
    n_knots: int = 100

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.estimator == "fmc" and (self.tau is None or not self.tau > 0):
            raise ValueError("the filtered estimator needs tau > 0")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.n_samples < 1 or self.batch_size < 1 or self.max_iter < 1 or self.val_period < 1:
            raise ValueError("n_samples, batch_size, max_iter and val_period must be >= 1")

    @classmethod
    def preset(cls, estimator: str, **overrides) -> "TrainConfig":
        """Published settings for each estimator, optionally overridden."""
        base = {
            "mt": dict(estimator="mt", beta=1.0, sampling=SamplingPolicy("perturb", True, p1=0.3, p2=0.4)),
            "fmc": dict(estimator="fmc", beta=0.1, tau=20.0, sampling=SamplingPolicy("independent", True)),
            "mc": dict(estimator="mc", beta=0.1, sampling=SamplingPolicy("independent", False)),
        }
        if estimator not in base:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        return cls(**{**base[estimator], "n_samples": 32, "batch_size": 8, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampling"] = asdict(self.sampling)
        return d


# -- scoring --------------------------------------------------------------------


class ScoreCache:
    """Memoized LP objectives per (context, decision), infeasibility penalized."""

    def __init__(self):
        self._f: dict[tuple, float] = {}
        self._closed: dict[str, float | None] = {}
        self.lp_solves = 0

    def closed(self, grid: Grid) -> float | None:
        cid = grid.context_id
        if cid not in self._closed:
            res = exchange_capacity(grid)
            self.lp_solves += 1
            self._closed[cid] = res.objective if res.feasible else None
        return self._closed[cid]

    def score(self, grid: Grid, y) -> float:
        y = np.asarray(y, dtype=np.int8)
        key = (grid.context_id, y.tobytes())
        f = self._f.get(key)
        if f is None:
            res = exchange_capacity(grid, y)
            self.lp_solves += 1
            f = res.objective if res.feasible else infeasible_score(grid, self.closed(grid))
            self._f[key] = f
        return f


def _check_ids(grids):
    ids = [g.context_id for g in grids]
    if len(set(ids)) != len(ids):
        raise ValueError("context ids must be unique within a dataset")


# -- training ----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: H2mgNodeModel
    normalizer: EcdfNormalizer
    best_iteration: int
    best_val_capacity: float
    history: list
    memory: MemoryTable | None
    validations: list


def mean_capacity(grids, decisions, infeasible_value: float = 0.0) -> float:
    """Mean capacity in MW, infeasible decisions counted as ``infeasible_value``."""
    caps = []
    for g, y in zip(grids, decisions):
        res = exchange_capacity(g, y)
        caps.append(res.capacity if res.feasible else infeasible_value)
    return float(np.mean(caps)) if caps else math.nan


def predict_scores(model: H2mgNodeModel, normalizer: EcdfNormalizer, grids, chunk: int = 64) -> list:
    out = []
    grids = list(grids)
    for i in range(0, len(grids), chunk):
        part = grids[i:i + chunk]
        batch = make_batch(normalizer.transform(part))
        z = model.forward(batch)
        out.extend(z[s].copy() for s in batch.switch_slices)
    return out


def train(config: TrainConfig, train_set, val_set, *, out_dir=None, memory: MemoryTable | None = None,
          log_records: list | None = None) -> TrainResult:
    """Run the amortized training loop and keep the best validated model.

    Each iteration draws a minibatch of contexts, predicts their switch
    logits, forms one gradient estimate per context with the configured
    estimator and applies the averaged back-propagated gradient with Adam.
    """
    train_set, val_set = list(train_set), list(val_set)
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    _check_ids(train_set)
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    normalizer = EcdfNormalizer(cfg.n_knots).fit(train_set)
    normed = normalizer.transform(train_set)
    model = H2mgNodeModel(ModelConfig.from_profile(cfg.profile), seed=cfg.seed)
    opt = Adam(lr=cfg.lr, clip=cfg.clip)
    cache = ScoreCache()
    patterns = [SubstationPatterns(g) for g in train_set] if cfg.sampling.reject_noop else [None] * len(train_set)

    if cfg.estimator == "mt":
        memory = memory if memory is not None else MemoryTable()
        for g in train_set:
            if g.context_id not in memory:
                memory.update(g.context_id, [(g.all_closed(), cache.score(g, g.all_closed()))])

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
        log_fh = open(out / "train_log.ndjson", "w")
    else:
        log_fh = None

    history, validations = [], []
    best = (-math.inf, 0, None)
    t0 = time.monotonic()
    try:
        for it in range(1, cfg.max_iter + 1):
            idx = rng.choice(len(train_set), size=min(cfg.batch_size, len(train_set)), replace=False)
            batch = make_batch([normed[i] for i in idx])
            z, tape = model.forward(batch, record=True)
            dz = np.zeros_like(z)
            best_f, ent = [], []
            for j, i in enumerate(idx):
                g = train_set[i]
                zj = z[batch.switch_slices[j]]
                Y = sample_decisions(zj, g, cfg.n_samples, cfg.sampling, rng, patterns[i])
                f = np.array([cache.score(g, y) for y in Y])
                if cfg.estimator == "mt":
                    memory.update(g.context_id, zip(Y, f))
                    y_mem, _ = memory.get(g.context_id)
                    gj = grad_mt(zj, y_mem, cfg.beta)
                elif cfg.estimator == "fmc":
                    gj = grad_fmc(zj, Y, f, cfg.beta, cfg.tau)
                else:
                    gj = grad_mc(zj, Y, f, cfg.beta)
                dz[batch.switch_slices[j]] = gj / len(idx)
                best_f.append(float(f.min()))
                ent.append(entropy(zj))
            rec = {"iteration": it, "mean_best_f": float(np.mean(best_f)), "entropy": float(np.mean(ent))}
            if not (np.all(np.isfinite(z)) and np.all(np.isfinite(dz)) and math.isfinite(rec["mean_best_f"])):
                raise TrainingDiverged(f"non-finite scores or gradient at iteration {it}")
            model_grads = model.backward(tape, dz)
            opt.step(model, model_grads)

            rec["val_capacity"] = None
            if it % cfg.val_period == 0 or it == cfg.max_iter:
                val_dec = [most_probable_decision(zz) for zz in predict_scores(model, normalizer, val_set)]
                cap = mean_capacity(val_set, val_dec)
                rec["val_capacity"] = cap
                validations.append((it, cap))
                if cap > best[0]:
                    best = (cap, it, {k: v.copy() for k, v in model.params.items()})
                    if out is not None:
                        save_checkpoint(out / "best.npz", _with_params(model, best[2]), normalizer,
                                        {"iteration": it, "val_capacity": cap, "train_config": cfg.to_dict()})
            rec["wall_time"] = time.monotonic() - t0
            history.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
            if log_records is not None:
                log_records.append(rec)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None and memory is not None:
        memory.save(out / "memory.json")
    final = _with_params(model, best[2])
    log.info("best validation capacity %.3f MW at iteration %d (%d LP solves)", best[0], best[1], cache.lp_solves)
    return TrainResult(final, normalizer, best[1], best[0], history, memory, validations)


def _with_params(model: H2mgNodeModel, params: dict) -> H2mgNodeModel:
    m = H2mgNodeModel.__new__(H2mgNodeModel)
    m.__dict__.update(model.__dict__)
    m.params = {k: v.copy() for k, v in params.items()}
    m.version = 0
    return m


# -- decisions ------------------------------------------------------------------------


def _resolve(checkpoint):
    if isinstance(checkpoint, (str, Path)):
        model, normalizer, _ = load_checkpoint(checkpoint)
        return model, normalizer
    if isinstance(checkpoint, TrainResult):
        return checkpoint.model, checkpoint.normalizer
    return checkpoint


def decide(checkpoint, grid: Grid) -> np.ndarray:
    """Most probable decision of a trained model on ``grid``."""
    model, normalizer = _resolve(checkpoint)
    return most_probable_decision(model.forward(normalizer.transform_grid(grid)))


def ensemble_choice(grid: Grid, y_fmc, y_mt) -> tuple[np.ndarray, str]:
    """Pick the filtered model's decision only when it is strictly better.

    An infeasible decision loses; if both are infeasible all-closed is used.
    """
    r_f = exchange_capacity(grid, y_fmc)
    r_m = exchange_capacity(grid, y_mt)
    if not r_f.feasible and not r_m.feasible:
        return grid.all_closed(), "closed"
    f_f = r_f.objective if r_f.feasible else math.inf
    f_m = r_m.objective if r_m.feasible else math.inf
    if f_f < f_m:
        return np.asarray(y_fmc, dtype=np.int8), "fmc"
    return np.asarray(y_mt, dtype=np.int8), "mt"


def ensemble_decide(ckpt_fmc, ckpt_mt, grid: Grid) -> np.ndarray:
    return ensemble_choice(grid, decide(ckpt_fmc, grid), decide(ckpt_mt, grid))[0]


class SwitchingPolicy(BaseEstimator):
    """Learned switching policy with the estimator interface.

    ``fit`` trains on a list of grids (validation grids via ``X_val``, or a
    held-out tail of ``X``); ``decision_function`` returns the switch logits
    and ``predict`` the most probable decisions.

    Parameters
    ----------
    estimator : {"mt", "fmc", "mc"}
        Gradient estimator.
    beta, tau, n_samples, batch_size, max_iter, val_period, seed, profile
        See :class:`TrainConfig`.  ``beta`` and ``tau`` default to the
        estimator's preset when None.
    sampling : SamplingPolicy or None
        Exploration policy; None selects the estimator's preset.
    val_fraction : float
        Share of ``X`` held out for validation when ``X_val`` is not given.
    """

    def __init__(self, estimator="mt", beta=None, tau=None, n_samples=32, batch_size=8, max_iter=2000,
                 val_period=100, seed=0, profile="tiny", sampling=None, lr=3e-4, clip=0.04, n_knots=100,
                 val_fraction=0.2):
        self.estimator = estimator
        self.beta = beta
        self.tau = tau
        self.n_samples = n_samples
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.val_period = val_period
        self.seed = seed
        self.profile = profile
        self.sampling = sampling
        self.lr = lr
        self.clip = clip
        self.n_knots = n_knots
        self.val_fraction = val_fraction

    def _config(self) -> TrainConfig:
        over = dict(n_samples=self.n_samples, batch_size=self.batch_size, max_iter=self.max_iter,
                    val_period=self.val_period, seed=self.seed, profile=self.profile, lr=self.lr,
                    clip=self.clip, n_knots=self.n_knots)
        for k in ("beta", "tau", "sampling"):
            if getattr(self, k) is not None:
                over[k] = getattr(self, k)
        return TrainConfig.preset(self.estimator, **over)

    def fit(self, X, y=None, X_val=None, out_dir=None):
        X = _grids(X)
        if X_val is None:
            n_val = max(1, int(round(self.val_fraction * len(X))))
            if n_val >= len(X):
                raise ValueError("need more grids than the validation share")
            X, X_val = X[:-n_val], X[-n_val:]
        res = train(self._config(), X, _grids(X_val), out_dir=out_dir)
        self.model_ = res.model
        self.normalizer_ = res.normalizer
        self.history_ = res.history
        self.memory_ = res.memory
        self.best_iteration_ = res.best_iteration
        self.best_val_capacity_ = res.best_val_capacity
        return self

    def decision_function(self, X) -> list:
        check_is_fitted(self, "model_")
        return predict_scores(self.model_, self.normalizer_, _grids(X))

    def predict(self, X) -> list:
        return [most_probable_decision(z) for z in self.decision_function(X)]

    def score(self, X, y=None) -> float:
        """Mean exchange capacity (MW) of the predicted decisions."""
        X = _grids(X)
        return mean_capacity(X, self.predict(X))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.normalizer_, {"params": _jsonable(self.get_params())})

    @classmethod
    def load(cls, path) -> "SwitchingPolicy":
        model, normalizer, extra = load_checkpoint(path)
        params = dict(extra.get("params", {}))
        if isinstance(params.get("sampling"), dict):
            params["sampling"] = SamplingPolicy(**params["sampling"])
        est = cls(**params)
        est.model_, est.normalizer_ = model, normalizer
        return est


def _grids(X) -> list:
    X = [X] if isinstance(X, Grid) else list(X)
    if not all(isinstance(g, Grid) for g in X):
        raise TypeError("expected Grid objects")
    return X


def _jsonable(d):
    return {k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v) for k, v in d.items()}


# -- evaluation -------------------------------------------------------------------------


@dataclass
class ContextRow:
    context_id: str
    capacity_pu: float
    closed_pu: float
    solver_pu: float
    improvement_pct: float
    normalized: float
    openings: int
    feasible: bool
    excluded: bool


@dataclass
class MetricsReport:
    rows: list
    usage_pct: np.ndarray

    @property
    def n_switches(self) -> int:
        return len(self.usage_pct)

    def summary(self) -> dict:
        def mean(vals):
            vals = [v for v in vals if not math.isnan(v)]
            return float(np.mean(vals)) if vals else math.nan

        feas = [r for r in self.rows if r.feasible]
        return {
            "contexts": len(self.rows),
            "mean_capacity_pu": mean([r.capacity_pu for r in feas]),
            "mean_normalized": mean([r.normalized for r in feas if not r.excluded]),
            "mean_improvement_pct": mean([r.improvement_pct for r in feas]),
            "mean_openings": mean([float(r.openings) for r in self.rows]),
            "mean_usage_pct": float(np.mean(self.usage_pct)) if self.n_switches else math.nan,
            "never_used": int(np.sum(self.usage_pct == 0)),
            "infeasible": sum(not r.feasible for r in self.rows),
            "excluded": sum(r.excluded for r in self.rows),
        }

    def write_csv(self, path, usage_path=None) -> None:
        """Per-context rows plus a ``summary`` row; usage per switch separately."""
        path = Path(path)
        fields = list(ContextRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema-version: {CSV_SCHEMA_VERSION}\n")
            w = csv.writer(fh)
            w.writerow(fields)
            for r in self.rows:
                w.writerow([_fmt(getattr(r, k)) for k in fields])
            s = self.summary()
            w.writerow(["summary", _fmt(s["mean_capacity_pu"]), "", "", _fmt(s["mean_improvement_pct"]),
                        _fmt(s["mean_normalized"]), _fmt(s["mean_openings"]), s["contexts"] - s["infeasible"],
                        s["excluded"]])
        usage_path = Path(usage_path) if usage_path else path.with_name(path.stem + "_usage.csv")
        with open(usage_path, "w", newline="") as fh:
            fh.write(f"# schema-version: {CSV_SCHEMA_VERSION}\n")
            w = csv.writer(fh)
            w.writerow(["switch", "usage_pct"])
            for i, u in enumerate(self.usage_pct):
                w.writerow([i, _fmt(u)])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def _capacity_or_nan(grid, y) -> float:
    res = exchange_capacity(grid, y)
    return res.capacity if res.feasible else math.nan


def evaluate(decisions: dict, grids, closed: dict | None = None, solver: dict | None = None) -> MetricsReport:
    """Score per-context decisions against all-closed and a solver reference.

    ``decisions``, ``closed`` and ``solver`` map context ids to decisions
    (closed/solver may also map to capacities in MW).  Contexts where the
    solver is not strictly better than all-closed are excluded from the
    normalized-score mean.  Infeasible decisions have NaN capacity and are
    left out of capacity means.
    """
    grids = list(grids)
    _check_ids(grids)
    ns = {g.n_switches for g in grids}
    if len(ns) > 1:
        raise ValueError("all grids must share one switch layout")
    n_sw = ns.pop() if ns else 0

    def ref(table, g):
        if table is None:
            return None
        if g.context_id not in table:
            raise KeyError(f"missing reference for context {g.context_id!r}")
        v = table[g.context_id]
        if v is None:
            return math.nan
        if np.ndim(v) == 0:
            return float(v)
        return _capacity_or_nan(g, v)

    rows = []
    opened = np.zeros(n_sw)
    for g in grids:
        if g.context_id not in decisions:
            raise KeyError(f"missing decision for context {g.context_id!r}")
        y = np.asarray(decisions[g.context_id], dtype=np.int8)
        cap = _capacity_or_nan(g, y)
        c_closed = ref(closed, g)
        if c_closed is None:
            c_closed = _capacity_or_nan(g, g.all_closed())
        c_solver = ref(solver, g)
        excluded = c_solver is not None and not (c_solver > c_closed)
        if c_solver is None or excluded:
            norm = math.nan
        else:
            norm = (cap - c_closed) / (c_solver - c_closed)
        imp = 100.0 * (cap - c_closed) / c_closed if c_closed > 0 else math.nan
        opened += y == 0
        rows.append(ContextRow(g.context_id, cap / BASE_MVA, c_closed / BASE_MVA,
                               math.nan if c_solver is None else c_solver / BASE_MVA,
                               imp, norm, int(np.sum(y == 0)), not math.isnan(cap), bool(excluded)))
    usage = 100.0 * opened / len(grids) if grids else opened
    return MetricsReport(rows, usage)


def histograms(report: MetricsReport, bins: int = 20) -> dict:
    """Bin edges and counts for the six result panels."""
    r = report.rows
    series = {
        "capacity_pu": [x.capacity_pu for x in r],
        "delta_closed_pu": [x.capacity_pu - x.closed_pu for x in r],
        "delta_solver_pu": [x.solver_pu - x.capacity_pu for x in r],
        "normalized": [x.normalized for x in r if not x.excluded],
        "openings": [float(x.openings) for x in r],
        "usage_pct": list(report.usage_pct),
    }
    out = {}
    for name, vals in series.items():
        v = np.asarray([x for x in vals if not math.isnan(x)], dtype=np.float64)
        if name == "openings" and v.size:
            edges = np.arange(-0.5, v.max() + 1.0)
        else:
            lo, hi = (float(v.min()), float(v.max())) if v.size else (0.0, 1.0)
            edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
        counts, edges = np.histogram(v, bins=edges)
        out[name] = (edges, counts)
    return out


def write_histograms(hists: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema-version: {CSV_SCHEMA_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(["panel", "bin_left", "bin_right", "count"])
        for name, (edges, counts) in hists.items():
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([name, repr(float(lo)), repr(float(hi)), int(c)])
