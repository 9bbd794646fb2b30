"""Hypergraph neural ODE over grid addresses, written directly in numpy.

Every object class (generator, load, switch, line) has an encoder; address
latents start at zero and follow ``dh/dt = F([h, tanh(sum of messages)])``
integrated by explicit Euler over [0, 1]; each switch is decoded into one
logit.  Reverse-mode gradients replay a tape recorded during the forward
pass through the unrolled Euler steps.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .h2mg import CLASSES, PORTS, Grid

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
LEAKY_SLOPE = 0.01
INPUT_DIMS = {"gen": 3, "load": 3, "switch": 1, "line": 4}
PROFILES = {
    "paper": {"hidden": (128, 128), "latent_dim": 64, "encoding_dim": 64},
    "tiny": {"hidden": (16, 16), "latent_dim": 8, "encoding_dim": 8},
}


class StaleTape(RuntimeError):
    """The parameters changed after the forward pass that recorded the tape."""


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (16, 16)
    latent_dim: int = 8
    encoding_dim: int = 8
    dt: float = 0.05
    n_steps: int = 20
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if min((self.latent_dim, self.encoding_dim) + self.hidden, default=1) < 1:
            raise ValueError("all layer sizes must be >= 1")
        if self.n_steps < 1 or not self.dt > 0:
            raise ValueError("need n_steps >= 1 and dt > 0")

    @classmethod
    def from_profile(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PROFILES:
            raise ValueError(f"unknown model profile {name!r}; choose from {sorted(PROFILES)}")
        return cls(**{**PROFILES[name], **overrides})


# -- inputs -----------------------------------------------------------------------


def class_features(grid: Grid) -> dict:
    """Per-class input matrices of a normalized grid.

    Switches carry no measurements and get a constant input.  Out-of-service
    lines keep their slot with zeroed features and a zero status channel.
    """
    g, ld, ln = grid.generators, grid.loads, grid.lines
    on = ln.in_service.astype(np.float64)
    return {
        "gen": np.column_stack([g.p, g.in_z1, g.in_z2]).astype(np.float64).reshape(-1, 3),
        "load": np.column_stack([ld.p, ld.in_z1, ld.in_z2]).astype(np.float64).reshape(-1, 3),
        "switch": np.ones((grid.n_switches, 1)),
        "line": np.column_stack([ln.f_bar * on, ln.x * on, ln.s * on, on]).reshape(-1, 4),
    }


@dataclass
class GraphBatch:
    """One or more grids merged into a single disjoint graph."""

    n_addresses: int
    features: dict
    ports: dict
    incidence: dict
    switch_slices: list

    @property
    def n_switches(self) -> int:
        return self.switch_slices[-1].stop if self.switch_slices else 0


def make_batch(grids) -> GraphBatch:
    """Stack normalized grids into a :class:`GraphBatch`."""
    grids = [grids] if isinstance(grids, Grid) else list(grids)
    feats = {c: [] for c in CLASSES}
    ports = {(c, o): [] for c in CLASSES for o in PORTS[c]}
    slices = []
    off_a = off_s = 0
    for g in grids:
        f = class_features(g)
        for c in CLASSES:
            feats[c].append(f[c])
        for key in ports:
            ports[key].append(g.ports[key] + off_a)
        slices.append(slice(off_s, off_s + g.n_switches))
        off_a += g.n_addresses
        off_s += g.n_switches
    feats = {c: np.concatenate(v) if v else np.zeros((0, INPUT_DIMS[c])) for c, v in feats.items()}
    ports = {k: np.concatenate(v).astype(np.int64) if v else np.zeros(0, np.int64) for k, v in ports.items()}
    inc = {}
    for k, idx in ports.items():
        m = len(idx)
        inc[k] = sp.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(off_a, m))
    return GraphBatch(off_a, feats, ports, inc, slices)


# -- multilayer perceptrons ---------------------------------------------------------


def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def _leaky_grad(x, slope):
    return np.where(x > 0, 1.0, slope)


class Mlp:
    """Dense layers with leaky-rectifier hidden activations."""

    def __init__(self, name: str, sizes, out_act: bool = False, slope: float = LEAKY_SLOPE):
        self.name = name
        self.sizes = tuple(sizes)
        self.out_act = out_act
        self.slope = slope

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def param_names(self):
        for i in range(self.n_layers):
            yield f"{self.name}.W{i}"
            yield f"{self.name}.b{i}"

    def init(self, params, rng):
        for i in range(self.n_layers):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{self.name}.W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params[f"{self.name}.b{i}"] = np.zeros(fan_out)

    def forward(self, params, x):
        cache = []
        for i in range(self.n_layers):
            pre = x @ params[f"{self.name}.W{i}"] + params[f"{self.name}.b{i}"]
            cache.append((x, pre))
            last = i == self.n_layers - 1
            x = _leaky(pre, self.slope) if (not last or self.out_act) else pre
        return x, cache

    def backward(self, params, cache, dy, grads):
        for i in reversed(range(self.n_layers)):
            x, pre = cache[i]
            last = i == self.n_layers - 1
            if not last or self.out_act:
                dy = dy * _leaky_grad(pre, self.slope)
            grads[f"{self.name}.W{i}"] += x.T @ dy
            grads[f"{self.name}.b{i}"] += dy.sum(axis=0)
            dy = dy @ params[f"{self.name}.W{i}"].T
        return dy


# -- model -----------------------------------------------------------------------


@dataclass
class Tape:
    version: int
    batch: GraphBatch
    enc: dict
    enc_cache: dict
    steps: list = field(default_factory=list)
    dec_cache: list | None = None
    h_final: np.ndarray | None = None


class H2mgNodeModel:
    """Encoders, shared dynamics, per-port messages and a switch decoder.

    Parameters
    ----------
    config : ModelConfig
        Layer sizes and integration settings.
    seed : int
        Seed of the parameter initialization.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        cfg = self.config
        d, k, H = cfg.latent_dim, cfg.encoding_dim, cfg.hidden
        s = cfg.slope
        self.encoders = {c: Mlp(f"enc.{c}", (INPUT_DIMS[c],) + H + (k,), slope=s) for c in CLASSES}
        self.dynamics = Mlp("dyn", (2 * d, d), out_act=True, slope=s)
        self.messages = {
            (c, o): Mlp(f"msg.{c}.{o}", (len(PORTS[c]) * d + k,) + H + (d,), slope=s)
            for c in CLASSES for o in PORTS[c]
        }
        self.decoder = Mlp("dec.switch", (k + 2 * d,) + H + (1,), slope=s)
        self.params: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        for m in self.modules():
            m.init(self.params, rng)
        self.version = 0

    def modules(self):
        yield from self.encoders.values()
        yield self.dynamics
        yield from self.messages.values()
        yield self.decoder

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def touch(self):
        """Mark the parameters as modified (invalidates existing tapes)."""
        self.version += 1

    # forward / backward ---------------------------------------------------------

    def forward(self, batch: GraphBatch | Grid, record: bool = False):
        """Switch logits for every switch of ``batch``.

        With ``record=True`` returns ``(z, tape)`` for :meth:`backward`.
        """
        if isinstance(batch, Grid):
            batch = make_batch([batch])
        P = self.params
        cfg = self.config
        for c in CLASSES:
            if batch.features[c].shape[1] != INPUT_DIMS[c]:
                raise ValueError(f"class {c!r}: expected {INPUT_DIMS[c]} features, got {batch.features[c].shape[1]}")
        enc, enc_cache = {}, {}
        for c in CLASSES:
            enc[c], enc_cache[c] = self.encoders[c].forward(P, batch.features[c])
        tape = Tape(self.version, batch, enc, enc_cache)
        h = np.zeros((batch.n_addresses, cfg.latent_dim))
        for _ in range(cfg.n_steps):
            agg = np.zeros_like(h)
            msg_cache = {}
            for c in CLASSES:
                if not len(enc[c]):
                    continue
                h_e = np.concatenate([h[batch.ports[c, o]] for o in PORTS[c]] + [enc[c]], axis=1)
                for o in PORTS[c]:
                    out, cache = self.messages[c, o].forward(P, h_e)
                    agg += batch.incidence[c, o] @ out
                    msg_cache[c, o] = cache
            u = np.tanh(agg)
            dh, dyn_cache = self.dynamics.forward(P, np.concatenate([h, u], axis=1))
            if record:
                tape.steps.append((msg_cache, u, dyn_cache))
            h = h + cfg.dt * dh
        sw = batch.ports["switch", "of"], batch.ports["switch", "ot"]
        z, dec_cache = self.decoder.forward(P, np.concatenate([enc["switch"], h[sw[0]], h[sw[1]]], axis=1))
        z = z[:, 0]
        if not record:
            return z
        tape.dec_cache = dec_cache
        tape.h_final = h
        return z, tape

    def backward(self, tape: Tape, dz) -> dict:
        """Gradient of ``dz . z`` with respect to every parameter."""
        if tape.version != self.version:
            raise StaleTape("parameters changed since the forward pass")
        if tape.dec_cache is None:
            raise StaleTape("tape was not recorded")
        P = self.params
        cfg = self.config
        batch = tape.batch
        d, k = cfg.latent_dim, cfg.encoding_dim
        dz = np.asarray(dz, dtype=np.float64).reshape(-1, 1)
        if len(dz) != batch.n_switches:
            raise ValueError("upstream gradient length does not match the switch count")
        grads = self.zero_grads()
        denc = {c: np.zeros_like(v) for c, v in tape.enc.items()}
        dh = np.zeros((batch.n_addresses, d))

        dx = self.decoder.backward(P, tape.dec_cache, dz, grads)
        denc["switch"] += dx[:, :k]
        dh += batch.incidence["switch", "of"] @ dx[:, k:k + d]
        dh += batch.incidence["switch", "ot"] @ dx[:, k + d:]

        for msg_cache, u, dyn_cache in reversed(tape.steps):
            # h_next = h + dt * F([h, u])
            dfin = self.dynamics.backward(P, dyn_cache, cfg.dt * dh, grads)
            dh_prev = dh + dfin[:, :d]
            dagg = dfin[:, d:] * (1.0 - u * u)
            for (c, o), cache in msg_cache.items():
                dout = batch.incidence[c, o].T @ dagg
                din = self.messages[c, o].backward(P, cache, dout, grads)
                for j, oo in enumerate(PORTS[c]):
                    dh_prev += batch.incidence[c, oo] @ din[:, j * d:(j + 1) * d]
                denc[c] += din[:, len(PORTS[c]) * d:]
            dh = dh_prev

        for c in CLASSES:
            if len(denc[c]):
                self.encoders[c].backward(P, tape.enc_cache[c], denc[c], grads)
        return grads

    def latents(self, batch) -> np.ndarray:
        """Address latents at the end of integration."""
        _, tape = self.forward(batch, record=True)
        return tape.h_final

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])


# -- optimizer ------------------------------------------------------------------------


class Adam:
    """Adam with element-wise gradient clipping before the moment updates.

    ``step`` skips the update and returns False when a gradient component is
    not finite.
    """

    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip: float | None = 0.04):
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, model: H2mgNodeModel, grads: dict) -> bool:
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            log.warning("non-finite gradient in %s; update skipped", ", ".join(sorted(bad)))
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            if self.clip is not None:
                g = np.clip(g, -self.clip, self.clip)
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            model.params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        model.touch()
        return True


# -- checkpoints ----------------------------------------------------------------------


def save_checkpoint(path, model: H2mgNodeModel, normalizer=None, extra: dict | None = None) -> None:
    """Write model settings, parameters and normalizer knots to one ``.npz``.

    Layout: ``meta`` holds a JSON string (format version, model config,
    channel names, free-form ``extra``); ``param/<name>`` holds each parameter
    array; ``knots/<channel>/x`` and ``knots/<channel>/y`` hold the knots.
    """
    meta = {
        "format_version": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "channels": sorted(normalizer.knots_) if normalizer is not None else [],
        "n_knots": getattr(normalizer, "n_knots", None),
        "extra": extra or {},
    }
    arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    for k, v in model.params.items():
        arrays[f"param/{k}"] = v
    if normalizer is not None:
        for ch, (xs, ys) in normalizer.knots_.items():
            arrays[f"knots/{ch}/x"] = xs
            arrays[f"knots/{ch}/y"] = ys
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(model, normalizer, extra)`` from :func:`save_checkpoint` output."""
    from .normalize import EcdfNormalizer

    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
        model = H2mgNodeModel(ModelConfig(**meta["config"]))
        stored = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        if set(stored) != set(model.params):
            raise ValueError("checkpoint parameters do not match the model layout")
        for k, v in stored.items():
            if v.shape != model.params[k].shape:
                raise ValueError(f"parameter {k} has shape {v.shape}, expected {model.params[k].shape}")
            model.params[k] = v.copy()
        normalizer = None
        if meta["channels"]:
            normalizer = EcdfNormalizer(n_knots=meta["n_knots"])
            normalizer.knots_ = {ch: (z[f"knots/{ch}/x"].copy(), z[f"knots/{ch}/y"].copy()) for ch in meta["channels"]}
    return model, normalizer, meta["extra"]
