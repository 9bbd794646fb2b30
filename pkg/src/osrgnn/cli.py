"""Command-line entry point: ``osrgnn <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (a flat JSON object whose keys
are the long option names with dashes or underscores); command-line options
override file values and unknown keys are rejected.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datagen, exact, gnn, lp, powerlp, surrogate, train
from .h2mg import load_grid
from .powerlp import BASE_MVA, dump_lp, exchange_capacity

log = logging.getLogger("osrgnn")

EXIT_OK, EXIT_CONFIG, EXIT_EMPTY, EXIT_NUMERICAL = 0, 2, 3, 4
METHODS = ("all-closed", "bnb", "exhaustive", "gnn", "ensemble")


class ConfigError(Exception):
    pass


class EmptyResult(Exception):
    pass


# -- argument parsing ------------------------------------------------------------


def _solver_opts(p):
    p.add_argument("--max-openings", type=int, default=6)
    p.add_argument("--gap", type=float, default=0.01)
    p.add_argument("--time-limit", type=float, default=600.0, help="seconds; negative disables the limit")


def _model_opts(p):
    p.add_argument("--checkpoint", help="trained model for --method gnn")
    p.add_argument("--checkpoint-fmc", help="filtered-estimator model for --method ensemble")
    p.add_argument("--checkpoint-mt", help="memory-table model for --method ensemble")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="osrgnn", description="Learned substation switching for exchange capacity.")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file of option values")
        p.add_argument("--threads", type=int, default=1, help="worker cap (work runs in-process)")
        return p

    p = cmd("gen-data", "sample contexts into a dataset directory")
    p.add_argument("--n", type=int, help="number of contexts; omit to write every split of --profile")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=False)
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--base", default="twelve_substations", help="packaged template name or template path")
    p.add_argument("--split", default=None, help="split name used to derive the random stream")

    p = cmd("train", "train a switching policy")
    p.add_argument("--estimator", choices=train.ESTIMATORS, default="mt")
    p.add_argument("--train", dest="train_set", help="training dataset directory")
    p.add_argument("--val", dest="val_set", help="validation dataset directory")
    p.add_argument("--out", help="run directory (checkpoint, log, memory table)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", choices=sorted(gnn.PROFILES), default="tiny")
    p.add_argument("--max-iter", type=int, default=2000)
    p.add_argument("--val-period", type=int, default=100)
    p.add_argument("--beta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--n-samples", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)

    p = cmd("solve", "pick a decision for context files")
    p.add_argument("contexts", nargs="*", help="context .grid.json files")
    p.add_argument("--method", choices=METHODS, default="bnb")
    _solver_opts(p)
    _model_opts(p)
    p.add_argument("--dump-lp", help="write the LP of the chosen decision here (single context)")
    p.add_argument("--out", help="write decisions as JSON lines here")

    p = cmd("eval", "compute evaluation metrics on a dataset")
    p.add_argument("--method", choices=METHODS, default="all-closed")
    p.add_argument("--dataset")
    p.add_argument("--solver", choices=("bnb", "exhaustive", "none"), default="bnb",
                   help="reference used for normalized scores")
    _solver_opts(p)
    _model_opts(p)
    p.add_argument("--out", help="directory for metrics.csv and metrics_usage.csv")

    p = cmd("report", "summary table and histogram bins for several methods")
    p.add_argument("--dataset")
    p.add_argument("--methods", default="all-closed,bnb", help="comma-separated methods")
    p.add_argument("--solver", choices=("bnb", "exhaustive"), default="bnb")
    _solver_opts(p)
    _model_opts(p)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", help="output directory")

    cmd("selftest", "run the built-in oracle checks")
    return ap


def _resolve(ap: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse ``argv`` and merge ``--config`` values under the explicit options."""
    args = ap.parse_args(argv)
    if not args.config:
        return args
    sub = ap._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    try:
        values = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(values, dict):
        raise ConfigError("config file must hold a JSON object")
    explicit = vars(sub.parse_args([a for a in argv[argv.index(args.command) + 1:]]))
    defaults = {k: a.default for k, a in dests.items()}
    aliases = {"train": "train_set", "val": "val_set"}
    for key, val in values.items():
        dest = aliases.get(key.replace("-", "_"), key.replace("-", "_"))
        if dest not in dests:
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        if explicit.get(dest) == defaults.get(dest):
            setattr(args, dest, val)
    return args


# -- helpers ------------------------------------------------------------------------


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            raise ConfigError(f"--{n.replace('_set', '').replace('_', '-')} is required")


def _load_contexts(paths) -> list:
    grids = []
    for p in paths:
        grids.extend(datagen.load_dataset(p))
    if not grids:
        raise EmptyResult("no contexts to process")
    return grids


def _time_limit(args):
    return None if args.time_limit is None or args.time_limit < 0 else args.time_limit


def _decider(args):
    """Return a function grid -> decision for ``args.method``."""
    m = args.method
    if m == "all-closed":
        return lambda g: g.all_closed()
    if m == "bnb":
        cfg = exact.SolverConfig(args.max_openings, args.gap, _time_limit(args))
        return lambda g: exact.branch_and_bound(g, cfg).decision
    if m == "exhaustive":
        return lambda g: exact.exhaustive_best(g, args.max_openings).decision
    if m == "gnn":
        _need(args, "checkpoint")
        ck = _load_ckpt(args.checkpoint)
        return lambda g: train.decide(ck, g)
    _need(args, "checkpoint_fmc", "checkpoint_mt")
    f, t = _load_ckpt(args.checkpoint_fmc), _load_ckpt(args.checkpoint_mt)
    return lambda g: train.ensemble_decide(f, t, g)


def _load_ckpt(path):
    model, normalizer, _ = gnn.load_checkpoint(path)
    if normalizer is None:
        raise ConfigError(f"checkpoint {path} has no normalizer")
    return model, normalizer


def _reference(args, grids, solver):
    if solver == "none":
        return None
    ns = argparse.Namespace(**{**vars(args), "method": solver})
    d = _decider(ns)
    return {g.context_id: d(g) for g in grids}


# -- subcommands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    _need(args, "out")
    base = datagen.build_base_case(args.base)
    noise = datagen.NoiseConfig()
    splits = datagen.DESK_SPLITS if args.profile == "desk" else datagen.PAPER_SPLITS
    if args.n is not None:
        if args.n < 0:
            raise ConfigError("--n must be >= 0")
        stream = list(splits).index(args.split) if args.split in splits else 0
        m = datagen.generate_dataset(base, noise, args.n, args.seed, args.out, stream=stream,
                                     prefix=f"{args.split}_" if args.split else "ctx")
        print(f"wrote {m['n']} contexts to {args.out}")
        return EXIT_OK
    for stream, (name, n) in enumerate(splits.items()):
        datagen.generate_dataset(base, noise, n, args.seed, Path(args.out) / name, stream=stream, prefix=f"{name}_")
        print(f"wrote {n} contexts to {Path(args.out) / name}")
    return EXIT_OK


def cmd_train(args) -> int:
    _need(args, "train_set", "val_set", "out")
    over = dict(seed=args.seed, profile=args.profile, max_iter=args.max_iter, val_period=args.val_period,
                n_samples=args.n_samples, batch_size=args.batch_size, lr=args.lr)
    if args.beta is not None:
        over["beta"] = args.beta
    if args.tau is not None:
        over["tau"] = args.tau
    cfg = train.TrainConfig.preset(args.estimator, **over)
    tr, va = _load_contexts([args.train_set]), _load_contexts([args.val_set])
    res = train.train(cfg, tr, va, out_dir=args.out)
    print(f"best validation capacity {res.best_val_capacity / BASE_MVA:.4f} p.u. "
          f"at iteration {res.best_iteration}; checkpoint {Path(args.out) / 'best.npz'}")
    return EXIT_OK


def cmd_solve(args) -> int:
    grids = _load_contexts(args.contexts)
    decide = _decider(args)
    out = open(args.out, "w") if args.out else None
    status = EXIT_OK
    try:
        for g in grids:
            try:
                y = decide(g)
            except exact.NoFeasibleDecision as exc:
                print(json.dumps({"context_id": g.context_id, "status": "infeasible", "detail": str(exc)}))
                status = EXIT_EMPTY
                continue
            res = exchange_capacity(g, y)
            rec = {
                "context_id": g.context_id,
                "decision": [int(v) for v in y],
                "openings": int(np.sum(y == 0)),
                "status": res.status.value,
                "capacity_mw": res.capacity,
                "capacity_pu": res.capacity_pu,
            }
            if not res.feasible:
                status = EXIT_EMPTY
            print(json.dumps(rec))
            if out:
                out.write(json.dumps(rec) + "\n")
            if args.dump_lp:
                Path(args.dump_lp).write_text(dump_lp(g, y))
    finally:
        if out:
            out.close()
    return status


def _metrics(args, grids, method, solver_ref):
    if solver_ref is not None and method == args.solver:
        decisions = solver_ref
    else:
        d = _decider(argparse.Namespace(**{**vars(args), "method": method}))
        decisions = {g.context_id: d(g) for g in grids}
    return train.evaluate(decisions, grids, solver=solver_ref)


def cmd_eval(args) -> int:
    _need(args, "dataset")
    grids = _load_contexts([args.dataset])
    ref = _reference(args, grids, args.solver)
    rep = _metrics(args, grids, args.method, ref)
    s = rep.summary()
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        rep.write_csv(Path(args.out) / "metrics.csv", Path(args.out) / "metrics_usage.csv")
    print(json.dumps({"method": args.method, **s}))
    return EXIT_OK if s["contexts"] > s["infeasible"] else EXIT_EMPTY


def cmd_report(args) -> int:
    _need(args, "dataset", "out")
    grids = _load_contexts([args.dataset])
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ref = _reference(args, grids, args.solver)
    rows = []
    for m in methods:
        rep = _metrics(args, grids, m, ref)
        rep.write_csv(out / f"{m}_metrics.csv", out / f"{m}_usage.csv")
        train.write_histograms(train.histograms(rep, args.bins), out / f"{m}_histograms.csv")
        rows.append({"method": m, **rep.summary()})
    with open(out / "summary.csv", "w", newline="") as fh:
        fh.write(f"# schema-version: {train.CSV_SCHEMA_VERSION}\n")
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(json.dumps(r))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    failures = run_all(print)
    return EXIT_OK if not failures else EXIT_NUMERICAL


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "solve": cmd_solve,
    "eval": cmd_eval, "report": cmd_report, "selftest": cmd_selftest,
}


def run(argv=None) -> int:
    """Run one subcommand and return its exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = _resolve(ap, argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    except ConfigError as exc:
        print(f"osrgnn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("resolved config: %s", json.dumps({k: v for k, v in vars(args).items()}, default=str, sort_keys=True))
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"osrgnn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EmptyResult, exact.NoFeasibleDecision) as exc:
        print(f"osrgnn: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (lp.SimplexIterationLimit, train.TrainingDiverged, gnn.StaleTape, surrogate.RejectionFailure) as exc:
        print(f"osrgnn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, KeyError, ValueError, powerlp.DegenerateContext) as exc:
        print(f"osrgnn: input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # last resort: one line, no traceback
        print(f"osrgnn: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
