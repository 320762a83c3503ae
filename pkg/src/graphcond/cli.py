"""Command-line entry point: ``graphcond <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Progress goes to stderr; results go to files and stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import coreset, graphcore, harness, matching, selfcheck

log = logging.getLogger("graphcond")


class UsageError(Exception):
    pass


# flag name -> CondenseConfig field, for flags that map one-to-one
_CONDENSE_FLAGS = {
    "mode": "mode", "ratio": "ratio", "k": "K", "kappa": "kappa", "explainer": "explainer",
    "seed": "seed", "selection_period": "selection_period", "backbone_loop": "backbone_loop",
    "max_epochs": "max_epochs", "patience": "patience", "eta_x": "eta_x", "eta_phi": "eta_phi",
    "lam": "lam", "r": "r", "delta": "delta", "theta_draws": "theta_draws",
    "theta_refresh": "theta_refresh", "min_rel_improvement": "min_rel_improvement",
}


def _load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}")
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def build_condense_config(args) -> tuple[matching.CondenseConfig, str | None, str | None]:
    """Merge ``--config`` with explicit flags; flags win."""
    data = _load_json(args.config) if args.config else {}
    data_dir = data.pop("data", None)
    out_dir = data.pop("out", None)
    for flag, fld in _CONDENSE_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            data[fld] = val
    if args.literal_mset:
        data["literal_mset"] = True
    try:
        cfg = matching.CondenseConfig.from_dict(data)
        cfg.validate()
    except TypeError as exc:
        raise UsageError(str(exc))
    return cfg, args.data or data_dir, args.out or out_dir


def _progress(row: dict) -> None:
    print(f"epoch {row['epoch']:4d}  loss {row['loss']:.6f}  active {row['active_frac']:.3f}",
          file=sys.stderr, flush=True)


def cmd_gen_data(args) -> int:
    params = graphcore.SbmParams(
        nodes_per_class=args.per_class, num_classes=args.classes, p_in=args.p_in, p_out=args.p_out,
        feature_dim=args.feature_dim, class_mean_separation=args.separation, feature_noise=args.noise,
    )
    params.validate()
    g = graphcore.generate_sbm(params, args.seed)
    graphcore.save_graph(g, args.out)
    print(f"wrote {g.num_nodes} nodes, {g.num_edges} edges to {args.out}")
    return 0


def cmd_condense(args) -> int:
    cfg, data_dir, out_dir = build_condense_config(args)
    if not data_dir or not out_dir:
        raise UsageError("condense needs --data and --out (flags or config keys)")
    g = graphcore.load_graph(data_dir)
    report = matching.condense(g, cfg, progress=None if args.quiet else _progress)
    out = Path(out_dir)
    graphcore.save_condensed(report.state, out, delta=cfg.delta)
    report.write_trace(out / "trace.csv")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    print(f"convergence_epoch {report.convergence_epoch}")
    print(f"final_loss {report.rows[-1]['loss']!r}" if report.rows else "final_loss nan")
    return 0


def cmd_evaluate(args) -> int:
    real = graphcore.load_graph(args.data)
    rep = harness.evaluate_condensed(args.condensed, real, args.arch, args.repeats,
                                     features_only=args.features_only, seed=args.seed)
    out = Path(args.report) if args.report else Path(args.condensed) / f"eval_{args.arch}_{rep.mode}.json"
    out.write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    print(f"{args.arch} {rep.mode}: {100 * rep.mean:.2f} ± {100 * rep.std:.2f}")
    return 0


def cmd_baseline(args) -> int:
    g = graphcore.load_graph(args.data)
    res = coreset.select(g, args.method, args.ratio, args.seed)
    graphcore.save_coreset_graph(res.to_graph(g), args.out)
    print(f"{args.method}: selected {len(res.indices)} nodes into {args.out}")
    return 0


def cmd_benchmark(args) -> int:
    grid = json.loads(Path(args.grid).read_text()) if Path(args.grid).exists() else None
    if grid is None:
        raise UsageError(f"grid file not found: {args.grid}")
    if isinstance(grid, list):
        grid = {"cells": grid}
    cells = grid.get("cells", [])
    data_dir = args.data or grid.get("data")
    dataset = grid.get("dataset") or (Path(data_dir).name if data_dir else "dataset")
    if cells and not data_dir:
        raise UsageError("benchmark needs a dataset: --data or a 'data' key in the grid")
    g = graphcore.load_graph(data_dir) if cells else None
    rows = harness.benchmark(g, cells, args.out, dataset=dataset, jobs=args.jobs)
    print(f"{len(rows)} rows written to {Path(args.out) / 'report.csv'}")
    return 0


def cmd_selfcheck(args) -> int:
    ok = True
    for name, (e1, e2, passed) in selfcheck.check_all(args.seed, args.tol).items():
        print(f"{name:24s} first {e1:.2e} second {e2:.2e} {'ok' if passed else 'FAIL'}")
        ok &= passed
    gap = selfcheck.reduction_chain_gap(args.epochs, args.seed)
    print(f"reduction chain max |diff| {gap:.2e} {'ok' if gap <= 1e-12 else 'FAIL'}")
    ok &= gap <= 1e-12
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphcond", description="Graph condensation by gradient matching.",
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    s = sub.add_parser("gen-data", help="write a stochastic-block-model dataset", formatter_class=fmt)
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--per-class", type=int, default=200)
    s.add_argument("--p-in", type=float, default=0.3)
    s.add_argument("--p-out", type=float, default=0.02)
    s.add_argument("--feature-dim", type=int, default=16)
    s.add_argument("--separation", type=float, default=1.0, help="class-mean separation")
    s.add_argument("--noise", type=float, default=1.0, help="feature noise std")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_data)

    d = matching.CondenseConfig()
    s = sub.add_parser("condense", help="condense a dataset", formatter_class=fmt,
                       description="Flags override values from --config; unset flags fall back to the "
                                   "config file, then to the defaults shown.")
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--out", help="output directory for the condensed graph")
    s.add_argument("--config", help="JSON config (CondenseConfig fields plus optional data/out)")
    s.add_argument("--mode", choices=matching.MODES, help=f"default {d.mode}")
    s.add_argument("--ratio", type=float, help=f"N'/N, default {d.ratio}")
    s.add_argument("--k", type=int, help=f"mgcond block count, default {d.K}")
    s.add_argument("--kappa", type=float, help=f"exgc fraction promoted per round, default {d.kappa}")
    s.add_argument("--selection-period", type=int, help=f"epochs between rounds, default {d.selection_period}")
    s.add_argument("--explainer", help=f"one of {', '.join(matching.EXPLAINERS)}; default {d.explainer}")
    s.add_argument("--backbone-loop", choices=matching.BACKBONE_LOOPS, help=f"default {d.backbone_loop}")
    s.add_argument("--max-epochs", type=int, help=f"default {d.max_epochs}")
    s.add_argument("--patience", type=int, help=f"default {d.patience}")
    s.add_argument("--min-rel-improvement", type=float, help=f"default {d.min_rel_improvement}")
    s.add_argument("--eta-x", type=float, help=f"default {d.eta_x}")
    s.add_argument("--eta-phi", type=float, help=f"default {d.eta_phi}")
    s.add_argument("--theta-draws", type=int, help=f"default {d.theta_draws}")
    s.add_argument("--theta-refresh", type=int, help=f"0 keeps one fixed pool; default {d.theta_refresh}")
    s.add_argument("--lam", type=float, help=f"explainer regularization, default {d.lam}")
    s.add_argument("--r", type=float, help=f"information-constraint rate, default {d.r}")
    s.add_argument("--delta", type=float, help=f"save threshold, default {d.delta}")
    s.add_argument("--seed", type=int, help=f"default {d.seed}")
    s.add_argument("--literal-mset", action="store_true", help="train the unselected pool M instead")
    s.add_argument("--quiet", action="store_true", help="no per-epoch progress")
    s.set_defaults(func=cmd_condense)

    s = sub.add_parser("evaluate", help="train on a condensed graph, test on the real one", formatter_class=fmt)
    s.add_argument("--condensed", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--arch", choices=harness.ARCHS, default="gcn")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--features-only", action="store_true", help="identity adjacency during training")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", help="EvalReport JSON path (default: inside the condensed dir)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("baseline", help="coreset baseline", formatter_class=fmt)
    s.add_argument("--data", required=True)
    s.add_argument("--method", choices=coreset.METHODS, required=True)
    s.add_argument("--ratio", type=float, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("benchmark", help="run a grid of methods", formatter_class=fmt)
    s.add_argument("--grid", required=True, help="JSON: {data, dataset, cells: [...]} or a list of cells")
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="dataset directory (overrides the grid's 'data')")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("selfcheck", help="finite-difference and reduction-chain checks", formatter_class=fmt)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--epochs", type=int, default=50)
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, matching.ConfigError, graphcore.GraphValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (graphcore.GraphFormatError, FileNotFoundError, FloatingPointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
