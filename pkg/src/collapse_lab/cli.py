"""``collapse-lab`` command line.

Exit codes: 0 success, 1 a check or run failed, 2 bad configuration or input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data, harness, nn, oracles
from .errors import CollapseLabError, ConfigError
from .harness import Cell


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _common(p, out_default):
    p.add_argument("--config", help="JSON experiment spec; flags override it")
    p.add_argument("--seed", type=int, help=f"base seed (fallback: ${harness.SEED_ENV}, then config)")
    p.add_argument("--out", default=out_default, help="output directory")


def _training(p):
    p.add_argument("--wd", type=_float_list, help="weight decay value(s), comma separated")
    p.add_argument("--bn", dest="bn", action="store_true", default=None, help="use batch norm")
    p.add_argument("--no-bn", dest="bn", action="store_false", help="no batch norm")
    p.add_argument("--epochs", type=int)
    p.add_argument("--metric-every", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--n-seeds", type=int, help="number of consecutive seeds from the base seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")


def build_parser():
    ap = argparse.ArgumentParser(prog="collapse-lab", description="Neural-collapse experiments on synthetic data.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the synthetic dataset")
    _common(p, "out/data")
    p.add_argument("--csv", action="store_true", help="also export a CSV copy")

    for name, helptext in (
        ("train", "train one model"),
        ("sweep", "grid over weight decay x BN x seeds"),
        ("track", "one run with NC recorded every few epochs"),
        ("freeze-gamma", "sweep over frozen BN scale constants"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p, f"out/{name}")
        _training(p)
        p.add_argument("--kappa", type=float)
        p.add_argument("--delta", type=float)

    p = sub.add_parser("bounds", help="evaluate the proximity bounds on recorded runs")
    p.add_argument("runs_csv")
    p.add_argument("--config", help="spec used to produce the runs (for C)")
    p.add_argument("--classes", type=int, help="number of classes (overrides config)")
    p.add_argument("--kappa", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--out", default="out/bounds")

    p = sub.add_parser("plot", help="SVG figures from RunRecord CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--kind", choices=harness.PLOT_KINDS, default="wd")
    p.add_argument("--out", default="out/plots")

    p = sub.add_parser("verify", help="run every lemma, metric and gradient check")
    p.add_argument("--seed", type=int)
    p.add_argument("--quick", action="store_true", help="a tenth of the trials")
    return ap


def resolve_spec(args) -> harness.ExperimentSpec:
    spec = harness.load_spec(getattr(args, "config", None))
    spec.seed = harness.resolve_seed(getattr(args, "seed", None), spec.seed)
    if getattr(args, "wd", None) is not None:
        spec.axes.lambdas = args.wd
        spec.axes.freeze_lambda = args.wd[0] if args.wd else spec.axes.freeze_lambda
    if getattr(args, "bn", None) is not None:
        spec.axes.bn = [args.bn]
    for flag, section, key in (
        ("epochs", spec.train, "epochs"),
        ("metric_every", spec.train, "metric_every"),
        ("dtype", spec.model, "dtype"),
        ("n_seeds", spec.axes, "n_seeds"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(section, key, value)
    for key in ("kappa", "delta"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(spec, key, value)
    return spec.validate()


def _prepare_out(spec, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_resolved_config(spec, out)
    return out


def cmd_generate(args):
    spec = resolve_spec(args)
    out = _prepare_out(spec, args.out)
    ds = harness.make_dataset(spec)
    data.save_dataset(ds, out / "dataset.clds")
    if args.csv:
        data.export_csv(ds, out / "dataset.csv")
    print(f"wrote {len(ds.y)} samples (C={ds.C}, d={ds.d}) to {out}")
    return 0


def _single_cell(spec):
    lam = spec.axes.lambdas[0]
    bn = spec.axes.bn[0]
    return Cell(float(lam), bool(bn), spec.seed)


def cmd_train(args):
    if args.bn is None:
        args.bn = True
    spec = resolve_spec(args)
    out = _prepare_out(spec, args.out)
    res = harness.run_cell(spec, _single_cell(spec), final_only=True)
    if res.failed:
        print(f"run {res.cell.run_id} failed: {res.error}", file=sys.stderr)
        return 1
    harness.write_runs_csv(res.rows, out / "runs.csv")
    nn.save_model(res.model, out / "model.json")
    row = res.rows[-1]
    print(f"{res.cell.run_id}: loss={row['loss']:.6g} acc={row['accuracy']:.4f} min_intra={row['min_intra']:.4f}")
    return 0


def _run_grid(spec, cells, args, out, csv_name, final_only):
    results = harness.run_cells(spec, cells, jobs=args.jobs, final_only=final_only)
    rows = [r for res in results for r in res.rows]
    harness.write_runs_csv(rows, out / csv_name)
    summary = harness.sweep_summary(spec, results)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for key, cell in summary["cells"].items():
        mi = cell["median_min_intra"]
        shown = "failed" if mi is None else f"{mi:.4f}"
        print(f"{key:32s} median min_intra={shown} ({cell['status']})")
    return 0


def cmd_sweep(args):
    spec = resolve_spec(args)
    out = _prepare_out(spec, args.out)
    return _run_grid(spec, harness.sweep_cells(spec), args, out, "runs.csv", final_only=False)


def cmd_freeze_gamma(args):
    spec = resolve_spec(args)
    out = _prepare_out(spec, args.out)
    return _run_grid(spec, harness.freeze_cells(spec), args, out, "freeze_gamma.csv", final_only=True)


def cmd_track(args):
    if args.bn is None:
        args.bn = True
    if args.metric_every is None:
        args.metric_every = 5
    spec = resolve_spec(args)
    out = _prepare_out(spec, args.out)
    res = harness.run_cell(spec, _single_cell(spec))
    if res.failed:
        print(f"run {res.cell.run_id} failed: {res.error}", file=sys.stderr)
        return 1
    harness.write_runs_csv(res.rows, out / "track.csv")
    print(f"{res.cell.run_id}: {len(res.rows)} recorded epochs")
    return 0


def cmd_bounds(args):
    spec = harness.load_spec(args.config)
    C = args.classes if args.classes is not None else spec.dataset.C
    kappa = args.kappa if args.kappa is not None else spec.kappa
    delta = args.delta if args.delta is not None else spec.delta
    rows = harness.read_runs_csv(args.runs_csv)
    report = harness.bounds_report(rows, C, kappa, delta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bounds.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(
        f"{len(report['runs'])} runs, {report['n_bn_runs']} with BN: "
        f"{report['n_vacuous_T23']} vacuous weight-decay intra bounds, "
        f"{report['n_consistency_violations']} consistency violations, "
        f"{report['n_loss_floor_violations']} loss-floor violations"
    )
    return 1 if report["n_consistency_violations"] or report["n_loss_floor_violations"] else 0


def cmd_plot(args):
    paths = harness.plot(args.csv, args.kind, args.out)
    for p in paths:
        print(p)
    return 0


def cmd_verify(args):
    seed = harness.resolve_seed(args.seed, 0)
    results = oracles.run_all(seed=seed, quick=args.quick)
    print(f"{'lemma':24s} {'trials':>8s} {'violations':>10s} {'worst margin':>14s}")
    for r in results:
        print(f"{r.lemma:24s} {r.trials:8d} {r.violations:10d} {r.worst_margin:14.3e}")
    failed = [r.lemma for r in results if not r.passed]
    print("FAIL: " + ", ".join(failed) if failed else "all checks passed")
    return 1 if failed else 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "track": cmd_track,
    "freeze-gamma": cmd_freeze_gamma,
    "bounds": cmd_bounds,
    "plot": cmd_plot,
    "verify": cmd_verify,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CollapseLabError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
