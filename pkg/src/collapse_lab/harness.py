"""Experiment plumbing behind the command line: specs, runs, CSV records, bounds and plots.

Every output is deterministic for a fixed resolved spec: floats are written
with 17 significant digits, JSON keys are sorted and sweep rows are merged in
grid order whatever order the cells finish in.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import bounds, data, nn
from .errors import CollapseLabError, ConfigError, DivergenceError, SchemaError

SCHEMA_VERSION = 1
SEED_ENV = "COLLAPSE_LAB_SEED"

RUN_COLUMNS = [
    "schema_version",
    "run_id",
    "seed",
    "lambda",
    "bn",
    "frozen_gamma",
    "depth",
    "epoch",
    "loss",
    "reg_loss",
    "accuracy",
    "min_intra",
    "max_inter",
    "avg_intra",
    "avg_inter",
    "avg_nc3",
    "alpha",
    "beta",
    "gamma_norm",
    "eps_t21",
    "eps_t23",
    "intra_lb_t23",
    "inter_ub_t23",
    "intra_classes",
]
_INT_COLUMNS = {"schema_version", "seed", "bn", "depth", "epoch"}
_STR_COLUMNS = {"run_id", "intra_classes"}


# --------------------------------------------------------------------------
# specs


@dataclass
class DatasetSpec:
    generator: str = "conic_hull"
    d: int = 16
    C: int = 4
    n_per_class: int = 2000
    gen_widths: list = field(default_factory=lambda: [16, 16, 4])


@dataclass
class ModelSpec:
    depth: int = 4  # number of linear layers
    hidden_width: int = 32
    dtype: str = "float64"
    var_eps: float = 1e-5


@dataclass
class TrainSpec:
    lr: float = 1e-3
    epochs: int = 300
    batch_size: int = 128
    wd_scope: str = "all_layers"
    lr_decay: float = 0.1
    metric_every: int = 5
    centering: bool = True


@dataclass
class SweepAxes:
    lambdas: list = field(default_factory=lambda: [1e-4, 1e-3, 5e-3, 1e-2])
    bn: list = field(default_factory=lambda: [True, False])
    n_seeds: int = 5
    frozen_gammas: list = field(default_factory=lambda: [0.02, 0.05, 0.1, 0.2, 0.5, 1.0])
    freeze_lambda: float = 5e-3


@dataclass
class ExperimentSpec:
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    axes: SweepAxes = field(default_factory=SweepAxes)
    kappa: float = 1.0
    delta: float = 0.1

    def validate(self):
        a = self.axes
        if not a.lambdas:
            raise ConfigError("lambda list is empty")
        if any(not lam > 0 for lam in a.lambdas):
            raise ConfigError(f"lambda values must be positive, got {a.lambdas}")
        if not a.bn:
            raise ConfigError("bn axis is empty")
        if a.n_seeds < 1:
            raise ConfigError("seeds list is empty")
        if not a.freeze_lambda > 0 or any(not g > 0 for g in a.frozen_gammas):
            raise ConfigError("frozen gamma constants and freeze_lambda must be positive")
        if self.dataset.C < 2:
            raise ConfigError(f"need C >= 2, got C={self.dataset.C}")
        if self.dataset.generator not in ("conic_hull", "mlp_labeled"):
            raise ConfigError(f"unknown generator {self.dataset.generator!r}")
        if self.model.depth < 2:
            raise ConfigError("depth must be >= 2 so that BN has a hidden layer to follow")
        if not 0 < self.delta < 1 or self.kappa <= 0:
            raise ConfigError("need 0 < delta < 1 and kappa > 0")
        return self

    @property
    def seeds(self):
        return [self.seed + k for k in range(self.axes.n_seeds)]

    def layer_widths(self):
        m = self.model
        return [self.dataset.d] + [m.hidden_width] * (m.depth - 1) + [self.dataset.C]

    def to_dict(self):
        return asdict(self)


_SECTIONS = {"dataset": DatasetSpec, "model": ModelSpec, "train": TrainSpec, "axes": SweepAxes}


def spec_from_dict(d: dict) -> ExperimentSpec:
    spec = ExperimentSpec()
    for key, value in d.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            section = getattr(spec, key)
            known = {f.name for f in fields(section)}
            for k, v in value.items():
                if k not in known:
                    raise ConfigError(f"unknown key {key}.{k}")
                setattr(section, k, v)
        elif key in ("seed", "kappa", "delta"):
            setattr(spec, key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return spec


def load_spec(path=None) -> ExperimentSpec:
    if path is None:
        return ExperimentSpec()
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return spec_from_dict(raw)


def resolve_seed(flag_seed, spec_seed):
    """--seed wins, then $COLLAPSE_LAB_SEED, then the config value."""
    if flag_seed is not None:
        return int(flag_seed)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return int(spec_seed)


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_resolved_config(spec: ExperimentSpec, out_dir):
    _dump_json(spec.to_dict(), Path(out_dir) / "config.json")


# --------------------------------------------------------------------------
# datasets and single runs


def make_dataset(spec: ExperimentSpec) -> data.Dataset:
    ds = spec.dataset
    if ds.generator == "conic_hull":
        return data.gen_conic_hull(ds.d, ds.C, ds.n_per_class, spec.seed)
    return data.gen_mlp_labeled(ds.d, ds.C, ds.n_per_class, spec.seed, gen_widths=tuple(ds.gen_widths))


@dataclass(frozen=True)
class Cell:
    lam: float
    bn: bool
    seed: int
    frozen_gamma: Optional[float] = None

    @property
    def run_id(self):
        rid = f"wd={self.lam:g}_bn={int(self.bn)}_seed={self.seed}"
        if self.frozen_gamma is not None:
            rid += f"_gamma={self.frozen_gamma:g}"
        return rid


@dataclass
class CellResult:
    cell: Cell
    rows: list
    failed: bool = False
    error: str = ""
    model: Optional[nn.MlpModel] = None


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def record_to_row(spec: ExperimentSpec, cell: Cell, rec: nn.EpochRecord) -> dict:
    rep = rec.report
    C = spec.dataset.C
    eps21 = rec.loss - bounds.min_loss_m(C, rec.alpha * rec.beta)
    eps23 = lb23 = ub23 = None
    if cell.bn and cell.lam < 1 / math.sqrt(C):
        eps23 = rec.reg_loss - bounds.min_reg_loss(C, cell.lam)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lb23, _, ub23 = bounds.bounds_t23(C, cell.lam, max(eps23, 0.0), spec.delta, spec.kappa, check=False)
    return {
        "schema_version": SCHEMA_VERSION,
        "run_id": cell.run_id,
        "seed": cell.seed,
        "lambda": cell.lam,
        "bn": cell.bn,
        "frozen_gamma": cell.frozen_gamma,
        "depth": spec.model.depth,
        "epoch": rec.epoch,
        "loss": rec.loss,
        "reg_loss": rec.reg_loss,
        "accuracy": rec.accuracy,
        "min_intra": rep.min_intra,
        "max_inter": rep.max_inter,
        "avg_intra": rep.avg_intra,
        "avg_inter": rep.avg_inter,
        "avg_nc3": rep.avg_nc3,
        "alpha": rec.alpha,
        "beta": rec.beta,
        "gamma_norm": rec.gamma_norm,
        "eps_t21": eps21,
        "eps_t23": eps23,
        "intra_lb_t23": lb23,
        "inter_ub_t23": ub23,
        "intra_classes": ";".join(_fmt(v) for v in rep.intra),
    }


def run_cell(spec: ExperimentSpec, cell: Cell, dataset: Optional[data.Dataset] = None, final_only=False) -> CellResult:
    """Train one grid cell; divergence is captured, not raised."""
    ds = make_dataset(spec) if dataset is None else dataset
    cfg = nn.MlpConfig(spec.layer_widths(), use_bn=cell.bn, dtype=spec.model.dtype, var_eps=spec.model.var_eps)
    t = spec.train
    tcfg = nn.TrainConfig(
        lr=t.lr,
        epochs=t.epochs,
        batch_size=t.batch_size,
        wd_lambda=cell.lam,
        wd_scope=t.wd_scope,
        lr_decay=t.lr_decay,
        seed=cell.seed,
        freeze_gamma_to=cell.frozen_gamma,
        metric_every=t.metric_every,
        centering=t.centering,
    )
    model = nn.MlpModel.init(cfg, cell.seed)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            history = nn.train(model, ds.X, ds.y, tcfg)
    except (DivergenceError, CollapseLabError) as exc:
        return CellResult(cell, [], failed=True, error=str(exc))
    records = [history.final] if final_only else history.records
    return CellResult(cell, [record_to_row(spec, cell, r) for r in records], model=model)


def _run_cell_job(args):
    spec_dict, cell, final_only = args
    res = run_cell(spec_from_dict(spec_dict), cell, final_only=final_only)
    res.model = None  # keep inter-process payloads small
    return res


def run_cells(spec: ExperimentSpec, cells, jobs=1, final_only=False):
    """Run cells (in parallel up to ``jobs``) and return results in grid order."""
    if jobs <= 1 or len(cells) <= 1:
        ds = make_dataset(spec)
        return [run_cell(spec, c, ds, final_only) for c in cells]
    payload = [(spec.to_dict(), c, final_only) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell_job, payload))


def sweep_cells(spec: ExperimentSpec):
    return [Cell(float(lam), bool(bn), s) for lam in spec.axes.lambdas for bn in spec.axes.bn for s in spec.seeds]


def freeze_cells(spec: ExperimentSpec):
    lam = float(spec.axes.freeze_lambda)
    return [Cell(lam, True, s, float(g)) for g in spec.axes.frozen_gammas for s in spec.seeds]


# --------------------------------------------------------------------------
# CSV


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_COLUMNS)
    for row in rows:
        w.writerow([row[c] if c in _STR_COLUMNS else _fmt(row[c]) for c in RUN_COLUMNS])
    return buf.getvalue()


def write_runs_csv(rows, path):
    Path(path).write_text(rows_to_csv(rows))


def _parse_cell(col, text):
    if col in _STR_COLUMNS:
        return text
    if text == "":
        return None
    if col in _INT_COLUMNS:
        return int(text)
    return float(text)


def read_runs_csv(path, required=RUN_COLUMNS) -> list:
    """Rows as dicts with typed values; raises SchemaError on a bad header."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from None
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header:
        raise SchemaError(f"{path}: empty CSV, header row is mandatory")
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    rows = []
    for lineno, values in enumerate(reader, start=2):
        if len(values) != len(header):
            raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(values)}")
        try:
            rows.append({c: _parse_cell(c, v) for c, v in zip(header, values)})
        except ValueError as exc:
            raise SchemaError(f"{path}:{lineno}: {exc}") from None
    if rows and "schema_version" in header and any(r["schema_version"] != SCHEMA_VERSION for r in rows):
        raise SchemaError(f"{path}: unsupported schema version")
    return rows


def final_rows(rows) -> list:
    """Last recorded epoch of each run, in first-appearance order."""
    last = {}
    for r in rows:
        if r["run_id"] not in last or r["epoch"] >= last[r["run_id"]]["epoch"]:
            last[r["run_id"]] = r
    return list(last.values())


# --------------------------------------------------------------------------
# summaries


def sweep_summary(spec: ExperimentSpec, results) -> dict:
    cells = {}
    for res in results:
        key = f"wd={res.cell.lam:g}_bn={int(res.cell.bn)}"
        if res.cell.frozen_gamma is not None:
            key += f"_gamma={res.cell.frozen_gamma:g}"
        entry = cells.setdefault(
            key,
            {"lambda": res.cell.lam, "bn": res.cell.bn, "frozen_gamma": res.cell.frozen_gamma, "seeds": [], "failed": [], "_final": []},
        )
        if res.failed:
            entry["failed"].append({"seed": res.cell.seed, "error": res.error})
        else:
            entry["seeds"].append(res.cell.seed)
            entry["_final"].append(res.rows[-1])
    for entry in cells.values():
        final = entry.pop("_final")
        for metric in ("min_intra", "max_inter", "avg_nc3", "loss", "reg_loss", "accuracy"):
            vals = [r[metric] for r in final]
            entry[f"median_{metric}"] = float(np.median(vals)) if vals else None
        entry["status"] = "failed" if not final else ("partial" if entry["failed"] else "ok")
    return {
        "schema_version": SCHEMA_VERSION,
        "n_runs": len(results),
        "n_failed": sum(r.failed for r in results),
        "cells": cells,
    }


# --------------------------------------------------------------------------
# bounds over recorded runs


def bounds_for_row(row, C, kappa, delta) -> dict:
    """Norm-based bound report for every run; weight-decay bounds and the (1 - delta) class check for BN runs."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        eps21, viol21 = bounds.epsilon_from_run(row["loss"], bounds.min_loss_m(C, row["alpha"] * row["beta"]))
        p = bounds.BoundParams(C=C, alpha=row["alpha"], beta=row["beta"], epsilon=eps21, delta=delta, kappa=kappa)
        out = {
            "run_id": row["run_id"],
            "loss_floor_violated": viol21,
            "T21": bounds.bound_report(p).to_dict(),
        }
        if not row["bn"]:
            return out
        lam = row["lambda"]
        eps23, viol23 = bounds.epsilon_from_run(row["reg_loss"], bounds.min_reg_loss(C, lam))
        p23 = bounds.BoundParams(C=C, epsilon=eps21, epsilon_reg=eps23, delta=delta, kappa=kappa, lam=lam)
        rep = bounds.bound_report(p23)
    intra = [float(v) for v in row["intra_classes"].split(";")]
    lb = rep.intra_lb_T23
    need = math.ceil((1 - delta) * C)
    satisfied = sum(v >= lb for v in intra)
    out["T23"] = rep.to_dict()
    out["reg_floor_violated"] = viol23
    out["consistency"] = {
        "intra_lb": lb,
        "vacuous": lb <= -1,
        "classes_required": need,
        "classes_satisfying": satisfied,
        "violated": lb > -1 and satisfied < need,
    }
    return out


def bounds_report(rows, C, kappa=1.0, delta=0.1) -> dict:
    """Bound evaluation for the final epoch of every run in a RunRecord table.

    Raises DomainError when a BN run has lambda >= 1/sqrt(C).
    """
    finals = final_rows(rows)
    if not finals:
        raise SchemaError("no runs found")
    runs = [bounds_for_row(r, C, kappa, delta) for r in finals]
    bn_runs = [r for r in runs if "T23" in r]
    return {
        "schema_version": SCHEMA_VERSION,
        "C": C,
        "kappa": kappa,
        "delta": delta,
        "runs": runs,
        "n_loss_floor_violations": sum(r["loss_floor_violated"] for r in runs),
        "n_consistency_violations": sum(r["consistency"]["violated"] for r in bn_runs),
        "n_vacuous_T23": sum(r["consistency"]["vacuous"] for r in bn_runs),
        "n_bn_runs": len(bn_runs),
    }


# --------------------------------------------------------------------------
# plots


PLOT_KINDS = ("wd", "epoch", "gamma")
_PLOT_COLUMNS = {
    "wd": ["run_id", "lambda", "bn", "depth", "epoch", "min_intra", "max_inter", "avg_nc3"],
    "epoch": ["run_id", "bn", "epoch", "reg_loss", "min_intra", "max_inter", "avg_nc3"],
    "gamma": ["run_id", "frozen_gamma", "gamma_norm", "epoch", "min_intra", "max_inter", "avg_nc3"],
}
_METRICS = ("min_intra", "max_inter", "avg_nc3")


def _band(groups):
    """x -> (median, min, max) over seeds, sorted by x."""
    xs = sorted(groups)
    vals = [np.asarray(groups[x], dtype=float) for x in xs]
    return (
        np.array(xs, dtype=float),
        np.array([np.median(v) for v in vals]),
        np.array([v.min() for v in vals]),
        np.array([v.max() for v in vals]),
    )


def _save_svg(fig, path, table_lines):
    import matplotlib.pyplot as plt

    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    svg = buf.getvalue()
    comment = "<!-- data\n" + "\n".join(line.replace("--", "- -") for line in table_lines) + "\n-->\n"
    head, sep, rest = svg.partition("?>\n")
    Path(path).write_text(head + sep + comment + rest if sep else comment + svg)


def _new_axes():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "collapse-lab"
    matplotlib.rcParams["svg.fonttype"] = "none"
    import matplotlib.pyplot as plt

    return plt.subplots(figsize=(5.5, 4.0))


def plot(csv_paths, kind, out_dir) -> list:
    """Write SVG figures for ``kind`` and return their paths in a fixed order."""
    if kind not in PLOT_KINDS:
        raise ConfigError(f"plot kind must be one of {PLOT_KINDS}")
    rows = []
    for p in csv_paths:
        rows.extend(read_runs_csv(p, required=_PLOT_COLUMNS[kind]))
    if not rows:
        raise SchemaError("no data rows to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return {"wd": _plot_wd, "epoch": _plot_epoch, "gamma": _plot_gamma}[kind](rows, out_dir)


def _plot_wd(rows, out_dir):
    finals = final_rows(rows)
    paths = []
    for depth in sorted({r["depth"] for r in finals}):
        for metric in _METRICS:
            fig, ax = _new_axes()
            table = [f"depth={depth} metric={metric}", "bn,lambda,median,min,max"]
            for bn in (1, 0):
                groups = {}
                for r in finals:
                    if r["depth"] == depth and r["bn"] == bn:
                        groups.setdefault(r["lambda"], []).append(r[metric])
                if not groups:
                    continue
                x, med, lo, hi = _band(groups)
                label = "BN" if bn else "no BN"
                ax.plot(x, med, marker="o", label=label)
                ax.fill_between(x, lo, hi, alpha=0.2)
                table += [f"{bn},{_fmt(a)},{_fmt(b)},{_fmt(c)},{_fmt(d)}" for a, b, c, d in zip(x, med, lo, hi)]
            ax.set_xscale("log")
            ax.set_xlabel("weight decay")
            ax.set_ylabel(metric)
            ax.set_title(f"{depth}-layer MLP")
            ax.legend()
            path = out_dir / f"wd_depth{depth}_{metric}.svg"
            _save_svg(fig, path, table)
            paths.append(path)
    return paths


def _plot_epoch(rows, out_dir):
    paths = []
    for metric in _METRICS:
        fig, ax = _new_axes()
        ax2 = ax.twinx()
        table = [f"metric={metric}", "bn,epoch,median,min,max,median_reg_loss"]
        for bn in (1, 0):
            groups, losses = {}, {}
            for r in rows:
                if r["bn"] == bn:
                    groups.setdefault(r["epoch"], []).append(r[metric])
                    losses.setdefault(r["epoch"], []).append(r["reg_loss"])
            if not groups:
                continue
            x, med, lo, hi = _band(groups)
            _, lmed, _, _ = _band(losses)
            label = "BN" if bn else "no BN"
            ax.plot(x, med, label=f"{metric} ({label})")
            ax.fill_between(x, lo, hi, alpha=0.2)
            ax2.plot(x, lmed, linestyle="--", label=f"loss ({label})")
            table += [f"{bn},{_fmt(a)},{_fmt(b)},{_fmt(c)},{_fmt(d)},{_fmt(e)}" for a, b, c, d, e in zip(x, med, lo, hi, lmed)]
        ax2.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel(metric)
        ax2.set_ylabel("training loss")
        h1, l1 = ax.get_legend_handles_labels()
        h2, l2 = ax2.get_legend_handles_labels()
        ax.legend(h1 + h2, l1 + l2, fontsize="small")
        path = out_dir / f"epoch_{metric}.svg"
        _save_svg(fig, path, table)
        paths.append(path)
    return paths


def _plot_gamma(rows, out_dir):
    finals = [r for r in final_rows(rows) if r["frozen_gamma"] is not None]
    if not finals:
        raise SchemaError("no frozen-gamma runs in input")
    paths = []
    for metric in _METRICS:
        fig, ax = _new_axes()
        groups = {}
        for r in finals:
            groups.setdefault(r["gamma_norm"], []).append(r[metric])
        x, med, lo, hi = _band(groups)
        ax.plot(x, med, marker="o")
        ax.fill_between(x, lo, hi, alpha=0.2)
        ax.set_xscale("log")
        ax.set_xlabel("|gamma|")
        ax.set_ylabel(metric)
        table = [f"metric={metric}", "gamma_norm,median,min,max"]
        table += [f"{_fmt(a)},{_fmt(b)},{_fmt(c)},{_fmt(d)}" for a, b, c, d in zip(x, med, lo, hi)]
        path = out_dir / f"gamma_{metric}.svg"
        _save_svg(fig, path, table)
        paths.append(path)
    return paths
