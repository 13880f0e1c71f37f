"""Command-line front end: train, compare, sweep, heatmap, presets.

Exit codes: 0 success, 1 configuration or I/O error, 2 divergence abort.
"""
from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import math
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from xnodewan.nets import MlpParams
from xnodewan.primal import DnnPrimal, ExactPrimal, XNodePrimal
from xnodewan.trainer import (
    MetricsRecord,
    TrainConfig,
    TrainingAborted,
    n_epsilon_t_epsilon,
    train,
)
from xnodewan.weakform import PRESETS, ConfigurationError, ManufactureError, preset
from xnodewan.xnode import XNodeParams

log = logging.getLogger("xnodewan")

METRICS_HEADER = ["epoch", "wall_time_s", "l_int", "l_bdry", "l_init", "total", "rel_err", "rel_err_se"]
COMPARE_HEADER = ["model", "final_rel_err", "final_rel_err_se", "time_per_epoch_s", "n_eps", "t_eps", "epochs"]
SUMMARY_RESULT_KEYS = ["status", "final_rel_err", "final_rel_err_se", "n_eps", "t_eps", "epochs",
                       "converged", "retries", "time_per_epoch_s", "seed"]


class ConfigError(ValueError):
    """Invalid run configuration, sweep spec or output location."""


# -- schema -------------------------------------------------------------------

_INT, _FLOAT, _OPT_FLOAT, _STR, _BOOL, _WIDTHS, _KINDS, _OVERRIDES = (
    "int", "float", "float|null", "str", "bool", "list[int]", "list[str]", "object")

# section -> key -> (type, default); defaults mirror the benchmark hyperparameters.
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "problem": {"name": (_STR, "example1"), "d": (_INT, 2)},
    "domain": {"N_r": (_INT, 400), "N_b": (_INT, 400), "n_T": (_INT, 20)},
    "model": {
        "primal_kind": (_STR, "xnode"),
        "h_dim": (_INT, 16),
        "vec_widths": (_WIDTHS, [32, 32, 32]),
        "init_widths": (_WIDTHS, [16]),
        "dnn_widths": (_WIDTHS, [40] * 6),
        "phi_widths": (_WIDTHS, [40] * 6),
        "activation": (_STR, "tanh"),
        "substeps": (_INT, 1),
    },
    "training": {
        "K_u": (_INT, 2),
        "K_phi": (_INT, 1),
        "alpha": (_OPT_FLOAT, None),
        "gamma": (_OPT_FLOAT, None),
        "tau_primal": (_OPT_FLOAT, None),
        "tau_eta": (_FLOAT, 0.04),
        "max_epochs": (_INT, 2000),
        "epsilon": (_FLOAT, 1e-3),
        "seed": (_INT, 0),
    },
    "eval": {
        "eval_every": (_INT, 10),
        "eval_points": (_INT, 2000),
        "final_eval_points": (_INT, 2000),
        "eval_trials": (_INT, 50),
    },
    "output": {
        "wall_time": (_BOOL, True),
        "plots": (_BOOL, True),
        "heatmap_resolution": (_INT, 50),
    },
    "compare": {
        "kinds": (_KINDS, ["xnode", "dnn"]),
        "overrides": (_OVERRIDES, {}),
    },
}

# config key -> TrainConfig field, where they differ
_FIELD_NAME = {("problem", "name"): "problem", ("output", "wall_time"): "record_wall_time"}
_NOT_TRAIN = {("output", "plots"), ("output", "heatmap_resolution"), ("compare", "kinds"),
              ("compare", "overrides")}


def _check_type(kind: str, value, where: str):
    ok = {
        _INT: lambda v: isinstance(v, int) and not isinstance(v, bool),
        _FLOAT: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        _OPT_FLOAT: lambda v: v is None or (isinstance(v, (int, float)) and not isinstance(v, bool)),
        _STR: lambda v: isinstance(v, str),
        _BOOL: lambda v: isinstance(v, bool),
        _WIDTHS: lambda v: isinstance(v, list) and all(isinstance(w, int) and w > 0 for w in v),
        _KINDS: lambda v: isinstance(v, list) and all(k in ("xnode", "dnn", "exact") for k in v) and v,
        _OVERRIDES: lambda v: isinstance(v, dict),
    }[kind](value)
    if not ok:
        raise ConfigError(f"{where}: expected {kind}, got {value!r}")


def qualified_keys() -> Dict[str, tuple]:
    """Every accepted parameter name (``section.key``) with its schema entry."""
    return {f"{s}.{k}": spec for s, keys in SCHEMA.items() for k, spec in keys.items()}


def resolve_key(name: str) -> str:
    """Accept ``section.key`` or a bare key that is unique across sections."""
    keys = qualified_keys()
    if name in keys:
        return name
    hits = [q for q in keys if q.split(".", 1)[1] == name]
    if len(hits) == 1:
        return hits[0]
    raise ConfigError(f"unknown parameter {name!r}")


def validate_config(doc) -> dict:
    """Check a RunConfig document and return it with defaults filled in."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    out = {}
    for section in doc:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section {section!r}")
    for section, keys in SCHEMA.items():
        given = doc.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key in given:
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}")
        out[section] = {}
        for key, (kind, default) in keys.items():
            value = given.get(key, copy.deepcopy(default))
            _check_type(kind, value, f"{section}.{key}")
            out[section][key] = value
    for kind, over in out["compare"]["overrides"].items():
        if kind not in ("xnode", "dnn", "exact") or not isinstance(over, dict):
            raise ConfigError(f"compare.overrides.{kind}: expected an object keyed by model kind")
        for name in over:
            resolve_key(name)
    return out


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(doc)


def set_param(config: dict, name: str, value) -> dict:
    q = resolve_key(name)
    section, key = q.split(".", 1)
    out = copy.deepcopy(config)
    out[section][key] = value
    return validate_config(out)


def to_train_config(config: dict) -> TrainConfig:
    kwargs = {}
    for section, keys in config.items():
        for key, value in keys.items():
            if (section, key) in _NOT_TRAIN:
                continue
            kwargs[_FIELD_NAME.get((section, key), key)] = value
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def validate_summary(doc) -> dict:
    """Schema check for summary.json; returns the document unchanged."""
    if not isinstance(doc, dict) or set(doc) != set(SUMMARY_RESULT_KEYS) | {"config"}:
        raise ConfigError("summary has unexpected keys")
    validate_config(doc["config"])
    if doc["status"] not in ("converged", "max_epochs", "diverged"):
        raise ConfigError(f"bad status {doc['status']!r}")
    for key in ("n_eps", "epochs", "retries", "seed"):
        if doc[key] is not None and not isinstance(doc[key], int):
            raise ConfigError(f"summary.{key} must be an integer")
    return doc


# -- formatting ---------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _json_float(value):
    return None if value is None or (isinstance(value, float) and not math.isfinite(value)) else value


def _prepare_dir(path: Path, force: bool) -> Path:
    if path.exists():
        if not force:
            raise ConfigError(f"output directory {path} already exists (use --force to overwrite)")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    try:
        path.mkdir(parents=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _configure_matplotlib():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "xnodewan"
    matplotlib.rcParams["svg.fonttype"] = "none"
    import matplotlib.pyplot as plt

    return plt


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


# -- primal (de)serialization ----------------------------------------------------

def primal_to_dict(primal) -> dict:
    if isinstance(primal, ExactPrimal):
        return {"kind": "exact", "scale": primal.scale, "shift": primal.shift}
    return primal.to_dict()


def primal_from_dict(doc: dict):
    kind = doc.get("kind")
    if kind == "xnode":
        return XNodePrimal(XNodeParams.from_dict(doc), substeps=doc.get("substeps", 1))
    if kind == "dnn":
        return DnnPrimal(MlpParams.from_dict(doc["net"]))
    if kind == "exact":
        return ExactPrimal(doc.get("scale", 1.0), doc.get("shift", 0.0))
    raise ConfigError(f"unknown primal kind {kind!r} in parameter file")


# -- runs ------------------------------------------------------------------------

@dataclass
class RunOutcome:
    summary: dict
    history: List[MetricsRecord] = field(default_factory=list)
    primal: object = None


def run_training(config: dict, out: Path, plots: Optional[bool] = None) -> RunOutcome:
    """Train one model and write metrics.csv, params.json, summary.json, config.json."""
    tc = to_train_config(config)
    try:
        problem, domain = preset(tc.problem, tc.d)
    except (ConfigurationError, ManufactureError) as exc:
        raise ConfigError(str(exc)) from exc
    _write_json(out / "config.json", config)
    history: List[MetricsRecord] = []
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)

        def sink(rec: MetricsRecord):
            history.append(rec)
            writer.writerow([_fmt(getattr(rec, k)) for k in METRICS_HEADER])
            fh.flush()

        status = "max_epochs"
        result = None
        try:
            result = train(tc, problem, domain, on_epoch=sink)
            status = "converged" if result.converged else "max_epochs"
        except TrainingAborted as exc:
            log.error("%s", exc)
            status = "diverged"
    if result is not None:
        last = history[-1]
        last_err, last_se = result.final_error
        n_eps, t_eps = n_epsilon_t_epsilon(history, tc.epsilon) if history else (None, None)
        doc = {
            "final_rel_err": _json_float(last_err),
            "final_rel_err_se": _json_float(last_se),
            "n_eps": n_eps,
            "t_eps": _json_float(t_eps),
            "epochs": last.epoch,
            "converged": result.converged,
            "retries": result.retries,
            "time_per_epoch_s": _json_float(last.wall_time_s / last.epoch),
        }
        _write_json(out / "params.json", {"primal": primal_to_dict(result.primal),
                                           "phi": result.phi.to_dict()})
    else:
        doc = {"final_rel_err": None, "final_rel_err_se": None, "n_eps": None, "t_eps": None,
               "epochs": len(history), "converged": False, "retries": None, "time_per_epoch_s": None}
    summary = validate_summary({"status": status, "seed": tc.seed, "config": config, **doc})
    _write_json(out / "summary.json", summary)
    if plots if plots is not None else config["output"]["plots"]:
        plot_error_curves({tc.primal_kind: history}, out / "error_curve.svg", tc.epsilon)
    return RunOutcome(summary, history, result.primal if result is not None else None)


def plot_error_curves(histories: Dict[str, List[MetricsRecord]], path: Path, epsilon: float) -> None:
    plt = _configure_matplotlib()
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for label, hist in histories.items():
        pts = [(r.epoch, r.rel_err) for r in hist if not math.isnan(r.rel_err)]
        if pts:
            ax.semilogy(*zip(*pts), label=label, marker=".", linewidth=1)
    ax.axhline(epsilon, color="grey", linestyle="--", linewidth=0.8, label="tolerance")
    ax.set_xlabel("epoch")
    ax.set_ylabel("relative L2 error")
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


# -- solution grids and heatmaps ----------------------------------------------------

@dataclass
class SolutionGrid:
    """Values on a 2-D slice: ``values[i, j]`` at ``(axis0[i], axis1[j])``."""

    axis_names: tuple
    axis0: np.ndarray
    axis1: np.ndarray
    fixed: dict
    values: np.ndarray

    def __post_init__(self):
        self.axis0 = np.asarray(self.axis0, dtype=np.float64)
        self.axis1 = np.asarray(self.axis1, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.axis0.size, self.axis1.size):
            raise ValueError(f"grid shape {self.values.shape} does not match axes "
                             f"({self.axis0.size}, {self.axis1.size})")

    @property
    def finite(self) -> np.ndarray:
        return self.values[np.isfinite(self.values)]


def _bounds(domain):
    om = domain.omega_max()
    if om["shape"] == "ball":
        c = np.asarray(om["center"], dtype=np.float64)
        return c - om["radius"], c + om["radius"]
    return np.asarray(om["lo"], dtype=np.float64), np.asarray(om["hi"], dtype=np.float64)


def slice_points(domain, t: float, resolution: int):
    """Points of the plotting slice. d >= 2: (x1, x2) at time t, remaining coordinates 0.
    d = 1: (t, x) over the whole time window."""
    if domain.d >= 2:
        lo, hi = _bounds(domain)
        a0 = np.linspace(lo[0], hi[0], resolution)
        a1 = np.linspace(lo[1], hi[1], resolution)
        g0, g1 = np.meshgrid(a0, a1, indexing="ij")
        x = np.zeros((g0.size, domain.d))
        x[:, 0], x[:, 1] = g0.ravel(), g1.ravel()
        tt = np.full(g0.size, float(t))
        fixed = {"t": float(t), **{f"x{i + 1}": 0.0 for i in range(2, domain.d)}}
        return ("x1", "x2"), a0, a1, fixed, tt, x
    lo, hi = _bounds(domain)
    a0 = np.linspace(0.0, domain.T, resolution)
    a1 = np.linspace(lo[0], hi[0], resolution)
    g0, g1 = np.meshgrid(a0, a1, indexing="ij")
    return ("t", "x1"), a0, a1, {}, g0.ravel(), g1.ravel()[:, None]


def solution_grids(primal, problem, domain, t: float, resolution: int) -> Dict[str, SolutionGrid]:
    """Predicted values and, when the exact solution is known, pointwise |error|.
    Cells outside the domain are NaN."""
    names, a0, a1, fixed, tt, x = slice_points(domain, t, resolution)
    inside = np.asarray(domain.contains(tt, x), dtype=bool)
    shape = (a0.size, a1.size)
    pred = np.full(tt.size, np.nan)
    if inside.any():
        with torch.no_grad():
            pred[inside] = primal.predict(tt[inside], x[inside], domain, problem).numpy()
    grids = {"solution": SolutionGrid(names, a0, a1, fixed, pred.reshape(shape))}
    if problem.exact_u is not None:
        exact = problem.exact_u(torch.as_tensor(tt), torch.as_tensor(x)).numpy()
        err = np.where(inside, np.abs(pred - exact), np.nan)
        grids["abs_error"] = SolutionGrid(names, a0, a1, fixed, err.reshape(shape))
    return grids


def write_grid_csv(grid: SolutionGrid, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"{grid.axis_names[0]}\\{grid.axis_names[1]}"] + [_fmt(float(v)) for v in grid.axis1])
        for a, row in zip(grid.axis0, grid.values):
            writer.writerow([_fmt(float(a))] + [_fmt(float(v)) for v in row])


def emit_heatmap(grid: SolutionGrid, path, title: str = "") -> Path:
    """SVG heatmap, one rectangle per cell, plus the raw grid as CSV next to it.

    Colors come from viridis resampled to 256 discrete levels, mapped linearly
    between the finite minimum and maximum (a constant grid uses one color).
    """
    path = Path(path)
    plt = _configure_matplotlib()
    from matplotlib.colors import Normalize

    finite = grid.finite
    vmin = float(finite.min()) if finite.size else 0.0
    vmax = float(finite.max()) if finite.size else 0.0
    cmap = plt.get_cmap("viridis", 256)
    norm = Normalize(vmin, vmax if vmax > vmin else vmin + 1.0)
    fig, ax = plt.subplots(figsize=(5.2, 4.2))

    def edges(a):
        if a.size == 1:
            return np.array([a[0] - 0.5, a[0] + 0.5])
        mid = 0.5 * (a[1:] + a[:-1])
        return np.concatenate([[a[0] - (mid[0] - a[0])], mid, [a[-1] + (a[-1] - mid[-1])]])

    mesh = ax.pcolormesh(edges(grid.axis0), edges(grid.axis1), np.ma.masked_invalid(grid.values).T,
                         cmap=cmap, norm=norm, shading="flat")
    fig.colorbar(mesh, ax=ax)
    ax.set_xlabel(grid.axis_names[0])
    ax.set_ylabel(grid.axis_names[1])
    fixed = ", ".join(f"{k}={v:g}" for k, v in grid.fixed.items())
    ax.set_title(f"{title}{' (' + fixed + ')' if fixed else ''}\nmin={vmin:.6g}  max={vmax:.6g}", fontsize=9)
    fig.tight_layout()
    try:
        _save_svg(fig, path)
        write_grid_csv(grid, path.with_suffix(".csv"))
    except OSError as exc:
        raise ConfigError(f"cannot write heatmap {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


# -- commands ------------------------------------------------------------------------

def _apply_seed(config: dict, seed: Optional[int]) -> dict:
    return set_param(config, "training.seed", seed) if seed is not None else config


def cmd_train(args) -> int:
    config = _apply_seed(load_config(args.config), args.seed)
    out = _prepare_dir(Path(args.out), args.force)
    outcome = run_training(config, out)
    if config["output"]["plots"] and outcome.primal is not None:
        _heatmaps_for(outcome.primal, config, out, None)
    s = outcome.summary
    print(f"{s['status']}: epochs={s['epochs']} rel_err={s['final_rel_err']} n_eps={s['n_eps']}")
    return 2 if s["status"] == "diverged" else 0


def _heatmaps_for(primal, config, out: Path, t: Optional[float]) -> None:
    tc = to_train_config(config)
    problem, domain = preset(tc.problem, tc.d, check=False)
    grids = solution_grids(primal, problem, domain, domain.T if t is None else t,
                           config["output"]["heatmap_resolution"])
    for name, grid in grids.items():
        emit_heatmap(grid, out / f"{name}.svg", title=name.replace("_", " "))


def cmd_compare(args) -> int:
    raw = json.loads(Path(args.config).read_text()) if Path(args.config).is_file() else None
    if raw is not None and "primal_kind" in raw.get("model", {}):
        raise ConfigError("compare runs every model kind; remove model.primal_kind from the config")
    config = _apply_seed(load_config(args.config), args.seed)
    out = _prepare_dir(Path(args.out), args.force)
    rows, histories, code = [], {}, 0
    for i, kind in enumerate(config["compare"]["kinds"]):
        cfg = set_param(config, "model.primal_kind", kind)
        for name, value in config["compare"]["overrides"].get(kind, {}).items():
            cfg = set_param(cfg, name, value)
        label = kind if config["compare"]["kinds"].count(kind) == 1 else f"{kind}_{i}"
        sub = out / label
        sub.mkdir()
        outcome = run_training(cfg, sub, plots=False)
        histories[label] = outcome.history
        s = outcome.summary
        if s["status"] == "diverged":
            code = 2
        rows.append([label, s["final_rel_err"], s["final_rel_err_se"], s["time_per_epoch_s"],
                     s["n_eps"], s["t_eps"], s["epochs"]])
    with open(out / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARE_HEADER)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
            print("  ".join(f"{k}={_fmt(v)}" for k, v in zip(COMPARE_HEADER, row)))
    if config["output"]["plots"]:
        plot_error_curves(histories, out / "error_curves.svg", config["training"]["epsilon"])
    return code


def load_sweep(path) -> Dict[str, list]:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read sweep spec {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"sweep spec {path} is not valid JSON: {exc}") from exc
    params = doc.get("parameters", doc) if isinstance(doc, dict) else None
    if not isinstance(params, dict) or not params:
        raise ConfigError("sweep spec must map parameter names to value lists")
    out = {}
    for name, values in params.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep values for {name!r} must be a non-empty list")
        out[resolve_key(name)] = values
    return out


def cmd_sweep(args) -> int:
    config = _apply_seed(load_config(args.config), args.seed)
    grid = load_sweep(args.sweep)
    names = list(grid)
    cells = list(itertools.product(*grid.values()))
    configs = []
    for values in cells:
        cfg = config
        for name, value in zip(names, values):
            cfg = set_param(cfg, name, value)
        configs.append(cfg)
    out = _prepare_dir(Path(args.out), args.force)
    header = names + ["status", "final_rel_err", "final_rel_err_se", "n_eps", "t_eps", "epochs"]
    results = []
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, (values, cfg) in enumerate(zip(cells, configs)):
            sub = out / f"run_{i:03d}"
            sub.mkdir()
            s = run_training(cfg, sub, plots=False).summary
            results.append(s)
            writer.writerow([_fmt(v) for v in values] + [_fmt(s[k]) for k in header[len(names):]])
            fh.flush()
            print(f"[{i + 1}/{len(cells)}] " + " ".join(f"{n}={_fmt(v)}" for n, v in zip(names, values))
                  + f" -> {s['status']} rel_err={_fmt(s['final_rel_err'])}")
    # matrix form over the first two parameters (remaining ones vary fastest and are averaged out)
    a0 = grid[names[0]]
    a1 = grid[names[1]] if len(names) > 1 else [None]
    inner = int(np.prod([len(grid[n]) for n in names[2:]])) if len(names) > 2 else 1
    errs = np.array([np.nan if s["final_rel_err"] is None else s["final_rel_err"] for s in results])
    mat = errs.reshape(len(a0), len(a1), inner).mean(axis=2)
    with open(out / "sweep_grid.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"{names[0]}\\{names[1] if len(names) > 1 else ''}"] + [_fmt(v) for v in a1])
        for v, row in zip(a0, mat):
            writer.writerow([_fmt(v)] + [_fmt(float(e)) for e in row])
    if config["output"]["plots"] and all(isinstance(v, (int, float)) for v in a0) and \
            all(isinstance(v, (int, float)) for v in a1 if v is not None):
        ax1 = np.arange(len(a1), dtype=float)
        g = SolutionGrid((names[0], names[1] if len(names) > 1 else ""), np.arange(len(a0), dtype=float),
                         ax1, {}, mat)
        emit_heatmap(g, out / "sweep_heatmap.svg", title="final relative error by cell index")
    return 2 if any(s["status"] == "diverged" for s in results) else 0


def cmd_heatmap(args) -> int:
    out = _prepare_dir(Path(args.out), args.force)
    if args.run:
        run = Path(args.run)
        config = load_config(run / "config.json")
        try:
            doc = json.loads((run / "params.json").read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read parameters in {run}: {exc.strerror or exc}") from exc
        primal = primal_from_dict(doc["primal"])
    elif args.config:
        config = load_config(args.config)
        primal = ExactPrimal()
    else:
        raise ConfigError("heatmap needs --run DIR or --config FILE (exact solution)")
    if args.resolution is not None:
        config = set_param(config, "output.heatmap_resolution", args.resolution)
    _heatmaps_for(primal, config, out, args.t)
    print(f"wrote heatmaps to {out}")
    return 0


def cmd_presets(args) -> int:
    for name, text in PRESETS.items():
        print(f"{name}: {text}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xnodewan-bench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="RunConfig JSON file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override training.seed")
        p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
        p.add_argument("--threads", type=int, default=None, help="torch intra-op threads")

    common(sub.add_parser("train", help="train one model"))
    common(sub.add_parser("compare", help="train XNODE-WAN and WAN on the same problem"))
    p = sub.add_parser("sweep", help="cross-product of parameter values")
    common(p)
    p.add_argument("--sweep", required=True, help="JSON mapping parameter names to value lists")
    p = sub.add_parser("heatmap", help="render solution and error heatmaps")
    common(p, config_required=False)
    p.add_argument("--run", help="run directory containing config.json and params.json")
    p.add_argument("--t", type=float, default=None, help="time of the slice (default T)")
    p.add_argument("--resolution", type=int, default=None)
    p = sub.add_parser("presets", help="list benchmark problems")
    p.add_argument("--threads", type=int, default=None)
    return parser


COMMANDS = {"train": cmd_train, "compare": cmd_compare, "sweep": cmd_sweep, "heatmap": cmd_heatmap,
            "presets": cmd_presets}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        torch.set_num_threads(max(1, args.threads))
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ConfigurationError, ManufactureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
