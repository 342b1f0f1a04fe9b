"""Ablation grids, progress curves and report rendering on the synthetic suite."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from .adapt import TELEMETRY_COLUMNS, Pretrained, run_stream, score
from .config import AdaptConfig, RunConfig, SuiteConfig, merge
from .kinematics import Camera, Skeleton
from .networks import observation_features
from .plotting import line_plot_svg
from .stream import PersonProfile, preset, random_profile, stream_person

log = logging.getLogger(__name__)

BASELINE = "no adaptation"


@dataclass(frozen=True)
class Cell:
    name: str
    overrides: dict = field(default_factory=dict)  # AdaptConfig fields


# axis name -> (default values, value -> AdaptConfig overrides)
AXES = {
    "soft_reset": ((True, False), lambda v: {"use_soft_reset": bool(v)}),
    "L_p": ((True, False), lambda v: {"use_pose_loss": bool(v)}),
    "L_ach": ((True, False), lambda v: {"use_anchor_loss": bool(v)}),
    "self_replay": ((True, False), lambda v: {"use_self_replay": bool(v)}),
    "mu_f": ((0.0, 0.9, 0.95, 1.0), lambda v: {"mu_f": float(v)}),
    "k": ((0, 1, 2, 3), lambda v: {"k": int(v)}),
    "continuous": ((True, False), lambda v: {"continuous": bool(v)}),
    "mu_m": ((None, 0.95, 1.0), lambda v: {"mu_m": None if v is None else float(v)}),
}


def _label(axis: str, value) -> str:
    if isinstance(value, bool):
        return f"{axis}={'on' if value else 'off'}"
    return f"{axis}={'off' if value is None else value}"


def cartesian(axes: dict[str, list]) -> list[Cell]:
    """One cell per combination of axis values, named ``axis=value,...``."""
    for name in axes:
        if name not in AXES:
            raise ValueError(f"unknown ablation axis {name!r}; known: {sorted(AXES)}")
    names = list(axes)
    cells = []
    for combo in itertools.product(*(axes[n] for n in names)):
        overrides = {}
        for n, v in zip(names, combo):
            overrides.update(AXES[n][1](v))
        cells.append(Cell(",".join(_label(n, v) for n, v in zip(names, combo)), overrides))
    return cells


GRIDS = {
    "components": [
        Cell("full", {}),
        Cell("soft-reset only", {"k": 0}),
        Cell("discretization only", {"use_soft_reset": False}),
        Cell("neither", {"use_soft_reset": False, "k": 0}),
    ],
    "decay": [Cell(f"mu_f={v}", {"mu_f": v}) for v in (0.0, 0.9, 0.95, 1.0)],
    "losses": [
        Cell("L_p only", {"use_anchor_loss": False}),
        Cell("L_ach only", {"use_pose_loss": False}),
        Cell("L_p + L_ach", {}),
    ],
    "depth": [Cell(f"k={k}", {"k": k}) for k in (0, 1, 2, 3)],
    "continuous": [Cell("continuous", {}), Cell("reset every batch", {"continuous": False})],
    "m_reset": [Cell("mu_m=off", {}), Cell("mu_m=0.95", {"mu_m": 0.95}), Cell("mu_m=1.0", {"mu_m": 1.0})],
    "replay": [Cell("with replay", {}), Cell("without replay", {"use_self_replay": False})],
}


def suite_profiles(suite: SuiteConfig) -> list[PersonProfile]:
    """Test persons of the suite; identical for every seed and every cell."""
    return [random_profile(suite.person_seed_offset + i, np.random.default_rng(suite.person_seed_offset + i))
            for i in range(suite.n_persons)]


def cell_config(base: AdaptConfig, cell: Cell) -> AdaptConfig:
    return merge(base, cell.overrides).validate()


def static_rows(pre: Pretrained, profiles, shift, seed: int, minutes: float,
                cam: Camera | None = None, skel: Skeleton | None = None) -> list[dict]:
    """Telemetry of the pre-trained F without adaptation on the same streams as :func:`run_stream`."""
    cam = cam or Camera()
    skel = skel or Skeleton()
    rows = []
    for p in profiles:
        for batch in stream_person(p, shift, minutes, np.random.default_rng([seed, p.person_id, 0]), cam, skel):
            o = batch.obs
            theta, beta, psi = pre.f.predict(observation_features(o.keypoints, o.confidence, o.nuisance, cam))
            err, err_pa = score(theta, beta, psi, batch.gt, skel)
            rows.append({"person_id": batch.person_id, "batch_idx": batch.index, "mpjpe_mm": err,
                         "mpjpe_pa_mm": err_pa, "L_F": math.nan, "L_M": math.nan, "L_ach": math.nan,
                         "drift": 0.0, "codebook_util": math.nan, "wall_ms": 0.0})
    return rows


def _run_task(args):
    pre, cfg, cell, seed = args
    profiles = suite_profiles(cfg.suite)
    shift = preset(cfg.suite.shift)
    if cell is None:
        return static_rows(pre, profiles, shift, seed, cfg.suite.minutes)
    return run_stream(pre, profiles, shift, cell_config(cfg.adapt, cell), seed, cfg.suite.minutes)


def ablation_grid(pre: Pretrained, cfg: RunConfig, cells: list[Cell], seeds, threads: int = 1,
                  baseline: bool = True, on_done=None) -> dict[tuple[str, int], list[dict]]:
    """Telemetry rows for every (cell, seed); the no-adaptation baseline is included unless disabled.

    Every task is seeded by its own (seed, person) and (seed,) streams, so the
    results do not depend on execution order or parallelism.
    """
    tasks = [(None, s) for s in seeds] if baseline else []
    valid = []
    for cell in cells:
        try:
            cell_config(cfg.adapt, cell)
        except (ValueError, TypeError) as e:
            log.warning("skipping cell %r: %s", cell.name, e)
            continue
        valid.append(cell)
    tasks += [(c, s) for c in valid for s in seeds]
    args = [(pre, cfg, c, s) for c, s in tasks]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_run_task, args))
    else:
        results = []
        for a in args:
            results.append(_run_task(a))
            if on_done is not None:
                on_done(a[2].name if a[2] else BASELINE, a[3])
    return {(c.name if c else BASELINE, s): rows for (c, s), rows in zip(tasks, results)}


# -- summaries ------------------------------------------------------------------

def final_quarter_mpjpe(rows: list[dict]) -> float:
    """Mean over persons of the mean MPJPE over each person's last quarter of batches."""
    per = {}
    for r in rows:
        per.setdefault(r["person_id"], []).append((r["batch_idx"], r["mpjpe_mm"]))
    vals = []
    for items in per.values():
        items.sort()
        n = len(items)
        start = (3 * n) // 4
        vals.append(np.mean([e for _, e in items[start:]]))
    return float(np.mean(vals)) if vals else math.nan


def _last_drift(rows: list[dict]) -> float:
    last = {}
    for r in rows:
        if r["batch_idx"] >= last.get(r["person_id"], (-1, 0.0))[0]:
            last[r["person_id"]] = (r["batch_idx"], r["drift"])
    return float(np.mean([d for _, d in last.values()])) if last else math.nan


SUMMARY_COLUMNS = ("cell", "seed", "final_quarter_mpjpe_mm", "mean_mpjpe_mm", "mean_mpjpe_pa_mm",
                   "final_drift", "mean_wall_ms")


def summarize(telemetry: dict[tuple[str, int], list[dict]]) -> list[dict]:
    out = []
    for (cell, seed), rows in telemetry.items():
        out.append({"cell": cell, "seed": seed, "final_quarter_mpjpe_mm": final_quarter_mpjpe(rows),
                    "mean_mpjpe_mm": float(np.mean([r["mpjpe_mm"] for r in rows])) if rows else math.nan,
                    "mean_mpjpe_pa_mm": float(np.mean([r["mpjpe_pa_mm"] for r in rows])) if rows else math.nan,
                    "final_drift": _last_drift(rows),
                    "mean_wall_ms": float(np.mean([r["wall_ms"] for r in rows])) if rows else math.nan})
    return out


def cell_stats(summary: list[dict]) -> dict[str, dict]:
    """Per cell: mean and (population) std over seeds of every summary metric."""
    cells: dict[str, list[dict]] = {}
    for row in summary:
        cells.setdefault(row["cell"], []).append(row)
    out = {}
    for cell, rows in cells.items():
        stats = {"n_seeds": len(rows)}
        for key in SUMMARY_COLUMNS[2:]:
            vals = np.array([r[key] for r in rows], dtype=float)
            stats[key] = (float(vals.mean()), float(vals.std()))
        out[cell] = stats
    return out


def by_seed(summary: list[dict], cell: str, key: str = "final_quarter_mpjpe_mm") -> dict[int, float]:
    return {r["seed"]: r[key] for r in summary if r["cell"] == cell}


def sign_test(a: dict[int, float], b: dict[int, float]) -> tuple[int, int, float]:
    """Seeds where ``a`` is below ``b``, the number of untied seeds, and the two-sided sign-test p-value."""
    seeds = sorted(set(a) & set(b))
    wins = sum(a[s] < b[s] for s in seeds)
    n = sum(a[s] != b[s] for s in seeds)
    p = binomtest(wins, n, 0.5).pvalue if n else 1.0
    return wins, n, float(p)


# -- progress curves ----------------------------------------------------------------

def moving_average(x, window: int = 5) -> np.ndarray:
    """Centered moving average with periodic boundary; the series mean is preserved exactly."""
    x = np.asarray(x, dtype=np.float64)
    if window <= 1 or len(x) == 0:
        return x.copy()
    half = window // 2
    padded = np.take(x, np.arange(-half, len(x) + window - 1 - half), mode="wrap")
    return np.convolve(padded, np.ones(window) / window, mode="valid")


def _series(rows: list[dict]) -> dict[int, np.ndarray]:
    per: dict[int, list] = {}
    for r in rows:
        per.setdefault(r["person_id"], []).append((r["batch_idx"], r["mpjpe_mm"]))
    return {pid: np.array([e for _, e in sorted(items)]) for pid, items in sorted(per.items())}


def progress_curves(telemetry: list[dict], baseline_telemetry: list[dict],
                    window: int = 5) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per person: (progress b/total, smoothed method minus baseline MPJPE)."""
    method, base = _series(telemetry), _series(baseline_telemetry)
    if set(method) != set(base):
        raise ValueError("progress_curves: persons differ between method and baseline")
    out = {}
    for pid, m in method.items():
        b = base[pid]
        if len(m) != len(b):
            raise ValueError(f"progress_curves: person {pid} has {len(m)} vs {len(b)} batches")
        out[pid] = (np.arange(len(m)) / len(m), moving_average(m - b, window))
    return out


# -- telemetry files -----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def write_telemetry(path, rows: list[dict]) -> None:
    write_rows(path, rows, TELEMETRY_COLUMNS)


def read_telemetry(path) -> list[dict]:
    ints = {"person_id", "batch_idx"}
    with open(path, newline="") as fh:
        return [{k: int(v) if k in ints else float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9.=+-]+", "_", name).strip("_") or "cell"


def save_grid(out_dir, telemetry: dict[tuple[str, int], list[dict]], cells: list[Cell], cfg: RunConfig) -> None:
    """Raw per-(cell, seed) telemetry plus an index that :func:`load_grid` reads back."""
    out = Path(out_dir)
    (out / "telemetry").mkdir(parents=True, exist_ok=True)
    index = {"suite": {"n_persons": cfg.suite.n_persons, "minutes": cfg.suite.minutes, "shift": cfg.suite.shift},
             "cells": [{"name": c.name, "overrides": c.overrides} for c in cells], "runs": []}
    for (cell, seed), rows in telemetry.items():
        fname = f"telemetry/{slug(cell)}__seed{seed}.csv"
        write_telemetry(out / fname, rows)
        index["runs"].append({"cell": cell, "seed": seed, "file": fname})
    (out / "grid.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def load_grid(in_dir) -> tuple[dict[tuple[str, int], list[dict]], dict]:
    root = Path(in_dir)
    index = json.loads((root / "grid.json").read_text())
    telemetry = {(r["cell"], r["seed"]): read_telemetry(root / r["file"]) for r in index["runs"]}
    return telemetry, index


# -- report --------------------------------------------------------------------------

def _pm(stat) -> str:
    m, s = stat
    return f"{m:.2f} ± {s:.2f}"


def report(telemetry: dict[tuple[str, int], list[dict]], out_dir, title: str = "Ablation report",
           suite: dict | None = None) -> str:
    """Write report.md, grid.csv, summary.csv and curves/*.{csv,svg}; returns the markdown.

    All numbers derive from the telemetry rows; rendering is deterministic.
    """
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    summary = sorted(summarize(telemetry), key=lambda r: (r["cell"] != BASELINE, r["cell"], r["seed"]))
    order = list(dict.fromkeys(c for c, _ in telemetry))
    write_rows(out / "grid.csv", summary, SUMMARY_COLUMNS)
    stats = cell_stats(summary)
    stat_rows = [{"cell": c, "n_seeds": stats[c]["n_seeds"],
                  **{f"{k}_mean": stats[c][k][0] for k in SUMMARY_COLUMNS[2:]},
                  **{f"{k}_std": stats[c][k][1] for k in SUMMARY_COLUMNS[2:]}} for c in order]
    cols = ["cell", "n_seeds"] + [f"{k}_{s}" for k in SUMMARY_COLUMNS[2:] for s in ("mean", "std")]
    write_rows(out / "summary.csv", stat_rows, cols)

    lines = [f"# {title}", ""]
    if suite:
        lines += [f"Suite: {suite.get('n_persons')} persons, {suite.get('minutes')} min streams, "
                  f"shift preset `{suite.get('shift')}`.", ""]
    lines += ["| cell | seeds | final-quarter MPJPE (mm) | mean MPJPE (mm) | mean MPJPE-PA (mm) | final drift |",
              "|---|---|---|---|---|---|"]
    for c in order:
        s = stats[c]
        lines.append(f"| {c} | {s['n_seeds']} | {_pm(s['final_quarter_mpjpe_mm'])} | {_pm(s['mean_mpjpe_mm'])} "
                     f"| {_pm(s['mean_mpjpe_pa_mm'])} | {_pm(s['final_drift'])} |")
    lines.append("")

    methods = [c for c in order if c != BASELINE]
    if len(methods) > 1:
        lines += ["## Paired sign tests over seeds (final-quarter MPJPE)", "",
                  "Sign test across seeds; a desk-scale stand-in for a per-participant rank test.", "",
                  "| A | B | seeds with A < B | untied | p (two-sided) |", "|---|---|---|---|---|"]
        for a, b in itertools.combinations(methods, 2):
            wins, n, p = sign_test(by_seed(summary, a), by_seed(summary, b))
            lines.append(f"| {a} | {b} | {wins} | {n} | {p:.3f} |")
        lines.append("")

    if BASELINE in order and methods:
        lines += ["## Error difference to the unadapted estimator over adaptation progress", ""]
        seeds = sorted(s for c, s in telemetry if c == BASELINE)
        for c in methods:
            curves = {}
            for s in seeds:
                if (c, s) not in telemetry:
                    continue
                for pid, (x, y) in progress_curves(telemetry[(c, s)], telemetry[(BASELINE, s)]).items():
                    curves.setdefault(pid, []).append((x, y))
            if not curves:
                continue
            mean_curves = {pid: (v[0][0], np.mean([y for _, y in v], axis=0)) for pid, v in sorted(curves.items())}
            name = slug(c)
            with open(out / "curves" / f"{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["person_id", "progress", "delta_mpjpe_mm"])
                for pid, (x, y) in mean_curves.items():
                    for xi, yi in zip(x, y):
                        w.writerow([pid, repr(float(xi)), repr(float(yi))])
            svg = line_plot_svg({f"person {pid}": xy for pid, xy in mean_curves.items()},
                                "adaptation progress (fraction of stream)", "MPJPE difference (mm)", c)
            (out / "curves" / f"{name}.svg").write_text(svg)
            lines.append(f"- {c}: [csv](curves/{name}.csv), [svg](curves/{name}.svg)")
        lines.append("")
    text = "\n".join(lines)
    (out / "report.md").write_text(text)
    return text
