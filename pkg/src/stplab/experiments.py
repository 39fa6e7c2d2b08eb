"""Experiment drivers: lambda sweeps, data-fraction grids and diagnostics.

Each run writes ``metrics.csv`` and ``model.stpc`` under its own directory;
drivers also write one aggregate CSV.  Independent runs may execute in
worker processes (``STP_THREADS`` caps the count); results are always
collected in submission order.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import ExamplePair
from .geometry import linearity_epsilon, rollout_divergence, svd_spectrum, write_diagnostics_csv
from .model import EOS, forward, load_checkpoint
from .tensor import no_grad
from .theory import DegenerateSampleError, paired_t_test_one_tailed
from .train import RunRecord, build_split, train_run

AGGREGATE_HEADER = [
    "experiment", "variant", "lambda", "fraction", "seed",
    "accuracy", "acc_star", "acc_starstar", "final_ntp", "final_stp",
]


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("STP_THREADS", "1")))
    except ValueError:
        return 1


def run_many(configs: list[TrainConfig]) -> list[RunRecord]:
    workers = min(_workers(), len(configs))
    if workers <= 1:
        return [train_run(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(train_run, configs))


def aggregate_row(experiment: str, rec: RunRecord) -> dict:
    c = rec.config
    return {
        "experiment": experiment, "variant": c.variant, "lambda": c.lam,
        "fraction": 1.0 / c.fraction, "seed": c.seed, "accuracy": rec.accuracy,
        "acc_star": rec.acc_star, "acc_starstar": rec.acc_starstar,
        "final_ntp": rec.final_ntp, "final_stp": rec.final_stp,
    }


def write_aggregate_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (row[k] for k in AGGREGATE_HEADER)])


def _run_dir(out_dir, *parts) -> str:
    return str(Path(out_dir, *parts)) if out_dir else ""


@dataclass
class SweepResult:
    records: list[RunRecord]
    rows: list[dict]
    # lambda -> (mean, sd) over seeds
    accuracy: dict[float, tuple[float, float]] = field(default_factory=dict)
    final_stp: dict[float, tuple[float, float]] = field(default_factory=dict)
    final_ntp: dict[float, tuple[float, float]] = field(default_factory=dict)


def _mean_sd(xs) -> tuple[float, float]:
    xs = np.asarray(xs, dtype=float)
    return float(xs.mean()), float(xs.std(ddof=1)) if xs.size > 1 else 0.0


def sweep_lambda(base: TrainConfig, grid, seeds=None, out_dir: str = "") -> SweepResult:
    grid = [float(x) for x in grid]
    if not grid:
        raise ValueError("lambda grid is empty")
    seeds = list(seeds if seeds is not None else base.seeds)
    configs = [
        base.replace(lam=lam, seed=s, out_dir=_run_dir(out_dir, f"lam{lam:g}_seed{s}"))
        for lam in grid for s in seeds
    ]
    records = run_many(configs)
    rows = [aggregate_row("sweep_lambda", r) for r in records]
    result = SweepResult(records, rows)
    for lam in grid:
        sel = [r for r in records if r.config.lam == lam]
        result.accuracy[lam] = _mean_sd([r.accuracy for r in sel])
        result.final_stp[lam] = _mean_sd([r.final_stp for r in sel])
        result.final_ntp[lam] = _mean_sd([r.final_ntp for r in sel])
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_aggregate_csv(rows, Path(out_dir) / "aggregate.csv")
    return result


@dataclass
class DataEfficiencyResult:
    records: list[RunRecord]
    rows: list[dict]
    # fraction divisor -> variant label -> (mean, sd) accuracy
    accuracy: dict[int, dict[str, tuple[float, float]]]
    # fraction divisor -> (t, df, p) for aux variant > baseline, or None if degenerate
    ttests: dict[int, tuple[float, int, float] | None]


def data_efficiency_experiment(base: TrainConfig, fractions=(1, 2, 4),
                               variants=None, seeds=None, half_compute: bool = False,
                               out_dir: str = "") -> DataEfficiencyResult:
    """Grid over (fraction, variant, seed); n x epochs at fraction 1/n.

    ``variants`` is a list of (variant, lambda); the default compares the
    plain objective with the tube loss at ``base.lam``.  The t-test is the
    one-tailed paired test of the last variant against the first.
    """
    variants = list(variants or [("None", 0.0), ("STP", base.lam)])
    seeds = list(seeds if seeds is not None else base.seeds)
    configs, labels = [], []
    for n in fractions:
        for variant, lam in variants:
            for s in seeds:
                label = f"{variant}@{lam:g}"
                configs.append(base.replace(
                    variant=variant, lam=lam, seed=s, fraction=n, half_compute=half_compute,
                    out_dir=_run_dir(out_dir, f"frac{n}", label.replace("@", "_lam"), f"seed{s}"),
                ))
                labels.append(label)
    records = run_many(configs)
    rows = [aggregate_row("data_efficiency", r) for r in records]
    accuracy: dict[int, dict[str, tuple[float, float]]] = {}
    ttests: dict[int, tuple[float, int, float] | None] = {}
    first, last = f"{variants[0][0]}@{variants[0][1]:g}", f"{variants[-1][0]}@{variants[-1][1]:g}"
    for n in fractions:
        per = {}
        for label in dict.fromkeys(labels):
            sel = [r for r, lb in zip(records, labels) if lb == label and r.config.fraction == n]
            per[label] = _mean_sd([r.accuracy for r in sel])
        accuracy[n] = per
        a = [r.accuracy for r, lb in zip(records, labels) if lb == last and r.config.fraction == n]
        b = [r.accuracy for r, lb in zip(records, labels) if lb == first and r.config.fraction == n]
        try:
            ttests[n] = paired_t_test_one_tailed(a, b) if len(a) >= 2 else None
        except DegenerateSampleError:
            ttests[n] = None
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_aggregate_csv(rows, Path(out_dir) / "aggregate.csv")
        with open(Path(out_dir) / "ttests.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fraction", "t_stat", "df", "p_value"])
            for n, res in ttests.items():
                w.writerow([1.0 / n, *(("nan", "nan", "nan") if res is None else map(repr, res))])
    return DataEfficiencyResult(records, rows, accuracy, ttests)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def hidden_trajectories(params, mcfg, pairs: list[ExamplePair]) -> list[np.ndarray]:
    """Teacher-forced last-layer states, one (len, d) array per example."""
    out = []
    with no_grad():
        for p in pairs:
            _, h = forward(params, mcfg, p.tokens)
            out.append(h.values)
    return out


def mean_linearity_epsilon(params, mcfg, pairs, tau: int = 8) -> float:
    return float(np.mean([linearity_epsilon(h, tau).epsilon_hat
                          for h in hidden_trajectories(params, mcfg, pairs)]))


def _turning_angles(h: np.ndarray) -> np.ndarray:
    steps = np.diff(h, axis=0)
    a, b = steps[:-1], steps[1:]
    na = np.sqrt((a * a).sum(1) + 1e-16)
    nb = np.sqrt((b * b).sum(1) + 1e-16)
    return np.arccos(np.clip((a * b).sum(1) / (na * nb), -1.0, 1.0))


def diagnose(params, mcfg, pairs: list[ExamplePair], tau: int = 8, n_sequences: int = 50,
             rollout: bool = True, out_csv=None) -> list[tuple]:
    """Per-sequence geometry plus dataset-level SVD spectra.

    Rows are (sequence_id, metric, position, value).  The SVD rows stack,
    per sequence, mean(answer-span states) - mean(query-span states).
    """
    pairs = pairs[:n_sequences]
    trajs = hidden_trajectories(params, mcfg, pairs)
    rows: list[tuple] = []
    diffs = []
    for i, (p, h) in enumerate(zip(pairs, trajs)):
        rows.append((i, "linearity_epsilon", tau, linearity_epsilon(h, tau).epsilon_hat))
        for k, ang in enumerate(_turning_angles(h), start=1):
            rows.append((i, "curvature", k, ang))
        if rollout:
            series = rollout_divergence(params, mcfg, p.prompt, [*p.answer, EOS])
            for k, v in enumerate(series):
                rows.append((i, "rollout_divergence", k, v))
        m = p.marks
        q = h[m.query_start + 1: m.query_end + 1].mean(axis=0)
        a = h[m.query_end + 2: m.answer_end + 1].mean(axis=0)
        diffs.append(a - q)
    diffs = np.array(diffs)
    for metric, norm in (("svd_unnormalized", False), ("svd_normalized", True)):
        for k, sv in enumerate(svd_spectrum(diffs, normalize=norm)):
            rows.append(("dataset", metric, k, sv))
    if out_csv:
        write_diagnostics_csv(rows, out_csv)
    return rows


def diagnose_checkpoint(checkpoint, cfg: TrainConfig, **kw) -> list[tuple]:
    params, mcfg = load_checkpoint(checkpoint)
    split = build_split(cfg)
    return diagnose(params, mcfg, split.test, **kw)


def summarize(values) -> str:
    m, s = _mean_sd(values)
    return f"{m:.4f} +- {s:.4f}" if math.isfinite(m) else "nan"
