"""Per-cycle accuracy metrics and their aggregation.

Aggregation order is fixed: mean over cycles within (subject, muscle, mode),
then over modes, then per-muscle mean +/- sd across subjects. The overall
value per subject is the mean over muscles, and the overall figure is the
mean +/- sd of those subject values. Standard deviations use n - 1.
Cycles flagged as degenerate for a metric are excluded and counted.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError

METRICS = ("nrmse", "r", "r2", "delta_tp", "delta_ep")
SCHEMA_VERSION = 1


def _pair(truth, pred) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(truth, dtype=np.float64)
    b = np.asarray(pred, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def pearson_r(x, y) -> float:
    """Sample correlation; 0.0 when either sequence is constant."""
    x, y = _pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    r = float(np.dot(xc, yc)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def r_squared(truth, pred) -> float:
    """Coefficient of determination; may be negative. 0.0 for constant truth."""
    t, p = _pair(truth, pred)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        return 0.0
    return 1.0 - float(np.sum((t - p) ** 2)) / ss_tot


def nrmse(truth, pred) -> float:
    """RMSE divided by the range of ``truth``. 0.0 for constant truth."""
    t, p = _pair(truth, pred)
    span = float(t.max() - t.min())
    if span == 0.0:
        return 0.0
    return math.sqrt(float(np.mean((t - p) ** 2))) / span


def delta_tp(truth, pred) -> float:
    """Peak-timing error as a fraction of the cycle length (earliest argmax wins)."""
    t, p = _pair(truth, pred)
    return abs(int(np.argmax(t)) - int(np.argmax(p))) / t.shape[0]


def delta_ep(truth, pred) -> float:
    """``|max(truth) - max(pred)| / max(truth)``; 0.0 when the true peak is not positive."""
    t, p = _pair(truth, pred)
    peak = float(t.max())
    if peak <= 0.0:
        return 0.0
    return abs(peak - float(p.max())) / peak


@dataclass
class CycleMetrics:
    """All metrics for one cycle; arrays are indexed by muscle."""

    subject_id: str
    mode: str
    cycle_index: int
    values: dict[str, np.ndarray]
    degenerate: dict[str, np.ndarray]


def clip_unit(pred) -> np.ndarray:
    return np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0)


def cycle_metrics(truth, pred, subject_id: str, mode: str, cycle_index: int, clip: bool = True) -> CycleMetrics:
    """Metrics for every muscle (column) of a ``[T, M]`` cycle."""
    t, p = _pair(truth, pred)
    if clip:
        p = clip_unit(p)
    m = t.shape[1]
    vals = {k: np.zeros(m) for k in METRICS}
    deg = {k: np.zeros(m, dtype=bool) for k in METRICS}
    for j in range(m):
        tj, pj = t[:, j], p[:, j]
        t_const = tj.max() == tj.min()
        vals["nrmse"][j] = nrmse(tj, pj)
        vals["r"][j] = pearson_r(tj, pj)
        vals["r2"][j] = r_squared(tj, pj)
        vals["delta_tp"][j] = delta_tp(tj, pj)
        vals["delta_ep"][j] = delta_ep(tj, pj)
        deg["nrmse"][j] = t_const
        deg["r"][j] = t_const or pj.max() == pj.min()
        deg["r2"][j] = t_const
        deg["delta_ep"][j] = tj.max() <= 0.0
    return CycleMetrics(subject_id, mode, cycle_index, vals, deg)


def _mean_sd(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), sd


@dataclass
class MetricsReport:
    """Aggregated metrics. ``(mean, sd)`` pairs are across subjects."""

    muscles: list[str]
    overall: dict[str, tuple[float, float]]
    per_muscle: dict[str, dict[str, tuple[float, float]]]
    per_subject: dict[str, dict[str, float]]
    per_mode: dict[str, dict[str, tuple[float, float]]]
    n_cycles: int
    excluded: dict[str, int] = field(default_factory=dict)
    mode_filter: str | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "mode_filter": self.mode_filter,
            "n_cycles": self.n_cycles,
            "excluded": dict(sorted(self.excluded.items())),
            "overall": {k: {"mean": m, "sd": s} for k, (m, s) in self.overall.items()},
            "per_muscle": {
                k: {mus: {"mean": m, "sd": s} for mus, (m, s) in d.items()} for k, d in self.per_muscle.items()
            },
            "per_subject": {sid: dict(d) for sid, d in sorted(self.per_subject.items())},
            "per_mode": {
                mode: {k: {"mean": m, "sd": s} for k, (m, s) in d.items()}
                for mode, d in sorted(self.per_mode.items())
            },
        }


def _subject_muscle_means(cycles: list[CycleMetrics], metric: str, n_muscles: int):
    """{subject: [M] per-muscle value} via cycles -> (subject, muscle, mode) -> modes."""
    acc: dict[str, dict[str, list]] = {}
    excluded = 0
    for c in cycles:
        acc.setdefault(c.subject_id, {}).setdefault(c.mode, []).append(c)
    out = {}
    for sid, by_mode in acc.items():
        mode_means = []
        for _, cs in sorted(by_mode.items()):
            vals = np.stack([c.values[metric] for c in cs])
            mask = ~np.stack([c.degenerate[metric] for c in cs])
            excluded += int((~mask).sum())
            with np.errstate(invalid="ignore"):
                cnt = mask.sum(axis=0)
                mode_means.append(np.where(cnt > 0, (vals * mask).sum(axis=0) / np.maximum(cnt, 1), np.nan))
        with warnings.catch_warnings():  # all-degenerate muscles legitimately yield NaN
            warnings.simplefilter("ignore", RuntimeWarning)
            out[sid] = np.nanmean(np.stack(mode_means), axis=0) if mode_means else np.full(n_muscles, np.nan)
    return out, excluded


def aggregate(cycles, muscles=None, mode: str | None = None) -> MetricsReport:
    """Aggregate per-cycle metrics at muscle, mode, subject and overall level.

    ``mode`` restricts the input to one locomotion mode first.
    """
    cycles = [c for c in cycles if mode is None or c.mode == mode]
    if not cycles:
        raise ValueError("no cycle metrics to aggregate" + (f" for mode {mode!r}" if mode else ""))
    n_mus = len(next(iter(cycles[0].values.values())))
    muscles = list(muscles) if muscles is not None else [f"m{j}" for j in range(n_mus)]
    overall, per_muscle, excluded = {}, {}, {}
    per_subject: dict[str, dict[str, float]] = {}
    with np.errstate(all="ignore"):
        for metric in METRICS:
            subj, excluded[metric] = _subject_muscle_means(cycles, metric, n_mus)
            mat = np.stack([subj[s] for s in sorted(subj)])  # [S, M]
            per_muscle[metric] = {
                mus: _mean_sd(mat[~np.isnan(mat[:, j]), j]) for j, mus in enumerate(muscles)
            }
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                subj_vals = {s: float(np.nanmean(v)) for s, v in subj.items()}
            for s, v in subj_vals.items():
                per_subject.setdefault(s, {})[metric] = v
            overall[metric] = _mean_sd([v for v in subj_vals.values() if not math.isnan(v)])
    per_mode = {}
    if mode is None:
        for m in sorted({c.mode for c in cycles}):
            per_mode[m] = aggregate(cycles, muscles, mode=m).overall
    else:
        per_mode[mode] = overall
    return MetricsReport(muscles, overall, per_muscle, per_subject, per_mode, len(cycles), excluded, mode)


def evaluate_cycles(truth, pred, segments, clip: bool = True) -> list[CycleMetrics]:
    """Per-cycle metrics for stacked ``[N, T, M]`` truth/prediction arrays."""
    return [
        cycle_metrics(truth[i], pred[i], s.subject_id, s.mode, s.cycle_index, clip)
        for i, s in enumerate(segments)
    ]


CYCLE_CSV_FIELDS = ("subject", "mode", "cycle_index", "muscle", *METRICS, "degenerate")


def cycle_rows(cycles, muscles) -> list[dict]:
    """Long-format rows (one per cycle x muscle) for the per-cycle CSV."""
    rows = []
    for c in cycles:
        for j, mus in enumerate(muscles):
            deg = [k for k in METRICS if c.degenerate[k][j]]
            row = {"subject": c.subject_id, "mode": c.mode, "cycle_index": c.cycle_index, "muscle": mus}
            row.update({k: repr(float(c.values[k][j])) for k in METRICS})
            row["degenerate"] = "|".join(deg)
            rows.append(row)
    return rows


def cycles_from_rows(rows, muscles) -> list[CycleMetrics]:
    """Inverse of :func:`cycle_rows`."""
    index = {m: j for j, m in enumerate(muscles)}
    grouped: dict[tuple, CycleMetrics] = {}
    for row in rows:
        key = (row["subject"], row["mode"], int(row["cycle_index"]))
        if key not in grouped:
            grouped[key] = CycleMetrics(
                key[0], key[1], key[2],
                {k: np.zeros(len(muscles)) for k in METRICS},
                {k: np.zeros(len(muscles), dtype=bool) for k in METRICS},
            )
        c = grouped[key]
        j = index[row["muscle"]]
        flags = set(filter(None, row["degenerate"].split("|")))
        for k in METRICS:
            c.values[k][j] = float(row[k])
            c.degenerate[k][j] = k in flags
    return list(grouped.values())
