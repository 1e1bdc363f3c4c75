"""Evaluation criteria: MSE, Pearson, Spearman, and Kendall tau-b.

All four are reported at two levels: per utterance, and per system after
averaging each system's predictions and ground-truth means. Spearman uses
average ranks for ties; Kendall is the tie-corrected tau-b, since scores
on a 1/8 grid guarantee ties. Correlations of a constant vector are
mathematically undefined and reported as flagged NaN rather than 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .errors import InvalidInputError, UndefinedMetricError

METRIC_NAMES = ["mse", "lcc", "srcc", "ktau"]
LEVELS = ["utterance", "system"]


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1 or p.size == 0:
        raise InvalidInputError(f"need equal-length nonempty vectors, got {p.shape} and {t.shape}")
    return p, t


def mse(pred, truth) -> float:
    """Mean squared difference."""
    p, t = _pair(pred, truth)
    d = p - t
    return float((d * d).mean())


def lcc(pred, truth) -> float:
    """Pearson linear correlation."""
    p, t = _pair(pred, truth)
    if p.size < 2:
        raise UndefinedMetricError("correlation needs at least two points")
    dp = p - p.mean()
    dt = t - t.mean()
    vp = (dp * dp).sum()
    vt = (dt * dt).sum()
    if vp == 0.0 or vt == 0.0:
        raise UndefinedMetricError("correlation undefined for a constant vector")
    return float((dp * dt).sum() / np.sqrt(vp * vt))


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def srcc(pred, truth) -> float:
    """Spearman rank correlation: Pearson over average ranks."""
    p, t = _pair(pred, truth)
    return lcc(average_ranks(p), average_ranks(t))


def _tau_counts(p: np.ndarray, t: np.ndarray) -> tuple[int, int, int, int]:
    """Concordant/discordant pair counts and per-vector tie-pair counts.

    Pairs are enumerated in row blocks so memory stays O(block * n) even
    for large vectors.
    """
    n = p.size
    concordant = discordant = ties_p = ties_t = 0
    block = max(1, 2_000_000 // max(n, 1))
    for start in range(0, n - 1, block):
        rows = np.arange(start, min(start + block, n - 1))
        sp = np.sign(p[rows, None] - p[None, :])
        st = np.sign(t[rows, None] - t[None, :])
        upper = np.arange(n)[None, :] > rows[:, None]  # j > i only
        prod = sp * st
        concordant += int(((prod > 0) & upper).sum())
        discordant += int(((prod < 0) & upper).sum())
        ties_p += int(((sp == 0) & upper).sum())
        ties_t += int(((st == 0) & upper).sum())
    return concordant, discordant, ties_p, ties_t


def ktau(pred, truth) -> float:
    """Kendall tau-b: (C - D) / sqrt((n0 - Tp)(n0 - Tt)) over all pairs."""
    p, t = _pair(pred, truth)
    if p.size < 2:
        raise UndefinedMetricError("correlation needs at least two points")
    n0 = p.size * (p.size - 1) // 2
    concordant, discordant, ties_p, ties_t = _tau_counts(p, t)
    if ties_p == n0 or ties_t == n0:
        raise UndefinedMetricError("tau undefined for an all-ties vector")
    return float((concordant - discordant) / np.sqrt((n0 - ties_p) * (n0 - ties_t)))


def ktau_a(pred, truth) -> float:
    """Uncorrected tau-a: (C - D) / n0, for comparison with tau-b."""
    p, t = _pair(pred, truth)
    if p.size < 2:
        raise UndefinedMetricError("correlation needs at least two points")
    n0 = p.size * (p.size - 1) // 2
    concordant, discordant, _, _ = _tau_counts(p, t)
    return float((concordant - discordant) / n0)


def system_level(predictions: dict, truths: dict, systems: dict):
    """Aggregate utterance values into per-system means.

    Returns (pred vector, truth vector, system ids), systems in sorted
    order; metrics are then applied to the aggregated vectors.
    """
    groups: dict[str, list[str]] = {}
    for uid in predictions:
        if uid not in systems:
            raise InvalidInputError(f"utterance '{uid}' has no system id")
        groups.setdefault(systems[uid], []).append(uid)
    names = sorted(groups)
    pred = np.array([np.mean([predictions[u] for u in groups[s]]) for s in names])
    truth = np.array([np.mean([truths[u] for u in groups[s]]) for s in names])
    return pred, truth, names


@dataclass
class EvalReport:
    """The four criteria at utterance and system level.

    ``values[level][metric]`` is NaN when the metric is undefined for the
    data (constant vectors); such entries are listed in ``undefined``.
    """

    values: dict[str, dict[str, float]]
    undefined: list[tuple[str, str]] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["level,metric,value"]
        for level in LEVELS:
            for name in METRIC_NAMES:
                lines.append(f"{level},{name},{self.values[level][name]!r}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        rows = [f"{'level':<10} " + " ".join(f"{m:>8}" for m in METRIC_NAMES)]
        for level in LEVELS:
            cells = []
            for name in METRIC_NAMES:
                v = self.values[level][name]
                cells.append(f"{v:8.4f}" if np.isfinite(v) else f"{'undef':>8}")
            rows.append(f"{level:<10} " + " ".join(cells))
        return "\n".join(rows)


def _metric_block(pred, truth, level: str, report: EvalReport):
    fns = {"mse": mse, "lcc": lcc, "srcc": srcc, "ktau": ktau}
    for name in METRIC_NAMES:
        try:
            report.values[level][name] = fns[name](pred, truth)
        except UndefinedMetricError:
            report.values[level][name] = float("nan")
            report.undefined.append((level, name))


def evaluate(predictions: dict, dataset: Dataset) -> EvalReport:
    """Score predictions against a labeled split at both levels.

    ``predictions`` maps utterance id to a real value and must cover the
    split; missing ids are reported in the error.
    """
    truths = dataset.targets()
    missing = sorted(set(truths) - set(predictions))
    if missing:
        raise InvalidInputError(f"missing predictions for: {', '.join(missing)}")
    ids = [u.id for u in dataset.utterances]
    pred_vec = np.array([predictions[i] for i in ids])
    truth_vec = np.array([truths[i] for i in ids])
    report = EvalReport(values={level: {} for level in LEVELS})
    _metric_block(pred_vec, truth_vec, "utterance", report)
    sys_pred, sys_truth, _ = system_level(
        {i: predictions[i] for i in ids}, truths, dataset.systems()
    )
    _metric_block(sys_pred, sys_truth, "system", report)
    return report
