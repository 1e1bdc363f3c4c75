"""Prediction post-processing: decode, combine, correct, quantize.

Trained models compress the extremes of the score range, so fixed offsets
push predictions outward beyond the thresholds where that compression
sets in (below 1.3 and above 4.2). Final predictions are snapped to the
attainable MOS grid and clamped to [1, 5].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DEFAULT_RESOLUTION, class_to_mos
from .errors import InvalidInputError


@dataclass(frozen=True)
class PostConfig:
    resolution: float = DEFAULT_RESOLUTION
    low_threshold: float = 1.3
    high_threshold: float = 4.2
    low_delta: float = -0.05
    high_delta: float = 0.25
    ensemble: bool = True
    decode: str = "argmax"  # or "expectation"
    order: str = "correct_then_quantize"  # or "quantize_then_correct"

    def __post_init__(self):
        if not (1.0 < self.low_threshold < self.high_threshold < 5.0):
            raise InvalidInputError("need 1 < low_threshold < high_threshold < 5")
        if self.resolution <= 0:
            raise InvalidInputError("resolution must be positive")


def quantize(pred: float, resolution: float = DEFAULT_RESOLUTION) -> float:
    """Clamp to [1, 5] and snap to the nearest grid point 1 + k*resolution.

    Exact midpoints round up. Idempotent, and never moves an in-range
    value by more than resolution/2.
    """
    if resolution <= 0:
        raise InvalidInputError("resolution must be positive")
    if not np.isfinite(pred):
        raise InvalidInputError(f"non-finite prediction {pred!r}")
    clamped = min(max(float(pred), 1.0), 5.0)
    k = int(np.floor((clamped - 1.0) / resolution + 0.5))
    k = min(k, int(round(4.0 / resolution)))
    return 1.0 + k * resolution


def decode_classification(probs, mode: str = "argmax") -> float:
    """Turn a 33-way distribution into a MOS value.

    ``argmax`` picks the first maximal category; ``expectation`` returns
    the probability-weighted mean of the grid.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or (p < 0).any() or not np.isfinite(p).all() or abs(p.sum() - 1.0) > 1e-6:
        raise InvalidInputError("probabilities must be a nonnegative vector summing to 1")
    if mode == "argmax":
        return class_to_mos(int(np.argmax(p)) + 1)
    if mode == "expectation":
        grid = np.array([class_to_mos(k + 1) for k in range(p.size)])
        return float(p @ grid)
    raise InvalidInputError(f"unknown decode mode {mode!r}")


def ensemble(reg_pred: float, cls_pred: float) -> float:
    """Average the two heads' predictions."""
    if not (np.isfinite(reg_pred) and np.isfinite(cls_pred)):
        raise InvalidInputError("ensemble inputs must be finite")
    return (float(reg_pred) + float(cls_pred)) / 2.0


def correct(pred: float, cfg: PostConfig = PostConfig()) -> float:
    """Push extreme predictions outward by the fixed region offsets.

    Below the low threshold the offset is -0.05; above the high threshold
    +0.25; the middle region is untouched. The result is clamped to [1, 5].
    """
    if not np.isfinite(pred):
        raise InvalidInputError(f"non-finite prediction {pred!r}")
    p = float(pred)
    if p < cfg.low_threshold:
        p += cfg.low_delta
    elif p > cfg.high_threshold:
        p += cfg.high_delta
    return min(max(p, 1.0), 5.0)


def pipeline(reg_pred: float | None, cls_probs=None, cfg: PostConfig = PostConfig()) -> float:
    """Full post-processing chain: decode, ensemble, correct, quantize.

    Either head may be absent; with both present and ``cfg.ensemble`` set,
    their predictions are averaged. Output is always on the grid in [1, 5].
    """
    if reg_pred is None and cls_probs is None:
        raise InvalidInputError("need at least one model prediction")
    cls_pred = None if cls_probs is None else decode_classification(cls_probs, cfg.decode)
    if reg_pred is None:
        value = cls_pred
    elif cls_pred is None or not cfg.ensemble:
        value = float(reg_pred)
    else:
        value = ensemble(reg_pred, cls_pred)
    if cfg.order == "quantize_then_correct":
        value = correct(quantize(value, cfg.resolution), cfg)
        return quantize(value, cfg.resolution)
    value = correct(value, cfg)
    return quantize(value, cfg.resolution)
