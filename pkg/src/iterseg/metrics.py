"""Dice and Jaccard coefficients and the dice-ratio training objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .tensor import Tensor, ShapeError, div, mul, square, tensor_sum


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def _values(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def dice(pred, truth) -> float:
    """Dice coefficient ``2 sum(y*p) / (sum(y^2) + sum(p^2))`` on one map.

    Works on soft predictions as-is; both maps all-zero gives 1.0.
    """
    p = _values(pred).astype(np.float64)
    y = _values(truth).astype(np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"dice: shapes {p.shape} and {y.shape} differ")
    den = np.sum(y * y) + np.sum(p * p)
    if den == 0:
        return 1.0
    return float(2.0 * np.sum(y * p) / den)


def _check_binary(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all((x == 0) | (x == 1)):
        raise ValueError(f"jaccard: {what} is not binary")
    return x.astype(bool)


def jaccard(pred_binary, truth) -> float:
    """|A & B| / |A | B| for binary maps; empty union gives 1.0."""
    a = _check_binary(_values(pred_binary), "prediction")
    b = _check_binary(_values(truth), "ground truth")
    if a.shape != b.shape:
        raise ShapeError(f"jaccard: shapes {a.shape} and {b.shape} differ")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    return (_values(pred) >= threshold).astype(np.float64)


def soft_dice(pred: Tensor, truth: np.ndarray) -> Tensor:
    """Per-image soft dice of an N x 1 x H x W prediction tensor.

    Returns a differentiable tensor of shape (N,). Predictions come from a
    sigmoid and are strictly positive, so the denominator never vanishes.
    """
    y = np.asarray(truth, dtype=pred.dtype).reshape(pred.shape)
    axes = tuple(range(1, pred.data.ndim))
    num = mul(tensor_sum(mul(pred, y), axes), 2.0)
    den = tensor_sum(square(pred), axes) + np.asarray(np.sum(y * y, axis=axes), dtype=pred.dtype)
    return div(num, den)


def iter_loss(d_t: Union[Tensor, float, np.ndarray], d_prev, cfg: LossConfig = LossConfig()):
    """``-(D_t + eps) / (D_{t-1} + eps)``.

    ``d_prev`` is always treated as a constant. With a tensor ``d_t`` the
    result stays on the graph; otherwise plain floats/arrays are returned.
    """
    if isinstance(d_prev, Tensor):
        d_prev = d_prev.data
    if isinstance(d_t, Tensor):
        den = np.asarray(d_prev, dtype=d_t.dtype) + d_t.dtype.type(cfg.epsilon)
        return div(-(d_t + cfg.epsilon), den)
    out = -(np.asarray(d_t, dtype=np.float64) + cfg.epsilon) / (np.asarray(d_prev, dtype=np.float64) + cfg.epsilon)
    return float(out) if out.ndim == 0 else out
