from logging import getLogger
from typing import Union

import numpy as np

from .tensor import NORM_EPS
from .tensor import Tensor

logger = getLogger(__name__)

DICE_EPS = 1.0


def _check_shapes(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _as_tensor(value: Union[Tensor, np.ndarray], like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def soft_dice_loss(
    pred: Tensor, target: Union[Tensor, np.ndarray], eps: float = DICE_EPS
) -> Tensor:
    """
    ``1 - (2 sum(pred * target) + eps) / (sum(pred) + sum(target) + eps)``.

    Sums run over every element of a sample. For [N, C, H, W] input the loss is
    evaluated per sample and averaged over the batch.
    """
    target = _as_tensor(target, pred)
    _check_shapes(pred, target, "soft_dice_loss")
    axes = tuple(range(1, pred.ndim)) if pred.ndim == 4 else None
    intersection = (pred * target).sum(axis=axes)
    total = pred.sum(axis=axes) + target.sum(axis=axes)
    return (1.0 - (intersection * 2.0 + eps) / (total + eps)).mean()


def batch_standardize(p: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Standardize each pixel across the batch dimension; identity when N == 1."""
    if p.shape[0] < 2:
        return p
    centered = p - p.mean(axis=0, keepdims=True)
    var = (centered * centered).mean(axis=0, keepdims=True)
    return centered / (var + eps) ** 0.5


def mse(a: Tensor, b: Tensor) -> Tensor:
    diff = a - b
    return (diff * diff).mean()


def consistency_loss(
    p1: Tensor,
    p2: Tensor,
    stop_gradient: bool = False,
    batch_dim_normalize: bool = False,
) -> Tensor:
    """
    Mean squared disagreement between the two decoders' probability maps.

    Parameters:
    ----------
    p1, p2:
        probability maps of identical shape.
    stop_gradient:
        evaluate ``(MSE(q1, sg(q2)) + MSE(sg(q1), q2)) / 2`` so that each decoder
        is pulled toward a constant copy of the other.
    batch_dim_normalize:
        standardize both maps per pixel across the batch before comparing.
    """
    _check_shapes(p1, p2, "consistency_loss")
    if batch_dim_normalize:
        p1, p2 = batch_standardize(p1), batch_standardize(p2)
    if stop_gradient:
        return (mse(p1, p2.detach()) + mse(p1.detach(), p2)) * 0.5
    return mse(p1, p2)
