"""Multi-task segmentation loss with analytic gradients, and voxel metrics.

The total loss is ``w_ct*dice(S_ct) + w_pet*dice(S_pet) + w_f*sse(S_f)``
where every term is measured against the same ground-truth mask (the
modality-A mask). The fusion term is a plain sum of squared errors, not a
mean, so it grows with lesion size while the Dice terms stay in [0, 1].

Reductions accumulate in float64 (or wider, for long-double inputs) with
numpy's pairwise summation, which is deterministic for a given array
layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .volume import Volume

DICE_SMOOTH = 1e-6


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Volume) else np.asarray(x)


def _grad_dtype(x: np.ndarray) -> np.dtype:
    return x.dtype if x.dtype.kind == "f" and x.dtype.itemsize >= 4 else np.dtype(np.float64)


def _work_dtype(*arrays) -> np.dtype:
    return np.promote_types(np.result_type(*(_grad_dtype(a) for a in arrays)), np.float64)


def _scalar(x, dt: np.dtype):
    # plain floats normally; long-double results keep their precision
    return float(x) if dt.itemsize <= 8 else dt.type(x)


def _check_shapes(*arrays) -> None:
    first = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != first:
            raise ShapeError(f"shape mismatch: {first} vs {a.shape}")


@dataclass(frozen=True)
class LossWeights:
    w_ct: float = 0.75
    w_pet: float = 0.25
    w_f: float = 1.0

    def __post_init__(self):
        if min(self.w_ct, self.w_pet, self.w_f) < 0:
            raise DomainError(f"loss weights must be non-negative: {self}")


@dataclass(frozen=True)
class LossReport:
    loss_pet: float
    loss_ct: float
    loss_f: float
    loss_all: float
    # gradients of loss_all w.r.t. each prediction, weights applied
    grad_pet: np.ndarray
    grad_ct: np.ndarray
    grad_f: np.ndarray


@dataclass(frozen=True)
class Metrics:
    dice: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    threshold: float = 0.5


def dice_loss(S, G, smooth: float = DICE_SMOOTH) -> tuple[float, np.ndarray]:
    """Soft Dice loss ``1 - (2*sum(S*G) + s) / (sum(S) + sum(G) + s)`` and its gradient."""
    S, G = _arr(S), _arr(G)
    _check_shapes(S, G)
    wt = _work_dtype(S, G)
    s64, g64 = S.astype(wt), G.astype(wt)
    inter = np.sum(s64 * g64)
    union = np.sum(s64) + np.sum(g64) + smooth
    num = 2.0 * inter + smooth
    loss = 1.0 - num / union
    grad = -(2.0 * g64 * union - num) / (union * union)
    return _scalar(loss, wt), grad.astype(_grad_dtype(S))


def mse_loss(Sf, G) -> tuple[float, np.ndarray]:
    """Sum of squared differences and its gradient ``2*(Sf - G)``."""
    Sf, G = _arr(Sf), _arr(G)
    _check_shapes(Sf, G)
    wt = _work_dtype(Sf, G)
    diff = Sf.astype(wt) - G.astype(wt)
    return _scalar(np.sum(diff * diff), wt), (2.0 * diff).astype(_grad_dtype(Sf))


def multitask_loss(S1, S2, Sf, G, weights: LossWeights | None = None) -> LossReport:
    """Combine both branch Dice losses with the fused-output squared error.

    ``S1`` is the modality-A (PET) prediction, ``S2`` the modality-B (CT)
    prediction and ``Sf`` the fused map. The returned gradients are the
    direct partials of the total; routing ``grad_f`` back through the
    fusion layer is the caller's job.
    """
    w = weights or LossWeights()
    S1, S2, Sf, G = _arr(S1), _arr(S2), _arr(Sf), _arr(G)
    _check_shapes(S1, S2, Sf, G)
    l_pet, g_pet = dice_loss(S1, G)
    l_ct, g_ct = dice_loss(S2, G)
    l_f, g_f = mse_loss(Sf, G)
    total = w.w_ct * l_ct + w.w_pet * l_pet + w.w_f * l_f
    return LossReport(
        loss_pet=l_pet,
        loss_ct=l_ct,
        loss_f=l_f,
        loss_all=total,
        grad_pet=(w.w_pet * g_pet).astype(g_pet.dtype),
        grad_ct=(w.w_ct * g_ct).astype(g_ct.dtype),
        grad_f=(w.w_f * g_f).astype(g_f.dtype),
    )


def metrics(pred, G, threshold: float = 0.5) -> Metrics:
    """Voxel-level Dice, precision and recall of ``pred > threshold``.

    When both prediction and truth are empty all three scores are 1. An
    undefined ratio with a non-empty counterpart (e.g. recall when the
    truth is empty but the prediction is not) scores 0.
    """
    if not (0.0 < threshold < 1.0):
        raise DomainError(f"threshold {threshold!r} outside (0, 1)")
    pred, G = _arr(pred), _arr(G)
    _check_shapes(pred, G)
    p = pred > threshold
    g = G > 0.5
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    if tp + fp + fn == 0:
        return Metrics(1.0, 1.0, 1.0, 0, 0, 0, threshold)
    dice = 2 * tp / (2 * tp + fp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return Metrics(dice, precision, recall, tp, fp, fn, threshold)
