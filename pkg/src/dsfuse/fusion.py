"""Voxelwise evidential fusion of two probability maps.

Each voxel probability is read as a Bayesian mass on {0, 1} and the two
maps are combined with Dempster's rule. For Bayesian masses the rule has
the closed form ``p*q / (p*q + (1-p)*(1-q))``, and the conflict is
``p*(1-q) + (1-p)*q``. Probabilities are clamped to ``[EPS, 1 - EPS]``
first so that the conflict never reaches one.

The array functions (``dempster_fuse``, ``dempster_fuse_backward``) are
what the training loop calls; the ``*_volumes`` wrappers add metadata
and validation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError, UsageError
from .volume import Modality, Volume

EPS = 1e-6
STRATEGIES = ("dempster", "average", "vote", "max")


@dataclass(frozen=True)
class FusionResult:
    fused: Volume
    conflict: Volume


@dataclass(frozen=True)
class FusionGradients:
    dA: np.ndarray
    dB: np.ndarray


def _check_pair(p: np.ndarray, q: np.ndarray) -> None:
    if p.shape != q.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {q.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise DomainError("non-finite probability in fusion input")


def _result_dtype(*arrays) -> np.dtype:
    dt = np.result_type(*arrays)
    return dt if dt.kind == "f" and dt.itemsize >= 4 else np.dtype(np.float64)


def _work_dtype(*arrays) -> np.dtype:
    # at least float64; wider types (long double) are kept for reference checks
    return np.promote_types(_result_dtype(*arrays), np.float64)


def dempster_fuse(p, q, eps: float = EPS) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(fused, conflict)`` arrays for probability arrays ``p``, ``q``."""
    p, q = np.asarray(p), np.asarray(q)
    _check_pair(p, q)
    dt, wt = _result_dtype(p, q), _work_dtype(p, q)
    pc = np.clip(p.astype(wt), eps, 1.0 - eps)
    qc = np.clip(q.astype(wt), eps, 1.0 - eps)
    agree1 = pc * qc
    agree0 = (1.0 - pc) * (1.0 - qc)
    fused = agree1 / (agree1 + agree0)
    conflict = pc * (1.0 - qc) + (1.0 - pc) * qc
    return fused.astype(dt), conflict.astype(dt)


def dempster_fuse_backward(p, q, upstream, eps: float = EPS) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product of :func:`dempster_fuse` (fused output only).

    d fused / dp = q(1-q)/D**2 and d fused / dq = p(1-p)/D**2 with
    ``D = pq + (1-p)(1-q)``, taken at the clamped inputs. Voxels the
    forward pass clamped receive zero gradient, as the clamp is flat there.
    """
    p, q, upstream = np.asarray(p), np.asarray(q), np.asarray(upstream)
    _check_pair(p, q)
    if upstream.shape != p.shape:
        raise ShapeError(f"upstream shape {upstream.shape} does not match inputs {p.shape}")
    dt, wt = _result_dtype(p, q, upstream), _work_dtype(p, q, upstream)
    p64, q64 = p.astype(wt), q.astype(wt)
    pc = np.clip(p64, eps, 1.0 - eps)
    qc = np.clip(q64, eps, 1.0 - eps)
    denom = pc * qc + (1.0 - pc) * (1.0 - qc)
    denom2 = denom * denom
    g = upstream.astype(wt)
    dp = g * (qc * (1.0 - qc) / denom2)
    dq = g * (pc * (1.0 - pc) / denom2)
    dp[(p64 < eps) | (p64 > 1.0 - eps)] = 0.0
    dq[(q64 < eps) | (q64 > 1.0 - eps)] = 0.0
    return dp.astype(dt), dq.astype(dt)


def baseline_combine(strategy: str, p, q) -> np.ndarray:
    p, q = np.asarray(p), np.asarray(q)
    _check_pair(p, q)
    if strategy == "average":
        return 0.5 * (p + q)
    if strategy == "max":
        return np.maximum(p, q)
    if strategy == "vote":
        # two voters: agreement decides, a split vote stays undecided
        out = np.full(np.broadcast_shapes(p.shape, q.shape), 0.5, dtype=_result_dtype(p, q))
        out[(p > 0.5) & (q > 0.5)] = 1.0
        out[(p <= 0.5) & (q <= 0.5)] = 0.0
        return out
    raise UsageError(f"unknown baseline strategy {strategy!r}")


def _same_grid(a: Volume, b: Volume) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"volume dims differ: {a.dims} vs {b.dims}")


def fuse_volumes(segA: Volume, segB: Volume) -> FusionResult:
    _same_grid(segA, segB)
    fused, conflict = dempster_fuse(segA.data, segB.data)
    return FusionResult(
        fused=segA.with_data(fused, Modality.PROB),
        conflict=segA.with_data(conflict, Modality.CONFLICT),
    )


def fuse_backward(segA: Volume, segB: Volume, upstream) -> FusionGradients:
    _same_grid(segA, segB)
    up = upstream.data if isinstance(upstream, Volume) else upstream
    dA, dB = dempster_fuse_backward(segA.data, segB.data, up)
    return FusionGradients(dA, dB)


def baseline_fuse(strategy: str, segA: Volume, segB: Volume) -> Volume:
    _same_grid(segA, segB)
    return segA.with_data(baseline_combine(strategy, segA.data, segB.data), Modality.PROB)


def binarize_array(prob, threshold: float = 0.5) -> np.ndarray:
    if not (0.0 < threshold < 1.0):
        raise DomainError(f"threshold {threshold!r} outside (0, 1)")
    prob = np.asarray(prob)
    return (prob > threshold).astype(_result_dtype(prob))


def binarize(seg: Volume, threshold: float = 0.5) -> Volume:
    """Foreground where probability is strictly above ``threshold``."""
    return seg.with_data(binarize_array(seg.data, threshold), Modality.MASK)
