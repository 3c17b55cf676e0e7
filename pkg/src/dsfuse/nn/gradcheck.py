"""Central finite-difference checks of analytic parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError
from .model import Model

# below this magnitude both gradients count as zero when forming ratios
REL_FLOOR = 1e-8
# one-sided slopes disagreeing by more than this fraction flag a ReLU/max-pool
# switch inside [x - h, x + h], where central differences are meaningless
KINK_TOL = 1e-3


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float
    n_kinks: int = 0


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(loss, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                    h: float = 1e-5, n_samples: int = 200, seed: int = 0) -> GradCheckReport:
    """Compare ``grads`` with central differences of ``loss()``.

    ``loss`` is re-evaluated after perturbing entries of ``params`` in
    place, so it must read the live arrays. A random sample of
    ``n_samples`` entries is drawn, spread across tensors in proportion
    to their size; every entry is checked if there are fewer.

    Entries whose forward and backward one-sided slopes disagree sit on a
    kink of the piecewise-linear network; they are counted in
    ``n_kinks`` and left out of ``max_rel_err``.
    """
    if not h > 0:
        raise DomainError(f"finite-difference step must be positive, got {h!r}")
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_ids = np.arange(total) if total <= n_samples else np.sort(
        rng.choice(total, size=n_samples, replace=False))
    bounds = np.cumsum(sizes)

    base = loss()
    worst = (0.0, "", (), 0.0, 0.0)
    kinks = 0
    for fid in flat_ids:
        t = int(np.searchsorted(bounds, fid, side="right"))
        name = names[t]
        local = int(fid - (bounds[t] - sizes[t]))
        idx = np.unravel_index(local, params[name].shape)
        arr = params[name]
        orig = arr[idx]
        arr[idx] = orig + h
        up = loss()
        arr[idx] = orig - h
        down = loss()
        arr[idx] = orig
        numeric = float((up - down) / (2 * h))
        right, left = (up - base) / h, (base - down) / h
        spread = abs(right - left)
        if spread > KINK_TOL * max(abs(right), abs(left), REL_FLOOR) and spread > 1e3 * REL_FLOOR:
            kinks += 1
            continue
        analytic = float(grads[name][idx])
        err = relative_error(analytic, numeric)
        if err > worst[0] or not worst[1]:
            worst = (err, name, tuple(int(i) for i in idx), analytic, numeric)
    return GradCheckReport(worst[0], len(flat_ids), worst[1], worst[2], worst[3], worst[4], kinks)


def grad_check(model: Model, x, loss_fn, h: float = 1e-5, n_samples: int = 200,
               seed: int = 0, backward=None, fd_dtype=None) -> GradCheckReport:
    """Check one branch: ``loss_fn(prob) -> (loss, dloss/dprob)``.

    ``backward`` overrides the model's backward pass, which lets tests
    confirm that the checker notices a broken gradient. With ``fd_dtype``
    (e.g. ``np.longdouble``) the finite differences run on a copy of the
    model in that type while the analytic gradient keeps the model dtype;
    this lowers the roundoff floor of the reference.
    """
    if not h > 0:
        raise DomainError(f"finite-difference step must be positive, got {h!r}")
    run_backward = backward or (lambda m, c, g: m.backward(c, g))
    prob, cache = model.forward(x)
    _, dprob = loss_fn(prob)
    grads = run_backward(model, cache, dprob)

    ref = model if fd_dtype is None else model.astype(fd_dtype)
    x_ref = np.asarray(x).astype(ref.dtype)

    def loss():
        return loss_fn(ref.forward(x_ref)[0])[0]

    return check_gradients(loss, ref.params, grads, h=h, n_samples=n_samples, seed=seed)
