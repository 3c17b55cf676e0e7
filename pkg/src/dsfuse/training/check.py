"""Finite-difference check of the whole two-branch graph."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..fusion import dempster_fuse
from ..losses import LossWeights, multitask_loss
from ..nn.gradcheck import GradCheckReport, check_gradients
from ..nn.model import Model
from .loop import case_loss_and_grads


def graph_grad_check(model_a: Model, model_b: Model, x_a, x_b, mask,
                     weights: LossWeights | None = None, h: float = 1e-5,
                     n_samples: int = 300, seed: int = 0,
                     fd_dtype=np.longdouble) -> GradCheckReport:
    """Compare backprop through branches, fusion and loss with central differences.

    ``n_samples`` is split between the branches in proportion to their
    sizes (parameter names are prefixed ``A/`` and ``B/``). The analytic
    gradients are taken in the models' own dtype; the differences are
    evaluated on copies cast to ``fd_dtype`` (``None`` keeps the model dtype).
    """
    _, ga, gb = case_loss_and_grads(model_a, model_b, x_a, x_b, mask, weights)
    grads = {f"A/{k}": v for k, v in ga.items() if k != "input"}
    grads.update({f"B/{k}": v for k, v in gb.items() if k != "input"})

    ref_a = model_a if fd_dtype is None else model_a.astype(fd_dtype)
    ref_b = model_b if fd_dtype is None else model_b.astype(fd_dtype)
    dt = ref_a.dtype
    xa, xb = np.asarray(x_a).astype(dt)[None, None], np.asarray(x_b).astype(dt)[None, None]
    m = np.asarray(mask).astype(dt)
    p0 = ref_a.forward(xa)[0][0, 0]
    q0 = ref_b.forward(xb)[0][0, 0]

    def total(p, q):
        fused, _ = dempster_fuse(p, q)
        return multitask_loss(p, q, fused, m, weights).loss_all

    # a perturbation touches one branch only, so the other output is reused
    losses = {
        "A": lambda: total(ref_a.forward(xa)[0][0, 0], q0),
        "B": lambda: total(p0, ref_b.forward(xb)[0][0, 0]),
    }
    sizes = {"A": model_a.num_parameters(), "B": model_b.num_parameters()}
    n_total = sizes["A"] + sizes["B"]
    shares = dict(sizes)
    if n_samples < n_total:
        shares["A"] = round(n_samples * sizes["A"] / n_total)
        shares["B"] = n_samples - shares["A"]
    reports = []
    for side, ref in (("A", ref_a), ("B", ref_b)):
        share = shares[side]
        params = {f"{side}/{k}": v for k, v in ref.params.items()}
        side_grads = {k: v for k, v in grads.items() if k.startswith(side + "/")}
        reports.append(check_gradients(losses[side], params, side_grads, h=h,
                                       n_samples=share, seed=seed))
    worst = max(reports, key=lambda r: r.max_rel_err)
    return replace(worst, n_checked=sum(r.n_checked for r in reports),
                   n_kinks=sum(r.n_kinks for r in reports))
