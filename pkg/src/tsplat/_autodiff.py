"""Reverse-mode gradient of the fitting objective (torch mirror).

Replicates the numpy forward pass — kernel evaluation, occupancy/semantics
composition, BCE and Lovasz losses — in float64 torch so autograd supplies
the gradient with respect to the unconstrained parameter vector. Degrees of
freedom and support boxes arrive as constants; truncation is a fixed 0/1
mask, so the boundary carries no gradient. The finite-difference oracle in
the fitting module runs against the numpy path, keeping the two routes
independent.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .primitives import _BASIS_ROWS, EPS_RANGE, KERNEL_FLOOR, PrimitiveKind
from .scene import DENSITY_FLOOR, GridSpec, SemanticGrid

_TINY = 1e-30


def _grid_centers(spec: GridSpec) -> torch.Tensor:
    axes = [torch.as_tensor(spec.axis_centers(a), dtype=torch.float64) for a in range(3)]
    gx, gy, gz = torch.meshgrid(*axes, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1), gz.reshape(-1)], dim=1)


def _box_masks(boxes, spec: GridSpec) -> list[torch.Tensor]:
    masks = []
    for box in boxes:
        m = np.zeros(spec.dims, dtype=np.float64)
        if box is not None:
            m[box] = 1.0
        masks.append(torch.as_tensor(m.reshape(-1)))
    return masks


def _rotation_from_quat(q: torch.Tensor) -> torch.Tensor:
    q = q / torch.linalg.norm(q)
    w, x, y, z = q[0], q[1], q[2], q[3]
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)])
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)])
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)])
    return torch.stack([row0, row1, row2])


def _softplus(x: torch.Tensor) -> torch.Tensor:
    return torch.logaddexp(torch.zeros_like(x), x)


def _sq_implicit(xl: torch.Tensor, s: torch.Tensor, eps1, eps2) -> torch.Tensor:
    # Bases are clamped away from zero so exponent gradients stay finite.
    n = (xl / s).abs().clamp_min(_TINY)
    a = n[:, 0] ** (2.0 / eps2) + n[:, 1] ** (2.0 / eps2)
    return a.clamp_min(_TINY) ** (eps2 / eps1) + n[:, 2] ** (2.0 / eps1)


def _t_profile(d: torch.Tensor, nu: float) -> torch.Tensor:
    k = (1.0 + d / nu) ** (-(nu + 3.0) / 2.0)
    return torch.where(k < KERNEL_FLOOR, torch.zeros_like(k), k)


def _lovasz(probs: torch.Tensor, labels: np.ndarray, include_empty: bool) -> torch.Tensor:
    present = np.unique(labels)
    if not include_empty:
        present = present[present != 0]
    if present.size == 0:
        return torch.zeros((), dtype=torch.float64)
    losses = []
    for cls in present:
        fg = torch.as_tensor((labels == cls).astype(np.float64))
        errors = (fg - probs[:, int(cls)]).abs()
        errors_sorted, perm = torch.sort(errors, descending=True)
        gt_sorted = fg[perm]
        gts = gt_sorted.sum()
        intersection = gts - gt_sorted.cumsum(0)
        union = gts + (1.0 - gt_sorted).cumsum(0)
        jaccard = 1.0 - intersection / union
        jaccard = torch.cat([jaccard[:1], jaccard[1:] - jaccard[:-1]])
        losses.append(errors_sorted @ jaccard.detach())
    return torch.stack(losses).mean()


def torch_loss_and_grad(pv, target: SemanticGrid, spec: GridSpec, boxes, opts):
    """(total, lovasz, bce, grad) of the truncated objective at pv."""
    from .fitting import PROB_CLIP

    lo, hi = EPS_RANGE
    c = pv.num_classes
    raw = torch.tensor(pv.values, dtype=torch.float64, requires_grad=True)
    pts = _grid_centers(spec)
    masks = _box_masks(boxes, spec)
    n_vox = pts.shape[0]

    opacities = []
    for i in range(len(pv.kinds)):
        sl = pv.field_slices(i)["opacity"]
        opacities.append(torch.sigmoid(raw[sl.start]))
    opacity_sum = torch.stack(opacities).sum()

    log_surv = torch.zeros(n_vox, dtype=torch.float64)
    num = torch.zeros(n_vox, c, dtype=torch.float64)
    den = torch.zeros(n_vox, dtype=torch.float64)

    for i, kind in enumerate(pv.kinds):
        sl = pv.field_slices(i)
        nu = float(pv.nus[i])
        m = raw[sl["m"]]
        s = _softplus(raw[sl["s"]])
        rot = _rotation_from_quat(raw[sl["rot"]])
        sem = torch.softmax(raw[sl["semantics"]], dim=0)
        xl = (pts - m) @ rot

        if kind is PrimitiveKind.TP:
            d = ((xl / s) ** 2).sum(dim=1)
            log_const = (
                math.lgamma((nu + 3.0) / 2.0)
                - math.lgamma(nu / 2.0)
                - 1.5 * math.log(nu * math.pi)
            )
            norm_const = math.exp(log_const) / s.prod()
        else:
            eps1 = lo + (hi - lo) * torch.sigmoid(raw[sl["eps"]][0])
            eps2 = lo + (hi - lo) * torch.sigmoid(raw[sl["eps"]][1])
            if kind is PrimitiveKind.TSQIW:
                weights = torch.tanh(raw[sl["warp_weights"]])
                u, v, w = xl[:, 0] / s[0], xl[:, 1] / s[1], xl[:, 2] / s[2]
                du = torch.zeros_like(u)
                dv = torch.zeros_like(u)
                dw = torch.zeros_like(u)
                for wi, row in zip(weights, _BASIS_ROWS):
                    bu, bv, bw = row(u, v, w)
                    du = du + wi * bu
                    dv = dv + wi * bv
                    dw = dw + wi * bw
                xl = xl - torch.stack([du, dv, dw], dim=1)
            d = _sq_implicit(xl, s, eps1, eps2)
            norm_const = torch.ones((), dtype=torch.float64)

        k = _t_profile(d, nu) * masks[i]
        alpha_i = opacities[i] * k if opts.couple_opacity else k
        log_surv = log_surv + torch.log1p(-alpha_i)
        prior = opacities[i] / opacity_sum
        dens = prior * norm_const * k
        den = den + dens
        num = num + dens[:, None] * sem[None, :]

    alpha = 1.0 - torch.exp(log_surv)
    den_ok = den > DENSITY_FLOOR
    e = torch.where(
        den_ok[:, None],
        num / den.clamp_min(DENSITY_FLOOR)[:, None],
        torch.full_like(num, 1.0 / c),
    )
    probs = torch.cat([(1.0 - alpha)[:, None], alpha[:, None] * e], dim=1)

    labels = target.labels.ravel().astype(int)
    y = torch.as_tensor(np.eye(c + 1)[labels])
    p_clip = probs.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
    bce = (-(y * torch.log(p_clip) + (1.0 - y) * torch.log(1.0 - p_clip))).mean()
    lov = _lovasz(probs, labels, opts.lovasz_include_empty)
    total = lov + opts.lam * bce

    total.backward()
    grad = raw.grad.detach().numpy().copy()
    return float(total.item()), float(lov.item()), float(bce.item()), grad
