"""Losses and gradient-based fitting of primitives to a target occupancy grid.

The objective is lovasz + lambda * bce between the splatted scene and a
target label grid. All primitive parameters are optimized jointly through an
unconstrained flat vector: scales go through a softplus, opacity through a
sigmoid, shape exponents through a range-scaled sigmoid, warp weights through
tanh, and the quaternion is renormalized on use, so every constraint holds
after every step. Degrees of freedom come from the voxel-interception count,
which is piecewise constant, so they are frozen during differentiation and
refreshed between steps, as is the support-box truncation pattern.

Analytic gradients are produced by reverse-mode differentiation of a mirror
of the forward pass (torch, float64); the finite-difference mode re-evaluates
the independent numpy forward path and is the oracle the analytic mode is
checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .primitives import EPS_RANGE, Primitive, PrimitiveKind
from .geometry import Quaternion
from .scene import (
    GridSpec,
    Scene,
    SemanticGrid,
    compute_support_slices,
    refresh_dofs,
    splat,
)

PROB_CLIP = 1e-7

# Margin used when encoding boundary values of open-interval parameters.
_ENCODE_MARGIN = 1e-7


class GradientError(RuntimeError):
    """A gradient component came out non-finite."""


class FitDivergenceError(RuntimeError):
    """The optimization loss ran away from its initial value."""


@dataclass
class FitOptions:
    iterations: int = 100
    step_size: float = 1e-2
    lam: float = 10.0
    threshold: float = 1e-3
    gradient_mode: str = "analytic"  # or "finite_difference"
    fd_epsilon: float = 1e-4
    rng_seed: int = 0  # reserved for stochastic variants; the loop is deterministic
    couple_opacity: bool = True
    lovasz_include_empty: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size <= 0.0:
            raise ValueError("step_size must be positive")
        if self.lam < 0.0:
            raise ValueError("lam must be non-negative")
        if self.gradient_mode not in ("analytic", "finite_difference"):
            raise ValueError(f"unknown gradient_mode {self.gradient_mode!r}")


# ---------------------------------------------------------------------------
# Losses.
# ---------------------------------------------------------------------------


def _check_pair(pred: SemanticGrid, target: SemanticGrid):
    if not pred.is_probability:
        raise ValueError("prediction must be in probability form")
    if target.labels is None:
        raise ValueError("target must be in label form")
    if pred.spec.dims != target.spec.dims or pred.num_classes != target.num_classes:
        raise ValueError("prediction and target grids are incompatible")


def bce_loss(pred: SemanticGrid, target: SemanticGrid) -> float:
    """Mean binary cross-entropy over voxels and the C+1 classes.

    Targets are one-hot labels; probabilities are clipped away from 0 and 1.
    """
    _check_pair(pred, target)
    c1 = pred.num_classes + 1
    p = np.clip(pred.probs.reshape(-1, c1), PROB_CLIP, 1.0 - PROB_CLIP)
    y = np.eye(c1)[target.labels.ravel().astype(int)]
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def _lovasz_grad_vec(gt_sorted: np.ndarray) -> np.ndarray:
    """Jaccard-extension weight vector for errors sorted in descending order."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax_loss(
    pred: SemanticGrid, target: SemanticGrid, include_empty: bool = True
) -> float:
    """Lovasz extension of the Jaccard loss, averaged over present classes.

    Per class, absolute errors between the one-hot target and the predicted
    probability are sorted in descending order and weighted by the Jaccard
    gradient. Only classes present in the target participate; the empty class
    takes part by default. On hard 0/1 predictions this equals one minus the
    Jaccard index of the predicted mask.
    """
    _check_pair(pred, target)
    c1 = pred.num_classes + 1
    probs = pred.probs.reshape(-1, c1)
    labels = target.labels.ravel().astype(int)
    present = np.unique(labels)
    if not include_empty:
        present = present[present != 0]
    if present.size == 0:
        return 0.0
    losses = []
    for cls in present:
        fg = (labels == cls).astype(np.float64)
        errors = np.abs(fg - probs[:, cls])
        order = np.argsort(-errors, kind="stable")
        losses.append(float(errors[order] @ _lovasz_grad_vec(fg[order])))
    return float(np.mean(losses))


def total_loss(pred: SemanticGrid, target: SemanticGrid, lam: float = 10.0,
               include_empty: bool = True) -> float:
    """lovasz + lam * bce; lam = 10 is the standard weighting."""
    return lovasz_softmax_loss(pred, target, include_empty) + lam * bce_loss(pred, target)


# ---------------------------------------------------------------------------
# Unconstrained parameter vector.
# ---------------------------------------------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


def _inv_softplus(y):
    # log(expm1(y)), stable for both small and large y
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def _field_layout(kind: PrimitiveKind, num_classes: int):
    fields = [("m", 3), ("s", 3), ("rot", 4), ("opacity", 1), ("semantics", num_classes)]
    if kind is not PrimitiveKind.TP:
        fields.append(("eps", 2))
    if kind is PrimitiveKind.TSQIW:
        fields.append(("warp_weights", 24))
    return fields


def block_size(kind: PrimitiveKind, num_classes: int) -> int:
    return sum(n for _, n in _field_layout(kind, num_classes))


@dataclass
class ParamVector:
    """Flat unconstrained view of all optimizable primitive parameters.

    Layout per primitive: center(3), scales(3), quaternion(4), opacity(1),
    semantics(C), then shape exponents(2) and warp weights(24) where the
    family has them. Degrees of freedom ride along as constants; they are not
    optimized. Encoding clips open-interval parameters slightly inside their
    range so the round trip through the squashing functions is well defined.
    """

    values: np.ndarray
    kinds: tuple[PrimitiveKind, ...]
    num_classes: int
    nus: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.nus is None:
            self.nus = np.ones(len(self.kinds))
        self.nus = np.asarray(self.nus, dtype=np.float64)
        expected = sum(block_size(k, self.num_classes) for k in self.kinds)
        if self.values.size != expected:
            raise ValueError(f"expected {expected} values, got {self.values.size}")

    def offsets(self) -> list[int]:
        out = [0]
        for k in self.kinds:
            out.append(out[-1] + block_size(k, self.num_classes))
        return out

    def field_slices(self, i: int) -> dict[str, slice]:
        start = self.offsets()[i]
        out = {}
        for name, n in _field_layout(self.kinds[i], self.num_classes):
            out[name] = slice(start, start + n)
            start += n
        return out

    def param_name(self, idx: int) -> str:
        offs = self.offsets()
        for i in range(len(self.kinds)):
            if offs[i] <= idx < offs[i + 1]:
                for name, sl in self.field_slices(i).items():
                    if sl.start <= idx < sl.stop:
                        return f"primitive[{i}].{name}[{idx - sl.start}]"
        raise IndexError(idx)

    @classmethod
    def from_scene(cls, scene: Scene) -> "ParamVector":
        lo, hi = EPS_RANGE
        chunks = []
        for p in scene.primitives:
            block = [
                p.m,
                _inv_softplus(p.s),
                p.rot.normalized().as_array(),
                [logit(np.clip(p.opacity, _ENCODE_MARGIN, 1.0 - _ENCODE_MARGIN))],
                p.semantics,
            ]
            if p.kind is not PrimitiveKind.TP:
                frac = (np.array([p.eps1, p.eps2]) - lo) / (hi - lo)
                block.append(logit(np.clip(frac, _ENCODE_MARGIN, 1.0 - _ENCODE_MARGIN)))
            if p.kind is PrimitiveKind.TSQIW:
                w = np.clip(p.warp_weights, -1.0 + _ENCODE_MARGIN, 1.0 - _ENCODE_MARGIN)
                block.append(np.arctanh(w))
            chunks.append(np.concatenate([np.asarray(b, dtype=np.float64).ravel() for b in block]))
        return cls(
            values=np.concatenate(chunks) if chunks else np.zeros(0),
            kinds=tuple(p.kind for p in scene.primitives),
            num_classes=scene.num_classes,
            nus=np.array([p.nu for p in scene.primitives]),
        )

    def to_scene(self) -> Scene:
        lo, hi = EPS_RANGE
        prims = []
        for i, kind in enumerate(self.kinds):
            sl = self.field_slices(i)
            v = self.values
            eps1, eps2 = 1.0, 1.0
            if kind is not PrimitiveKind.TP:
                eps1, eps2 = lo + (hi - lo) * expit(v[sl["eps"]])
            warp = np.zeros(24)
            if kind is PrimitiveKind.TSQIW:
                warp = np.tanh(v[sl["warp_weights"]])
            q = v[sl["rot"]]
            prims.append(
                Primitive(
                    kind=kind,
                    m=v[sl["m"]].copy(),
                    s=_softplus(v[sl["s"]]),
                    rot=Quaternion(*q),
                    opacity=float(expit(v[sl["opacity"]][0])),
                    semantics=v[sl["semantics"]].copy(),
                    eps1=float(eps1),
                    eps2=float(eps2),
                    warp_weights=warp,
                    nu=float(self.nus[i]),
                )
            )
        return Scene(prims, self.num_classes)

    def renormalize_quaternions(self):
        """Rescale raw quaternion blocks to unit norm (same rotation)."""
        for i in range(len(self.kinds)):
            sl = self.field_slices(i)["rot"]
            q = self.values[sl]
            n = np.linalg.norm(q)
            if n > 1e-12:
                self.values[sl] = q / n


# ---------------------------------------------------------------------------
# Gradients.
# ---------------------------------------------------------------------------


def _forward_loss(pv: ParamVector, target: SemanticGrid, spec: GridSpec,
                  boxes, opts: FitOptions):
    grid = splat(
        pv.to_scene(),
        spec,
        opts.threshold,
        couple_opacity=opts.couple_opacity,
        nus=pv.nus,
        boxes=boxes,
    )
    lv = lovasz_softmax_loss(grid, target, opts.lovasz_include_empty)
    bc = bce_loss(grid, target)
    return lv + opts.lam * bc, lv, bc


def _fd_gradient(pv: ParamVector, target: SemanticGrid, spec: GridSpec,
                 boxes, opts: FitOptions) -> np.ndarray:
    grad = np.zeros_like(pv.values)
    eps = opts.fd_epsilon
    work = ParamVector(pv.values.copy(), pv.kinds, pv.num_classes, pv.nus)
    for j in range(pv.values.size):
        base = pv.values[j]
        work.values[j] = base + eps
        f_plus, _, _ = _forward_loss(work, target, spec, boxes, opts)
        work.values[j] = base - eps
        f_minus, _, _ = _forward_loss(work, target, spec, boxes, opts)
        work.values[j] = base
        grad[j] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def _loss_and_grad(pv: ParamVector, target: SemanticGrid, spec: GridSpec,
                   boxes, opts: FitOptions):
    if opts.gradient_mode == "analytic":
        from ._autodiff import torch_loss_and_grad

        total, lv, bc, grad = torch_loss_and_grad(pv, target, spec, boxes, opts)
    else:
        total, lv, bc = _forward_loss(pv, target, spec, boxes, opts)
        grad = _fd_gradient(pv, target, spec, boxes, opts)
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise GradientError(
            f"non-finite gradient for {pv.param_name(int(bad[0]))}"
        )
    return total, lv, bc, grad


def loss_gradient(scene: Scene, target: SemanticGrid, spec: GridSpec,
                  opts: FitOptions) -> ParamVector:
    """Gradient of the fitting loss with respect to the unconstrained vector.

    Degrees of freedom and support boxes are frozen at the input scene, so
    finite differences of the same truncated objective agree with the
    analytic result. Returned as a ParamVector sharing the input layout.
    """
    if len(scene) == 0:
        raise ValueError("loss_gradient requires a non-empty scene")
    pv = ParamVector.from_scene(scene)
    boxes = compute_support_slices(scene, spec, opts.threshold)
    _, _, _, grad = _loss_and_grad(pv, target, spec, boxes, opts)
    return ParamVector(grad, pv.kinds, pv.num_classes, pv.nus)


# ---------------------------------------------------------------------------
# Optimization loop.
# ---------------------------------------------------------------------------


@dataclass
class FitTraceRow:
    iteration: int
    lovasz: float
    bce: float
    total: float


def fit(init: Scene, target: SemanticGrid, spec: GridSpec,
        opts: FitOptions) -> tuple[Scene, list[FitTraceRow]]:
    """Adaptive-moment gradient descent of all primitive parameters.

    Every iteration refreshes the degrees of freedom and support boxes at the
    current shapes, then takes one bias-corrected Adam step at the configured
    step size. Returns the best-loss scene seen and the per-iteration loss
    trace. Aborts when the loss exceeds ten times its initial value for
    twenty consecutive iterations.
    """
    if len(init) == 0:
        raise ValueError("fit requires a non-empty initial scene")
    if target.labels is None:
        target = target.to_labels()

    pv = ParamVector.from_scene(refresh_dofs(init, spec))
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    mom = np.zeros_like(pv.values)
    var = np.zeros_like(pv.values)

    trace: list[FitTraceRow] = []
    best_loss = math.inf
    best_values = pv.values.copy()
    best_nus = pv.nus.copy()
    initial_loss = None
    runaway = 0

    for it in range(opts.iterations):
        scene_it = refresh_dofs(pv.to_scene(), spec)
        pv.nus = np.array([p.nu for p in scene_it.primitives])
        boxes = compute_support_slices(scene_it, spec, opts.threshold)
        total, lv, bc, grad = _loss_and_grad(pv, target, spec, boxes, opts)
        trace.append(FitTraceRow(it, lv, bc, total))

        if total < best_loss:
            best_loss = total
            best_values = pv.values.copy()
            best_nus = pv.nus.copy()

        if initial_loss is None:
            initial_loss = total
        if total > 10.0 * max(initial_loss, 1e-6):
            runaway += 1
            if runaway >= 20:
                raise FitDivergenceError(
                    f"loss {total:.6g} exceeded 10x initial {initial_loss:.6g} "
                    f"for 20 consecutive iterations (iteration {it})"
                )
        else:
            runaway = 0

        t = it + 1
        mom = beta1 * mom + (1.0 - beta1) * grad
        var = beta2 * var + (1.0 - beta2) * grad * grad
        m_hat = mom / (1.0 - beta1**t)
        v_hat = var / (1.0 - beta2**t)
        pv.values = pv.values - opts.step_size * m_hat / (np.sqrt(v_hat) + adam_eps)
        pv.renormalize_quaternions()

    best = ParamVector(best_values, pv.kinds, pv.num_classes, best_nus)
    return best.to_scene(), trace
