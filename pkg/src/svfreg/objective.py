"""Loss terms and the end-to-end training objective.

The similarity term is a (optionally spatially weighted) mean-squared
error; the regularizer is the bending energy of the displacement field,
i.e. the mean squared Frobenius norm of its spatial Hessian, with mixed
second derivatives double-counted. Second derivatives are realized as
per-axis 1D stencil matrices (3-point second difference, shifted at the
boundary so affine fields score exactly zero; mixed terms compose the
first-difference operator of ``central_gradient``), which makes the
returned gradients exact adjoints by construction.

``total_loss`` chains predictor -> integration -> warp -> losses and
returns both the loss breakdown and the parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .diffeo import (DisplacementField, integrate_svf, integrate_svf_backward,
                     warp, warp_backward)
from .grid import ScalarVolume, VectorField
from .predictor import DropoutMask, PredictorParams
from .predictor import backward as predictor_backward
from .predictor import forward as predictor_forward


@dataclass
class LossBreakdown:
    """One loss evaluation: similarity, regularizer, and their weighted sum."""

    mse: float
    bending: float
    total: float
    reg_weight: float
    weighted: bool


def mse_loss(fixed: ScalarVolume, deformed: ScalarVolume,
             weight: ScalarVolume | None = None):
    """Voxel-mean (weighted) squared error and its gradient w.r.t. the
    deformed image: value = mean(w * (F - D)^2), grad = -(2/N) w (F - D).
    ``weight=None`` is the uniform, unweighted loss."""
    if fixed.dims != deformed.dims:
        raise ValueError(f"dims mismatch: {fixed.dims} vs {deformed.dims}")
    n = fixed.data.size
    diff = fixed.data - deformed.data
    if weight is None:
        w = 1.0
    else:
        if weight.dims != fixed.dims:
            raise ValueError(f"weight dims {weight.dims} do not match {fixed.dims}")
        if weight.data.min() < 0:
            raise ValueError("weights must be non-negative")
        w = weight.data
    value = float(np.sum(w * diff * diff) / n)
    grad = -(2.0 / n) * w * diff
    return value, grad


@lru_cache(maxsize=None)
def _second_diff_matrix(n: int) -> np.ndarray:
    """1D 3-point second difference; the stencil is shifted inward at the
    two boundary rows, so it annihilates affine sequences everywhere."""
    if n < 3:
        raise ValueError(f"second differences need >= 3 samples, got {n}")
    m = np.zeros((n, n))
    for i in range(n):
        j = min(max(i, 1), n - 2)
        m[i, j - 1] += 1.0
        m[i, j] += -2.0
        m[i, j + 1] += 1.0
    return m


@lru_cache(maxsize=None)
def _first_diff_matrix(n: int) -> np.ndarray:
    """1D first difference matching ``central_gradient``: central interior,
    one-sided at the boundary."""
    if n < 2:
        raise ValueError(f"first differences need >= 2 samples, got {n}")
    m = np.zeros((n, n))
    m[0, 0], m[0, 1] = -1.0, 1.0
    m[n - 1, n - 2], m[n - 1, n - 1] = -1.0, 1.0
    for i in range(1, n - 1):
        m[i, i - 1], m[i, i + 1] = -0.5, 0.5
    return m


def _apply_axis(mat: np.ndarray, arr: np.ndarray, axis: int) -> np.ndarray:
    out = np.tensordot(mat, arr, axes=(1, axis))
    return np.moveaxis(out, 0, axis)


def bending_energy(u):
    """Mean squared Hessian norm of a displacement (or velocity) field and
    its exact gradient.

    value = (1/N) sum over voxels and components of
            uxx^2 + uyy^2 + uzz^2 + 2 uxy^2 + 2 uxz^2 + 2 uyz^2.

    Affine fields (including translations) score exactly zero.
    """
    data = u.data if isinstance(u, (DisplacementField, VectorField)) else np.asarray(u)
    dims = data.shape[1:]
    if min(dims) < 3:
        raise ValueError(f"bending energy needs dims >= 3, got {dims}")
    n = data[0].size
    d2 = [_second_diff_matrix(dims[a]) for a in range(3)]
    d1 = [_first_diff_matrix(dims[a]) for a in range(3)]

    total = 0.0
    grad = np.zeros_like(data)
    for c in range(3):
        uc = data[c]
        for axis in range(3):
            pure = _apply_axis(d2[axis], uc, axis)
            total += float(np.sum(pure * pure))
            grad[c] += 2.0 * _apply_axis(d2[axis].T, pure, axis)
        for a1, a2 in ((0, 1), (0, 2), (1, 2)):
            mixed = _apply_axis(d1[a2], _apply_axis(d1[a1], uc, a1), a2)
            total += 2.0 * float(np.sum(mixed * mixed))
            grad[c] += 4.0 * _apply_axis(d1[a1].T, _apply_axis(d1[a2].T, mixed, a2), a1)
    return total / n, grad / n


def total_loss(fixed: ScalarVolume, moving: ScalarVolume, params: PredictorParams,
               mask: DropoutMask | None = None, reg_weight: float = 0.2,
               weight: ScalarVolume | None = None, direction: str = "forward",
               squaring_steps: int = 10, regularize: str = "displacement"):
    """Full objective for one image pair plus parameter gradients.

    The network always sees (fixed, moving) in that order. In the forward
    direction its field is integrated as-is and the moving image is warped
    toward the fixed one; in the inverse direction the field is negated
    before integration and the fixed image is warped toward the moving one.
    The regularizer acts on the displacement actually used for the warp
    (or, with ``regularize='velocity'``, on the signed velocity field).

    Returns (LossBreakdown, gradient blocks keyed like the parameters).
    """
    if direction not in ("forward", "inverse"):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    if regularize not in ("displacement", "velocity"):
        raise ValueError(f"regularize must be 'displacement' or 'velocity', "
                         f"got {regularize!r}")
    if reg_weight < 0:
        raise ValueError(f"regularization weight must be >= 0, got {reg_weight}")

    v, net_tape = predictor_forward(params, fixed, moving, mask)
    sign = 1.0 if direction == "forward" else -1.0
    v_used = VectorField(sign * v.data, v.spacing)
    u, ss_tape = integrate_svf(v_used, squaring_steps)

    source, target = (moving, fixed) if direction == "forward" else (fixed, moving)
    deformed = warp(source, u)
    mse_val, d_deformed = mse_loss(target, deformed, weight)

    du = warp_backward(source, u, d_deformed)
    if regularize == "displacement":
        bend_val, d_bend = bending_energy(u)
        du = du + reg_weight * d_bend
        dv = integrate_svf_backward(ss_tape, du)
    else:
        bend_val, d_bend = bending_energy(v_used)
        dv = integrate_svf_backward(ss_tape, du) + reg_weight * d_bend

    grads = predictor_backward(params, net_tape, sign * dv)
    breakdown = LossBreakdown(mse=mse_val, bending=bend_val,
                              total=mse_val + reg_weight * bend_val,
                              reg_weight=reg_weight, weighted=weight is not None)
    return breakdown, grads
