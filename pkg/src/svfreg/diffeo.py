"""Diffeomorphic transform machinery.

A stationary velocity field v is integrated over unit time by scaling and
squaring: the field is divided by 2^K and the resulting small displacement
is composed with itself K times. Composition and warping use clamped
trilinear sampling throughout, and the integration records a tape of the K
intermediate displacement fields so the reverse-mode gradient can be
propagated through every squaring exactly.

Inverse transforms come from integrating the negated velocity field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grid import Dims, ScalarVolume, VectorField, identity_coords


@dataclass
class DisplacementField:
    """A displacement u(x) = phi(x) - x, with provenance bookkeeping."""

    field: VectorField
    provenance: str = "forward"  # 'forward' | 'inverse'
    squaring_steps: int = 0

    @property
    def dims(self) -> Dims:
        return self.field.dims

    @property
    def data(self) -> np.ndarray:
        return self.field.data


@dataclass
class IntegrationTape:
    """The K intermediate displacement fields of a scaling-and-squaring run,
    in forward order (stages[k] is the input to squaring k)."""

    stages: list
    dims: Dims

    def __len__(self) -> int:
        return len(self.stages)


def _compose_arrays(outer: np.ndarray, inner: np.ndarray, base: np.ndarray) -> np.ndarray:
    """r(x) = outer(x + inner(x)) + inner(x) on raw (3, nx, ny, nz) arrays."""
    pts = base + inner.reshape(3, -1)
    sampled = _kernels.gather(outer, pts[0], pts[1], pts[2])
    return sampled.reshape(outer.shape) + inner


def compose(u_outer: DisplacementField, u_inner: DisplacementField) -> DisplacementField:
    """Composition phi_outer o phi_inner expressed on displacements:
    r(x) = u_outer(x + u_inner(x)) + u_inner(x)."""
    if u_outer.dims != u_inner.dims:
        raise ValueError(f"dims mismatch: {u_outer.dims} vs {u_inner.dims}")
    base = identity_coords(u_inner.dims)
    data = _compose_arrays(u_outer.data, u_inner.data, base)
    return DisplacementField(VectorField(data, u_outer.field.spacing),
                             u_outer.provenance, u_outer.squaring_steps)


def integrate_svf(v: VectorField, squaring_steps: int):
    """Integrate a stationary velocity field over unit time.

    Scales the field by 1/2^K, then squares (self-composes) K times.
    Returns the final displacement together with the tape of the K
    intermediate fields needed for the backward pass. K = 0 returns the
    field itself as a displacement.
    """
    k = int(squaring_steps)
    if k < 0:
        raise ValueError(f"squaring steps must be >= 0, got {squaring_steps}")
    u = v.data / float(2 ** k)
    base = identity_coords(v.dims)
    stages = []
    for _ in range(k):
        stages.append(u)
        u = _compose_arrays(u, u, base)
    disp = DisplacementField(VectorField(u, v.spacing), "forward", k)
    return disp, IntegrationTape(stages, v.dims)


def _sampled_jacobian(fld: np.ndarray, pts: np.ndarray, mode: str) -> np.ndarray:
    """Spatial Jacobian of a (3, ...) grid field evaluated at sample points;
    returns (3, 3, M) indexed [component, axis, point].

    'exact' differentiates the trilinear interpolant itself; 'smoothed'
    samples the central-difference gradient of the grid field. 'exact' is
    the adjoint of the implemented forward and is the default; 'smoothed'
    is cheaper per call but only approximate.
    """
    if mode == "exact":
        return _kernels.gather_dpoint(fld, pts[0], pts[1], pts[2])
    if mode == "smoothed":
        rows = []
        for c in range(3):
            grad = np.stack(np.gradient(fld[c], axis=(0, 1, 2), edge_order=1))
            rows.append(_kernels.gather(grad, pts[0], pts[1], pts[2]))
        return np.stack(rows)
    raise ValueError(f"unknown jacobian mode: {mode!r}")


def integrate_svf_backward(tape: IntegrationTape, dl_du, jacobian_mode: str = "exact") -> np.ndarray:
    """Propagate an upstream gradient w.r.t. the integrated displacement
    back to the velocity field.

    Each squaring r = u(x + u(x)) + u(x) contributes three terms to
    dL/du: the scatter adjoint of the sampling, the transposed sampled
    Jacobian applied to the upstream gradient, and the pass-through.
    The result is finally scaled by 1/2^K.
    """
    g = dl_du.data if isinstance(dl_du, VectorField) else np.asarray(dl_du, dtype=np.float64)
    if g.shape != (3,) + tuple(tape.dims):
        raise ValueError(f"gradient shape {g.shape} does not match tape dims {tape.dims}")
    base = identity_coords(tape.dims)
    for u_k in reversed(tape.stages):
        pts = base + u_k.reshape(3, -1)
        g_flat = g.reshape(3, -1)
        scat = _kernels.scatter(tape.dims, pts[0], pts[1], pts[2], g_flat)
        jac = _sampled_jacobian(u_k, pts, jacobian_mode)
        jt_g = np.einsum("cdm,cm->dm", jac, g_flat)
        g = g + scat + jt_g.reshape(g.shape)
    return g / float(2 ** len(tape.stages))


def warp(img: ScalarVolume, u: DisplacementField) -> ScalarVolume:
    """Pull-back warp: result(x) = img(x + u(x)) with clamped trilinear
    sampling."""
    if img.dims != u.dims:
        raise ValueError(f"dims mismatch: image {img.dims} vs field {u.dims}")
    base = identity_coords(u.dims)
    pts = base + u.data.reshape(3, -1)
    vals = _kernels.gather(img.data[None], pts[0], pts[1], pts[2])
    return ScalarVolume(vals.reshape(img.dims), img.spacing)


def warp_backward(img: ScalarVolume, u: DisplacementField, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``warp`` w.r.t. the displacement: the image gradient of
    the trilinear interpolant at each warped point, scaled by the upstream
    value. Returns a raw (3, nx, ny, nz) array."""
    if upstream.shape != tuple(img.dims):
        raise ValueError(f"upstream shape {upstream.shape} does not match {img.dims}")
    base = identity_coords(u.dims)
    pts = base + u.data.reshape(3, -1)
    dimg = _kernels.gather_dpoint(img.data[None], pts[0], pts[1], pts[2])[0]
    return (dimg * upstream.reshape(1, -1)).reshape((3,) + tuple(img.dims))


def invert_via_negation(v: VectorField, squaring_steps: int) -> DisplacementField:
    """Inverse transform by integrating the negated velocity field."""
    disp, _ = integrate_svf(VectorField(-v.data, v.spacing), squaring_steps)
    return DisplacementField(disp.field, "inverse", disp.squaring_steps)


def jacobian_determinant(u: DisplacementField) -> ScalarVolume:
    """Per-voxel det(I + grad u), with central differences in the interior
    and one-sided differences at the boundary."""
    if min(u.dims) < 3:
        raise ValueError(f"jacobian needs dims >= 3, got {u.dims}")
    d = u.data
    j = np.empty((3, 3) + tuple(u.dims))
    for c in range(3):
        gx, gy, gz = np.gradient(d[c], axis=(0, 1, 2), edge_order=1)
        j[c, 0], j[c, 1], j[c, 2] = gx, gy, gz
        j[c, c] += 1.0
    det = (j[0, 0] * (j[1, 1] * j[2, 2] - j[1, 2] * j[2, 1])
           - j[0, 1] * (j[1, 0] * j[2, 2] - j[1, 2] * j[2, 0])
           + j[0, 2] * (j[1, 0] * j[2, 1] - j[1, 1] * j[2, 0]))
    return ScalarVolume(det, u.field.spacing)


def folding_fraction(jac: ScalarVolume, mask: ScalarVolume) -> float:
    """Percentage of masked voxels with a negative Jacobian determinant."""
    if jac.dims != mask.dims:
        raise ValueError(f"dims mismatch: {jac.dims} vs {mask.dims}")
    m = mask.data
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary (values in {0, 1})")
    n_masked = int(np.count_nonzero(m))
    if n_masked == 0:
        raise ValueError("empty region")
    n_folded = int(np.count_nonzero((jac.data < 0) & (m == 1)))
    return 100.0 * n_folded / n_masked
