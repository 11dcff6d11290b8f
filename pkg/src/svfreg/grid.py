"""Core 3D grid containers and sampling machinery.

Conventions used across the package:

* Scalar volumes are float64 arrays of shape (nx, ny, nz), indexed
  ``data[x, y, z]``.
* Vector fields are channel-major float64 arrays of shape (3, nx, ny, nz);
  channel 0/1/2 is the x/y/z component. Components are stored in voxel
  units; millimetres only enter in the evaluation metrics.
* Sample coordinates live in voxel index space; out-of-bounds coordinates
  are clamped to the boundary (replicate padding).
* Resampling is cell-centered: a grid of n voxels with spacing s covers a
  physical extent of n*s, and resampling preserves that extent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

Dims = tuple[int, int, int]
Spacing = tuple[float, float, float]


@dataclass
class ScalarVolume:
    """A 3D scalar grid (image, mask, weight map) with voxel spacing in mm."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"scalar volume must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 2:
            raise ValueError(f"volume dims must be >= 2, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def dims(self) -> Dims:
        return self.data.shape


@dataclass
class VectorField:
    """A 3D grid of 3-vectors (velocity, displacement, gradient) in voxel
    units, channel-major."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise ValueError(
                f"vector field must have shape (3, nx, ny, nz), got {self.data.shape}")
        if min(self.data.shape[1:]) < 2:
            raise ValueError(f"field dims must be >= 2, got {self.data.shape[1:]}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("vector field contains non-finite components")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def dims(self) -> Dims:
        return self.data.shape[1:]


@dataclass(frozen=True)
class GridPoint:
    """A continuous coordinate in voxel index space."""

    x: float
    y: float
    z: float


def as_point_array(points) -> np.ndarray:
    """Normalize a list of GridPoint / tuples / an (M, 3) array to float64
    (M, 3). Raises on non-finite coordinates."""
    if isinstance(points, GridPoint):
        points = [points]
    if len(points) > 0 and isinstance(points[0], GridPoint):
        pts = np.array([[p.x, p.y, p.z] for p in points], dtype=np.float64)
    else:
        pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (M, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite sample coordinate")
    return pts


def identity_coords(dims: Dims) -> np.ndarray:
    """Flattened voxel-center coordinates of the grid, shape (3, nvox)."""
    ax = [np.arange(n, dtype=np.float64) for n in dims]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()])


def trilinear_sample(fld: ScalarVolume | VectorField, points) -> np.ndarray:
    """Trilinear interpolation at continuous voxel coordinates.

    Returns (M,) for a ScalarVolume and (M, 3) for a VectorField.
    Out-of-bounds coordinates are clamped (replicate padding); sampling at
    grid nodes reproduces stored values exactly.
    """
    pts = as_point_array(points)
    if isinstance(fld, ScalarVolume):
        arr = fld.data[None]
    else:
        arr = fld.data
    vals = _kernels.gather(arr, pts[:, 0].copy(), pts[:, 1].copy(), pts[:, 2].copy())
    if isinstance(fld, ScalarVolume):
        return vals[0]
    return vals.T


def trilinear_sample_adjoint(field_dims: Dims, points, upstream_values) -> np.ndarray:
    """Adjoint of ``trilinear_sample``: scatter each upstream value onto the
    8 corner voxels with the gather weights.

    ``upstream_values`` is (M,) for a scalar target, (M, 3) for a vector
    target; returns (nx, ny, nz) or (3, nx, ny, nz) accordingly. Satisfies
    <sample(f), g> == <f, adjoint(g)> exactly.
    """
    pts = as_point_array(points)
    up = np.asarray(upstream_values, dtype=np.float64)
    scalar = up.ndim == 1
    if scalar:
        up = up[None]
    else:
        if up.ndim != 2 or up.shape[1] != 3:
            raise ValueError(f"upstream values must be (M,) or (M, 3), got {up.shape}")
        up = up.T.copy()
    if up.shape[1] != pts.shape[0]:
        raise ValueError(
            f"upstream count {up.shape[1]} does not match point count {pts.shape[0]}")
    out = _kernels.scatter(tuple(int(d) for d in field_dims),
                           pts[:, 0].copy(), pts[:, 1].copy(), pts[:, 2].copy(), up)
    return out[0] if scalar else out


def central_gradient(vol: ScalarVolume) -> VectorField:
    """Per-axis first differences in voxel units: central in the interior,
    one-sided at the boundary. Exact for linear fields."""
    if min(vol.dims) < 2:
        raise ValueError(f"gradient needs dims >= 2, got {vol.dims}")
    gx, gy, gz = np.gradient(vol.data, axis=(0, 1, 2), edge_order=1)
    return VectorField(np.stack([gx, gy, gz]), vol.spacing)


def _resample_coords(src_dims: Dims, dst_dims: Dims) -> np.ndarray:
    """Cell-centered map of destination voxel centers into source index
    space, flattened to (3, nvox_dst)."""
    coords = identity_coords(dst_dims)
    for axis in range(3):
        ratio = src_dims[axis] / dst_dims[axis]
        coords[axis] = (coords[axis] + 0.5) * ratio - 0.5
    return coords


def resample_to(vol: ScalarVolume, new_dims: Dims) -> ScalarVolume:
    """Trilinear resampling of a scalar volume onto an explicit grid size,
    preserving the physical extent."""
    new_dims = tuple(int(d) for d in new_dims)
    if min(new_dims) < 2:
        raise ValueError(f"degenerate target dims {new_dims}")
    if new_dims == vol.dims:
        return ScalarVolume(vol.data.copy(), vol.spacing)
    coords = _resample_coords(vol.dims, new_dims)
    vals = _kernels.gather(vol.data[None], coords[0], coords[1], coords[2])
    spacing = tuple(s * o / n for s, o, n in zip(vol.spacing, vol.dims, new_dims))
    return ScalarVolume(vals.reshape(new_dims), spacing)


def resample(vol: ScalarVolume, factor: float) -> ScalarVolume:
    """Isotropic resampling by a positive scale factor (>1 upsamples)."""
    if not factor > 0:
        raise ValueError(f"resample factor must be > 0, got {factor}")
    new_dims = tuple(int(round(n * factor)) for n in vol.dims)
    if min(new_dims) < 2:
        raise ValueError(f"degenerate target dims {new_dims} for factor {factor}")
    return resample_to(vol, new_dims)


def upsample_field(fld: VectorField, new_dims: Dims) -> VectorField:
    """Trilinear resampling of a vector field onto an explicit grid size.

    Components are rescaled by the per-axis grid-size ratio so displacements
    stay correct in the new voxel units.
    """
    new_dims = tuple(int(d) for d in new_dims)
    if min(new_dims) < 2:
        raise ValueError(f"degenerate target dims {new_dims}")
    coords = _resample_coords(fld.dims, new_dims)
    vals = _kernels.gather(fld.data, coords[0], coords[1], coords[2])
    scale = np.array([n / o for o, n in zip(fld.dims, new_dims)])
    vals = vals * scale[:, None]
    spacing = tuple(s * o / n for s, o, n in zip(fld.spacing, fld.dims, new_dims))
    return VectorField(vals.reshape((3,) + new_dims), spacing)


HU_CLIP = 1024.0


def clip_rescale(vol: ScalarVolume) -> ScalarVolume:
    """Clamp intensities to [-1024, 1024] HU and map linearly to [-1, 1]."""
    return ScalarVolume(np.clip(vol.data, -HU_CLIP, HU_CLIP) / HU_CLIP, vol.spacing)
