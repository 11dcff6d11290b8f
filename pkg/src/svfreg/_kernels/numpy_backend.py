"""Vectorized numpy implementations of the hot kernels.

This is the fallback backend used when the compiled extension is not
available (see ``svfreg._kernels``). Both backends implement the same
contracts:

* ``gather``        -- clamped trilinear interpolation of a channel-major
                       field at a list of continuous voxel coordinates.
* ``scatter``       -- exact adjoint of ``gather`` (same weights, pushed
                       back onto the 8 corner voxels).
* ``gather_dpoint`` -- derivative of the clamped trilinear interpolant
                       with respect to the sample coordinates.
* ``conv3d_*``      -- 3x3x3 convolution with zero padding, plus its
                       reverse-mode gradients.

All kernels are single-threaded and deterministic; accumulation order is
fixed so repeated calls are bitwise reproducible.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _corner_setup(dims, px, py, pz):
    """Clamp coordinates and return base corner indices, fractions and
    in-range flags (True where the coordinate was not clamped)."""
    nx, ny, nz = dims
    cx = np.clip(px, 0.0, nx - 1.0)
    cy = np.clip(py, 0.0, ny - 1.0)
    cz = np.clip(pz, 0.0, nz - 1.0)
    ix = np.minimum(cx.astype(np.int64), nx - 2)
    iy = np.minimum(cy.astype(np.int64), ny - 2)
    iz = np.minimum(cz.astype(np.int64), nz - 2)
    fx = cx - ix
    fy = cy - iy
    fz = cz - iz
    ax = (px > 0.0) & (px < nx - 1.0)
    ay = (py > 0.0) & (py < ny - 1.0)
    az = (pz > 0.0) & (pz < nz - 1.0)
    return ix, iy, iz, fx, fy, fz, ax, ay, az


def gather(field, px, py, pz):
    """Trilinear interpolation of ``field`` (C, nx, ny, nz) at M points.

    Out-of-bounds coordinates are clamped to the boundary (replicate
    padding). Returns an array of shape (C, M).
    """
    field = np.asarray(field, dtype=np.float64)
    c, nx, ny, nz = field.shape
    ix, iy, iz, fx, fy, fz, _, _, _ = _corner_setup((nx, ny, nz), px, py, pz)

    flat = field.reshape(c, -1)
    base = (ix * ny + iy) * nz + iz
    sx, sy, sz = ny * nz, nz, 1

    out = np.zeros((c, px.shape[0]), dtype=np.float64)
    for dx_, wx in ((0, 1.0 - fx), (1, fx)):
        for dy_, wy in ((0, 1.0 - fy), (1, fy)):
            for dz_, wz in ((0, 1.0 - fz), (1, fz)):
                idx = base + dx_ * sx + dy_ * sy + dz_ * sz
                out += flat[:, idx] * (wx * wy * wz)
    return out


def scatter(dims, px, py, pz, upstream):
    """Adjoint of ``gather``: push (C, M) values onto a (C, nx, ny, nz) grid
    with the trilinear weights of the corresponding gather."""
    upstream = np.asarray(upstream, dtype=np.float64)
    nx, ny, nz = dims
    c = upstream.shape[0]
    nvox = nx * ny * nz
    ix, iy, iz, fx, fy, fz, _, _, _ = _corner_setup(dims, px, py, pz)

    base = (ix * ny + iy) * nz + iz
    sx, sy, sz = ny * nz, nz, 1

    out = np.zeros((c, nvox), dtype=np.float64)
    for dx_, wx in ((0, 1.0 - fx), (1, fx)):
        for dy_, wy in ((0, 1.0 - fy), (1, fy)):
            for dz_, wz in ((0, 1.0 - fz), (1, fz)):
                idx = base + dx_ * sx + dy_ * sy + dz_ * sz
                w = wx * wy * wz
                for ch in range(c):
                    out[ch] += np.bincount(idx, weights=upstream[ch] * w,
                                           minlength=nvox)
    return out.reshape(c, nx, ny, nz)


def gather_dpoint(field, px, py, pz):
    """Derivative of the clamped trilinear interpolant w.r.t. the sample
    coordinates. Returns (C, 3, M); entries are zero along axes where the
    coordinate was clamped out of range."""
    field = np.asarray(field, dtype=np.float64)
    c, nx, ny, nz = field.shape
    ix, iy, iz, fx, fy, fz, ax, ay, az = _corner_setup(
        (nx, ny, nz), px, py, pz)

    flat = field.reshape(c, -1)
    base = (ix * ny + iy) * nz + iz
    sx, sy, sz = ny * nz, nz, 1

    def corner(dx_, dy_, dz_):
        return flat[:, base + dx_ * sx + dy_ * sy + dz_ * sz]

    v000 = corner(0, 0, 0)
    v100 = corner(1, 0, 0)
    v010 = corner(0, 1, 0)
    v110 = corner(1, 1, 0)
    v001 = corner(0, 0, 1)
    v101 = corner(1, 0, 1)
    v011 = corner(0, 1, 1)
    v111 = corner(1, 1, 1)

    gx = ((v100 - v000) * (1 - fy) * (1 - fz) + (v110 - v010) * fy * (1 - fz)
          + (v101 - v001) * (1 - fy) * fz + (v111 - v011) * fy * fz) * ax
    gy = ((v010 - v000) * (1 - fx) * (1 - fz) + (v110 - v100) * fx * (1 - fz)
          + (v011 - v001) * (1 - fx) * fz + (v111 - v101) * fx * fz) * ay
    gz = ((v001 - v000) * (1 - fx) * (1 - fy) + (v101 - v100) * fx * (1 - fy)
          + (v011 - v010) * (1 - fx) * fy + (v111 - v110) * fx * fy) * az

    return np.stack([gx, gy, gz], axis=1)


def _im2col(x):
    """(C, nx, ny, nz) -> (nvox, C*27) patch matrix with zero padding 1."""
    c, nx, ny, nz = x.shape
    xp = np.zeros((c, nx + 2, ny + 2, nz + 2), dtype=np.float64)
    xp[:, 1:-1, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    return win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(nx * ny * nz, c * 27)


def conv3d_forward(x, w, b):
    """3x3x3 convolution with zero padding. x: (Ci, nx, ny, nz),
    w: (Co, Ci, 3, 3, 3), b: (Co,). Returns (Co, nx, ny, nz)."""
    x = np.asarray(x, dtype=np.float64)
    co = w.shape[0]
    spatial = x.shape[1:]
    col = _im2col(x)
    y = col @ w.reshape(co, -1).T + b[None, :]
    return y.T.reshape((co,) + spatial)


def conv3d_backward_params(x, g):
    """Gradients of conv3d_forward w.r.t. kernel and bias."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    ci = x.shape[0]
    co = g.shape[0]
    col = _im2col(x)
    dw = (g.reshape(co, -1) @ col).reshape(co, ci, 3, 3, 3)
    db = g.reshape(co, -1).sum(axis=1)
    return dw, db


def conv3d_backward_input(g, w):
    """Gradient of conv3d_forward w.r.t. its input: full correlation of the
    upstream gradient with the flipped, channel-transposed kernel."""
    w = np.asarray(w, dtype=np.float64)
    wt = w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1]
    ci = wt.shape[0]
    return conv3d_forward(g, np.ascontiguousarray(wt), np.zeros(ci))
