# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementations of the hot kernels.

Mirrors ``numpy_backend`` exactly (same contracts, same clamping and
accumulation semantics); see that module for documentation. Loops are
serial so results are deterministic.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def gather(field, px, py, pz):
    cdef double[:, :, :, ::1] f = np.ascontiguousarray(field, dtype=np.float64)
    cdef double[::1] xs = np.ascontiguousarray(px, dtype=np.float64)
    cdef double[::1] ys = np.ascontiguousarray(py, dtype=np.float64)
    cdef double[::1] zs = np.ascontiguousarray(pz, dtype=np.float64)
    cdef Py_ssize_t c = f.shape[0], nx = f.shape[1], ny = f.shape[2], nz = f.shape[3]
    cdef Py_ssize_t m = xs.shape[0]
    out_arr = np.empty((c, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, ch, ix, iy, iz
    cdef double cx, cy, cz, fx, fy, fz
    cdef double w000, w100, w010, w110, w001, w101, w011, w111
    with nogil:
        for i in range(m):
            cx = xs[i]
            if cx < 0.0: cx = 0.0
            if cx > nx - 1.0: cx = nx - 1.0
            cy = ys[i]
            if cy < 0.0: cy = 0.0
            if cy > ny - 1.0: cy = ny - 1.0
            cz = zs[i]
            if cz < 0.0: cz = 0.0
            if cz > nz - 1.0: cz = nz - 1.0
            ix = <Py_ssize_t>cx
            if ix > nx - 2: ix = nx - 2
            iy = <Py_ssize_t>cy
            if iy > ny - 2: iy = ny - 2
            iz = <Py_ssize_t>cz
            if iz > nz - 2: iz = nz - 2
            fx = cx - ix
            fy = cy - iy
            fz = cz - iz
            w000 = (1 - fx) * (1 - fy) * (1 - fz)
            w100 = fx * (1 - fy) * (1 - fz)
            w010 = (1 - fx) * fy * (1 - fz)
            w110 = fx * fy * (1 - fz)
            w001 = (1 - fx) * (1 - fy) * fz
            w101 = fx * (1 - fy) * fz
            w011 = (1 - fx) * fy * fz
            w111 = fx * fy * fz
            for ch in range(c):
                out[ch, i] = (
                    f[ch, ix, iy, iz] * w000 + f[ch, ix + 1, iy, iz] * w100
                    + f[ch, ix, iy + 1, iz] * w010 + f[ch, ix + 1, iy + 1, iz] * w110
                    + f[ch, ix, iy, iz + 1] * w001 + f[ch, ix + 1, iy, iz + 1] * w101
                    + f[ch, ix, iy + 1, iz + 1] * w011 + f[ch, ix + 1, iy + 1, iz + 1] * w111
                )
    return out_arr


def scatter(dims, px, py, pz, upstream):
    cdef Py_ssize_t nx = dims[0], ny = dims[1], nz = dims[2]
    cdef double[::1] xs = np.ascontiguousarray(px, dtype=np.float64)
    cdef double[::1] ys = np.ascontiguousarray(py, dtype=np.float64)
    cdef double[::1] zs = np.ascontiguousarray(pz, dtype=np.float64)
    cdef double[:, ::1] up = np.ascontiguousarray(upstream, dtype=np.float64)
    cdef Py_ssize_t c = up.shape[0], m = xs.shape[0]
    out_arr = np.zeros((c, nx, ny, nz), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, ch, ix, iy, iz
    cdef double cx, cy, cz, fx, fy, fz, g
    with nogil:
        for i in range(m):
            cx = xs[i]
            if cx < 0.0: cx = 0.0
            if cx > nx - 1.0: cx = nx - 1.0
            cy = ys[i]
            if cy < 0.0: cy = 0.0
            if cy > ny - 1.0: cy = ny - 1.0
            cz = zs[i]
            if cz < 0.0: cz = 0.0
            if cz > nz - 1.0: cz = nz - 1.0
            ix = <Py_ssize_t>cx
            if ix > nx - 2: ix = nx - 2
            iy = <Py_ssize_t>cy
            if iy > ny - 2: iy = ny - 2
            iz = <Py_ssize_t>cz
            if iz > nz - 2: iz = nz - 2
            fx = cx - ix
            fy = cy - iy
            fz = cz - iz
            for ch in range(c):
                g = up[ch, i]
                out[ch, ix, iy, iz] += g * (1 - fx) * (1 - fy) * (1 - fz)
                out[ch, ix + 1, iy, iz] += g * fx * (1 - fy) * (1 - fz)
                out[ch, ix, iy + 1, iz] += g * (1 - fx) * fy * (1 - fz)
                out[ch, ix + 1, iy + 1, iz] += g * fx * fy * (1 - fz)
                out[ch, ix, iy, iz + 1] += g * (1 - fx) * (1 - fy) * fz
                out[ch, ix + 1, iy, iz + 1] += g * fx * (1 - fy) * fz
                out[ch, ix, iy + 1, iz + 1] += g * (1 - fx) * fy * fz
                out[ch, ix + 1, iy + 1, iz + 1] += g * fx * fy * fz
    return out_arr


def gather_dpoint(field, px, py, pz):
    cdef double[:, :, :, ::1] f = np.ascontiguousarray(field, dtype=np.float64)
    cdef double[::1] xs = np.ascontiguousarray(px, dtype=np.float64)
    cdef double[::1] ys = np.ascontiguousarray(py, dtype=np.float64)
    cdef double[::1] zs = np.ascontiguousarray(pz, dtype=np.float64)
    cdef Py_ssize_t c = f.shape[0], nx = f.shape[1], ny = f.shape[2], nz = f.shape[3]
    cdef Py_ssize_t m = xs.shape[0]
    out_arr = np.empty((c, 3, m), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, ch, ix, iy, iz
    cdef double cx, cy, cz, fx, fy, fz, ax, ay, az
    cdef double v000, v100, v010, v110, v001, v101, v011, v111
    with nogil:
        for i in range(m):
            cx = xs[i]
            ax = 1.0 if (cx > 0.0 and cx < nx - 1.0) else 0.0
            if cx < 0.0: cx = 0.0
            if cx > nx - 1.0: cx = nx - 1.0
            cy = ys[i]
            ay = 1.0 if (cy > 0.0 and cy < ny - 1.0) else 0.0
            if cy < 0.0: cy = 0.0
            if cy > ny - 1.0: cy = ny - 1.0
            cz = zs[i]
            az = 1.0 if (cz > 0.0 and cz < nz - 1.0) else 0.0
            if cz < 0.0: cz = 0.0
            if cz > nz - 1.0: cz = nz - 1.0
            ix = <Py_ssize_t>cx
            if ix > nx - 2: ix = nx - 2
            iy = <Py_ssize_t>cy
            if iy > ny - 2: iy = ny - 2
            iz = <Py_ssize_t>cz
            if iz > nz - 2: iz = nz - 2
            fx = cx - ix
            fy = cy - iy
            fz = cz - iz
            for ch in range(c):
                v000 = f[ch, ix, iy, iz]
                v100 = f[ch, ix + 1, iy, iz]
                v010 = f[ch, ix, iy + 1, iz]
                v110 = f[ch, ix + 1, iy + 1, iz]
                v001 = f[ch, ix, iy, iz + 1]
                v101 = f[ch, ix + 1, iy, iz + 1]
                v011 = f[ch, ix, iy + 1, iz + 1]
                v111 = f[ch, ix + 1, iy + 1, iz + 1]
                out[ch, 0, i] = ax * (
                    (v100 - v000) * (1 - fy) * (1 - fz) + (v110 - v010) * fy * (1 - fz)
                    + (v101 - v001) * (1 - fy) * fz + (v111 - v011) * fy * fz)
                out[ch, 1, i] = ay * (
                    (v010 - v000) * (1 - fx) * (1 - fz) + (v110 - v100) * fx * (1 - fz)
                    + (v011 - v001) * (1 - fx) * fz + (v111 - v101) * fx * fz)
                out[ch, 2, i] = az * (
                    (v001 - v000) * (1 - fx) * (1 - fy) + (v101 - v100) * fx * (1 - fy)
                    + (v011 - v010) * (1 - fx) * fy + (v111 - v110) * fx * fy)
    return out_arr


def conv3d_forward(x, w, b):
    # kernel offsets outermost: each (o, c, di, dj, dk) contributes one
    # shifted slab multiply-add with contiguous inner loops and no
    # per-voxel bounds checks
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t ci = xv.shape[0], nx = xv.shape[1], ny = xv.shape[2], nz = xv.shape[3]
    cdef Py_ssize_t co = wv.shape[0]
    out_arr = np.empty((co, nx, ny, nz), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t o, c, i, j, k, di, dj, dk
    cdef Py_ssize_t i0, i1, j0, j1, k0, k1
    cdef double wval
    with nogil:
        for o in range(co):
            for i in range(nx):
                for j in range(ny):
                    for k in range(nz):
                        out[o, i, j, k] = bv[o]
            for c in range(ci):
                for di in range(3):
                    i0 = 1 - di if di < 1 else 0
                    i1 = nx if di < 2 else nx - 1
                    for dj in range(3):
                        j0 = 1 - dj if dj < 1 else 0
                        j1 = ny if dj < 2 else ny - 1
                        for dk in range(3):
                            k0 = 1 - dk if dk < 1 else 0
                            k1 = nz if dk < 2 else nz - 1
                            wval = wv[o, c, di, dj, dk]
                            if wval == 0.0:
                                continue
                            for i in range(i0, i1):
                                for j in range(j0, j1):
                                    for k in range(k0, k1):
                                        out[o, i, j, k] += wval * xv[c, i + di - 1, j + dj - 1, k + dk - 1]
    return out_arr


def conv3d_backward_params(x, g):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t ci = xv.shape[0], nx = xv.shape[1], ny = xv.shape[2], nz = xv.shape[3]
    cdef Py_ssize_t co = gv.shape[0]
    dw_arr = np.zeros((co, ci, 3, 3, 3), dtype=np.float64)
    db_arr = np.zeros(co, dtype=np.float64)
    cdef double[:, :, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t o, c, i, j, k, di, dj, dk
    cdef Py_ssize_t i0, i1, j0, j1, k0, k1
    cdef double acc
    with nogil:
        for o in range(co):
            acc = 0.0
            for i in range(nx):
                for j in range(ny):
                    for k in range(nz):
                        acc += gv[o, i, j, k]
            db[o] = acc
            for c in range(ci):
                for di in range(3):
                    i0 = 1 - di if di < 1 else 0
                    i1 = nx if di < 2 else nx - 1
                    for dj in range(3):
                        j0 = 1 - dj if dj < 1 else 0
                        j1 = ny if dj < 2 else ny - 1
                        for dk in range(3):
                            k0 = 1 - dk if dk < 1 else 0
                            k1 = nz if dk < 2 else nz - 1
                            acc = 0.0
                            for i in range(i0, i1):
                                for j in range(j0, j1):
                                    for k in range(k0, k1):
                                        acc += gv[o, i, j, k] * xv[c, i + di - 1, j + dj - 1, k + dk - 1]
                            dw[o, c, di, dj, dk] = acc
    return dw_arr, db_arr


def conv3d_backward_input(g, w):
    w = np.ascontiguousarray(w, dtype=np.float64)
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    return conv3d_forward(g, wt, np.zeros(wt.shape[0]))
