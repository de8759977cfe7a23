# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot-loop kernels: im2col/col2im (1D/2D, zero or periodic
padding) and spatial-hash ball query. Must produce results identical to
the numpy fallback in latentflow._kernels.fallback."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double

PAD_ZERO = 0
PAD_PERIODIC = 1


def im2col2d(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw,
             Py_ssize_t ph, Py_ssize_t pw, int mode):
    return _im2col2d_impl(np.ascontiguousarray(x), kh, kw, sh, sw, ph, pw, mode)


cdef long long[::1] _index_table(Py_ssize_t n_out, Py_ssize_t k, Py_ssize_t s,
                                 Py_ssize_t p, Py_ssize_t extent, int mode):
    """Source index per (output position, tap); -1 encodes zero padding."""
    table_arr = np.empty(n_out * k, dtype=np.int64)
    cdef long long[::1] table = table_arr
    cdef Py_ssize_t o, i, idx
    for o in range(n_out):
        for i in range(k):
            idx = o * s - p + i
            if mode == 1:
                idx = idx % extent
                if idx < 0:
                    idx += extent
            elif idx < 0 or idx >= extent:
                idx = -1
            table[o * k + i] = idx
    return table


def _im2col2d_impl(floating[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
                   Py_ssize_t sh, Py_ssize_t sw, Py_ssize_t ph, Py_ssize_t pw,
                   int mode):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t ow = (w + 2 * pw - kw) // sw + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((b, oh * ow, c * kh * kw), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef long long[::1] rows_t = _index_table(oh, kh, sh, ph, h, mode)
    cdef long long[::1] cols_t = _index_table(ow, kw, sw, pw, w, mode)
    cdef Py_ssize_t bi, ci, oi, oj, i, j, ih, iw, row, colbase
    for bi in range(b):
        for oi in range(oh):
            for oj in range(ow):
                row = oi * ow + oj
                for ci in range(c):
                    colbase = ci * kh * kw
                    for i in range(kh):
                        ih = rows_t[oi * kh + i]
                        if ih < 0:
                            continue
                        for j in range(kw):
                            iw = cols_t[oj * kw + j]
                            if iw < 0:
                                continue
                            out[bi, row, colbase + i * kw + j] = x[bi, ci, ih, iw]
    return out_arr


def col2im2d(cols, x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh,
             Py_ssize_t sw, Py_ssize_t ph, Py_ssize_t pw, int mode):
    return _col2im2d_impl(np.ascontiguousarray(cols), x_shape, kh, kw, sh, sw,
                          ph, pw, mode)


def _col2im2d_impl(floating[:, :, ::1] cols, x_shape, Py_ssize_t kh,
                   Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw, Py_ssize_t ph,
                   Py_ssize_t pw, int mode):
    cdef Py_ssize_t b = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t ow = (w + 2 * pw - kw) // sw + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gx_arr = np.zeros((b, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef long long[::1] rows_t = _index_table(oh, kh, sh, ph, h, mode)
    cdef long long[::1] cols_t = _index_table(ow, kw, sw, pw, w, mode)
    cdef Py_ssize_t bi, ci, oi, oj, i, j, ih, iw, row, colbase
    for bi in range(b):
        for oi in range(oh):
            for oj in range(ow):
                row = oi * ow + oj
                for ci in range(c):
                    colbase = ci * kh * kw
                    for i in range(kh):
                        ih = rows_t[oi * kh + i]
                        if ih < 0:
                            continue
                        for j in range(kw):
                            iw = cols_t[oj * kw + j]
                            if iw < 0:
                                continue
                            gx[bi, ci, ih, iw] += cols[bi, row, colbase + i * kw + j]
    return gx_arr


def im2col1d(x, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p, int mode):
    return _im2col1d_impl(np.ascontiguousarray(x), k, s, p, mode)


def _im2col1d_impl(floating[:, :, ::1] x, Py_ssize_t k, Py_ssize_t s,
                   Py_ssize_t p, int mode):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], n = x.shape[2]
    cdef Py_ssize_t ol = (n + 2 * p - k) // s + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((b, ol, c * k), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, oi, i, idx
    for bi in range(b):
        for oi in range(ol):
            for ci in range(c):
                for i in range(k):
                    idx = oi * s - p + i
                    if mode == 1:
                        idx = idx % n
                        if idx < 0:
                            idx += n
                    elif idx < 0 or idx >= n:
                        continue
                    out[bi, oi, ci * k + i] = x[bi, ci, idx]
    return out_arr


def col2im1d(cols, x_shape, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p, int mode):
    return _col2im1d_impl(np.ascontiguousarray(cols), x_shape, k, s, p, mode)


def _col2im1d_impl(floating[:, :, ::1] cols, x_shape, Py_ssize_t k,
                   Py_ssize_t s, Py_ssize_t p, int mode):
    cdef Py_ssize_t b = x_shape[0], c = x_shape[1], n = x_shape[2]
    cdef Py_ssize_t ol = (n + 2 * p - k) // s + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gx_arr = np.zeros((b, c, n), dtype=dtype)
    cdef floating[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t bi, ci, oi, i, idx
    for bi in range(b):
        for oi in range(ol):
            for ci in range(c):
                for i in range(k):
                    idx = oi * s - p + i
                    if mode == 1:
                        idx = idx % n
                        if idx < 0:
                            idx += n
                    elif idx < 0 or idx >= n:
                        continue
                    gx[bi, ci, idx] += cols[bi, oi, ci * k + i]
    return gx_arr


def ball_query(points, centers, double r):
    """Spatial-hash adjacency: CSR (indices, offsets), rows sorted ascending."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    ctr = np.ascontiguousarray(centers, dtype=np.float64)
    if pts.ndim != 2 or ctr.ndim != 2 or pts.shape[1] != ctr.shape[1]:
        raise ValueError("points and centers must be (N, d) with matching d")
    if pts.shape[1] == 1:
        return _ball_query_1d(pts, ctr, r)
    if pts.shape[1] == 2:
        return _ball_query_2d(pts, ctr, r)
    raise ValueError("ball query supports d in {1, 2}")


def _ball_query_2d(double[:, ::1] pts, double[:, ::1] ctr, double r):
    cdef Py_ssize_t m = pts.shape[0], g = ctr.shape[0]
    cdef double lo0 = np.inf, lo1 = np.inf
    cdef Py_ssize_t i
    for i in range(m):
        if pts[i, 0] < lo0: lo0 = pts[i, 0]
        if pts[i, 1] < lo1: lo1 = pts[i, 1]
    for i in range(g):
        if ctr[i, 0] < lo0: lo0 = ctr[i, 0]
        if ctr[i, 1] < lo1: lo1 = ctr[i, 1]

    # hash points into cells of side r; ncx/ncy bound the occupied cells so
    # out-of-range neighbor cells are skipped (they hold no points and their
    # flattened keys would alias occupied ones)
    cells_arr = np.empty(m, dtype=np.int64)
    cdef long long[::1] cells = cells_arr
    cdef long long cx, cy, ncx = 1, ncy = 1
    for i in range(m):
        cx = <long long>((pts[i, 0] - lo0) / r)
        cy = <long long>((pts[i, 1] - lo1) / r)
        if cx + 1 > ncx:
            ncx = cx + 1
        if cy + 1 > ncy:
            ncy = cy + 1
    for i in range(m):
        cx = <long long>((pts[i, 0] - lo0) / r)
        cy = <long long>((pts[i, 1] - lo1) / r)
        cells[i] = cx * ncy + cy

    order_arr = np.argsort(cells_arr, kind="stable").astype(np.int64)
    sorted_cells_arr = cells_arr[order_arr]
    cdef long long[::1] order = order_arr
    cdef long long[::1] sorted_cells = sorted_cells_arr

    counts_arr = np.zeros(g, dtype=np.int64)
    cdef long long[::1] counts = counts_arr
    cdef double r2 = r * r
    cdef Py_ssize_t ci, dx, dy, lo_i, hi_i, j
    cdef long long key, target_cx, target_cy, tx, ty
    cdef double d0, d1

    # counting pass
    for ci in range(g):
        target_cx = <long long>((ctr[ci, 0] - lo0) / r)
        target_cy = <long long>((ctr[ci, 1] - lo1) / r)
        for dx in range(-1, 2):
            tx = target_cx + dx
            if tx < 0 or tx >= ncx:
                continue
            for dy in range(-1, 2):
                ty = target_cy + dy
                if ty < 0 or ty >= ncy:
                    continue
                key = tx * ncy + ty
                lo_i = _lower_bound(sorted_cells, key)
                hi_i = _upper_bound(sorted_cells, key)
                for j in range(lo_i, hi_i):
                    d0 = pts[order[j], 0] - ctr[ci, 0]
                    d1 = pts[order[j], 1] - ctr[ci, 1]
                    if d0 * d0 + d1 * d1 <= r2:
                        counts[ci] += 1

    offsets_arr = np.zeros(g + 1, dtype=np.int64)
    np.cumsum(counts_arr, out=offsets_arr[1:])
    indices_arr = np.empty(offsets_arr[g], dtype=np.int64)
    cdef long long[::1] offsets = offsets_arr
    cdef long long[::1] indices = indices_arr
    cdef Py_ssize_t pos

    for ci in range(g):
        pos = offsets[ci]
        target_cx = <long long>((ctr[ci, 0] - lo0) / r)
        target_cy = <long long>((ctr[ci, 1] - lo1) / r)
        for dx in range(-1, 2):
            tx = target_cx + dx
            if tx < 0 or tx >= ncx:
                continue
            for dy in range(-1, 2):
                ty = target_cy + dy
                if ty < 0 or ty >= ncy:
                    continue
                key = tx * ncy + ty
                lo_i = _lower_bound(sorted_cells, key)
                hi_i = _upper_bound(sorted_cells, key)
                for j in range(lo_i, hi_i):
                    d0 = pts[order[j], 0] - ctr[ci, 0]
                    d1 = pts[order[j], 1] - ctr[ci, 1]
                    if d0 * d0 + d1 * d1 <= r2:
                        indices[pos] = order[j]
                        pos += 1
        _insertion_sort(indices, offsets[ci], pos)
    return indices_arr, offsets_arr


def _ball_query_1d(double[:, ::1] pts, double[:, ::1] ctr, double r):
    cdef Py_ssize_t m = pts.shape[0], g = ctr.shape[0]
    order_arr = np.argsort(np.asarray(pts)[:, 0], kind="stable").astype(np.int64)
    sorted_x_arr = np.asarray(pts)[order_arr, 0].copy()
    cdef long long[::1] order = order_arr
    cdef double[::1] sx = sorted_x_arr

    counts_arr = np.zeros(g, dtype=np.int64)
    cdef long long[::1] counts = counts_arr
    cdef Py_ssize_t ci, j, lo_i, hi_i
    for ci in range(g):
        lo_i = _lower_bound_d(sx, ctr[ci, 0] - r)
        hi_i = _upper_bound_d(sx, ctr[ci, 0] + r)
        counts[ci] = hi_i - lo_i

    offsets_arr = np.zeros(g + 1, dtype=np.int64)
    np.cumsum(counts_arr, out=offsets_arr[1:])
    indices_arr = np.empty(offsets_arr[g], dtype=np.int64)
    cdef long long[::1] offsets = offsets_arr
    cdef long long[::1] indices = indices_arr
    cdef Py_ssize_t pos
    for ci in range(g):
        pos = offsets[ci]
        lo_i = _lower_bound_d(sx, ctr[ci, 0] - r)
        hi_i = _upper_bound_d(sx, ctr[ci, 0] + r)
        for j in range(lo_i, hi_i):
            indices[pos] = order[j]
            pos += 1
        _insertion_sort(indices, offsets[ci], pos)
    return indices_arr, offsets_arr


cdef Py_ssize_t _lower_bound(long long[::1] arr, long long key):
    cdef Py_ssize_t lo = 0, hi = arr.shape[0], mid
    while lo < hi:
        mid = (lo + hi) // 2
        if arr[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef Py_ssize_t _upper_bound(long long[::1] arr, long long key):
    cdef Py_ssize_t lo = 0, hi = arr.shape[0], mid
    while lo < hi:
        mid = (lo + hi) // 2
        if arr[mid] <= key:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef Py_ssize_t _lower_bound_d(double[::1] arr, double key):
    cdef Py_ssize_t lo = 0, hi = arr.shape[0], mid
    while lo < hi:
        mid = (lo + hi) // 2
        if arr[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef Py_ssize_t _upper_bound_d(double[::1] arr, double key):
    cdef Py_ssize_t lo = 0, hi = arr.shape[0], mid
    while lo < hi:
        mid = (lo + hi) // 2
        if arr[mid] <= key:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef void _insertion_sort(long long[::1] arr, Py_ssize_t lo, Py_ssize_t hi):
    cdef Py_ssize_t i, j
    cdef long long v
    for i in range(lo + 1, hi):
        v = arr[i]
        j = i - 1
        while j >= lo and arr[j] > v:
            arr[j + 1] = arr[j]
            j -= 1
        arr[j + 1] = v
