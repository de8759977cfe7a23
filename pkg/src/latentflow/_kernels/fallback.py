"""Pure-numpy implementations of the hot kernels.

im2col is built on a strided view of the padded input, so the only copy is
the final reshape; col2im scatters with one vectorized add per kernel tap.
Ball query uses scipy's cKDTree. The compiled core replaces these with
tight C loops; results are required to match exactly (same arithmetic on
the same values, modulo summation order which is fixed here too).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.spatial import cKDTree

PAD_ZERO = 0
PAD_PERIODIC = 1


def _pad2d(x, ph, pw, mode):
    if ph == 0 and pw == 0:
        return x
    spec = ((0, 0), (0, 0), (ph, ph), (pw, pw))
    return np.pad(x, spec, mode="wrap" if mode == PAD_PERIODIC else "constant")


def im2col2d(x, kh, kw, sh, sw, ph, pw, mode):
    b, c, h, w = x.shape
    xp = np.ascontiguousarray(_pad2d(x, ph, pw, mode))
    hp, wp = xp.shape[2], xp.shape[3]
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(b, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
        writeable=False,
    )
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b, oh * ow, c * kh * kw)


def col2im2d(cols, x_shape, kh, kw, sh, sw, ph, pw, mode):
    b, c, h, w = x_shape
    hp, wp = h + 2 * ph, w + 2 * pw
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    cols = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    gxp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + oh * sh : sh, j : j + ow * sw : sw] += cols[:, :, :, :, i, j]
    return _unpad2d(gxp, h, w, ph, pw, mode)


def _unpad2d(gxp, h, w, ph, pw, mode):
    if ph == 0 and pw == 0:
        return gxp
    if mode == PAD_ZERO:
        return np.ascontiguousarray(gxp[:, :, ph : ph + h, pw : pw + w])
    # periodic: fold pad margins back onto their wrapped sources
    if ph > 0:
        gxp[:, :, ph : 2 * ph, :] += gxp[:, :, ph + h :, :]
        gxp[:, :, h : h + ph, :] += gxp[:, :, :ph, :]
    core = gxp[:, :, ph : ph + h, :]
    if pw > 0:
        core[:, :, :, pw : 2 * pw] += core[:, :, :, pw + w :]
        core[:, :, :, w : w + pw] += core[:, :, :, :pw]
    return np.ascontiguousarray(core[:, :, :, pw : pw + w])


def _pad1d(x, p, mode):
    if p == 0:
        return x
    spec = ((0, 0), (0, 0), (p, p))
    return np.pad(x, spec, mode="wrap" if mode == PAD_PERIODIC else "constant")


def im2col1d(x, k, s, p, mode):
    b, c, n = x.shape
    xp = np.ascontiguousarray(_pad1d(x, p, mode))
    npad = xp.shape[2]
    ol = (npad - k) // s + 1
    s0, s1, s2 = xp.strides
    view = as_strided(
        xp, shape=(b, c, ol, k), strides=(s0, s1, s2 * s, s2), writeable=False
    )
    cols = np.ascontiguousarray(view.transpose(0, 2, 1, 3))
    return cols.reshape(b, ol, c * k)


def col2im1d(cols, x_shape, k, s, p, mode):
    b, c, n = x_shape
    npad = n + 2 * p
    ol = (npad - k) // s + 1
    cols = cols.reshape(b, ol, c, k).transpose(0, 2, 1, 3)
    gxp = np.zeros((b, c, npad), dtype=cols.dtype)
    for i in range(k):
        gxp[:, :, i : i + ol * s : s] += cols[:, :, :, i]
    if p == 0:
        return gxp
    if mode == PAD_ZERO:
        return np.ascontiguousarray(gxp[:, :, p : p + n])
    if p > 0:
        gxp[:, :, p : 2 * p] += gxp[:, :, p + n :]
        gxp[:, :, n : n + p] += gxp[:, :, :p]
    return np.ascontiguousarray(gxp[:, :, p : p + n])


def ball_query(points, centers, r):
    """CSR adjacency: for each center, indices of points within radius r.

    Returns (indices, offsets) with neighbors of center i at
    indices[offsets[i]:offsets[i+1]], sorted ascending within each row.
    """
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    tree = cKDTree(points)
    rows = tree.query_ball_point(centers, r)
    offsets = np.zeros(len(rows) + 1, dtype=np.int64)
    for i, row in enumerate(rows):
        offsets[i + 1] = offsets[i] + len(row)
    indices = np.empty(offsets[-1], dtype=np.int64)
    for i, row in enumerate(rows):
        indices[offsets[i] : offsets[i + 1]] = np.sort(row)
    return indices, offsets
