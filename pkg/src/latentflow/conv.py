"""Convolution ops (1D/2D, strided, zero or periodic padding) on Tensors.

Forward runs as im2col followed by one GEMM; backward reuses the saved
columns and routes the data gradient through col2im. Transposed
convolutions are the adjoint: forward goes through col2im, backward through
im2col. Output extents follow floor((S + 2p - K)/stride) + 1 for conv and
(S - 1)*stride - 2p + K for conv-transpose.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as K
from .tensor import ShapeError, Tensor

def _mode_flag(pad_mode: str) -> int:
    if pad_mode not in ("zero", "periodic"):
        raise ValueError(f"unknown padding mode {pad_mode!r}, expected 'zero' or 'periodic'")
    return 0 if pad_mode == "zero" else 1


def _check_spatial(extent, k, p, pad_mode, what):
    if pad_mode == "periodic" and 2 * p > extent:
        raise ShapeError(f"{what}: periodic padding {p} exceeds half extent {extent}")
    if extent + 2 * p < k:
        raise ShapeError(
            f"{what}: kernel {k} larger than padded input {extent + 2 * p}"
        )


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, pad_mode: str = "zero") -> Tensor:
    """x: (B, Cin, H, W), w: (Cout, Cin, KH, KW) -> (B, Cout, OH, OW)."""
    mode = _mode_flag(pad_mode)
    B, Cin, H, W = x.shape
    Cout, Cin_w, KH, KW = w.shape
    if Cin != Cin_w:
        raise ShapeError(f"conv2d: input channels {Cin} != weight channels {Cin_w}")
    _check_spatial(H, KH, padding, pad_mode, "conv2d")
    _check_spatial(W, KW, padding, pad_mode, "conv2d")
    OH = (H + 2 * padding - KH) // stride + 1
    OW = (W + 2 * padding - KW) // stride + 1

    cols = K.im2col2d(x.data, KH, KW, stride, stride, padding, padding, mode)
    wmat = w.data.reshape(Cout, Cin * KH * KW)
    out = cols @ wmat.T  # (B, OH*OW, Cout)
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(B, Cout, OH, OW)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gl = g.reshape(B, Cout, OH * OW).transpose(0, 2, 1)  # (B, L, Cout)
        gw = np.tensordot(gl, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        gcols = gl @ wmat
        gx = K.col2im2d(gcols, x.shape, KH, KW, stride, stride, padding, padding, mode)
        if b is None:
            return gx, gw
        return gx, gw, gl.sum(axis=(0, 1))

    return Tensor._from_op(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0, pad_mode: str = "zero") -> Tensor:
    """x: (B, Cin, H, W), w: (Cin, Cout, KH, KW) -> (B, Cout, OH, OW).

    OH = (H - 1)*stride - 2*padding + KH (likewise OW).
    """
    mode = _mode_flag(pad_mode)
    B, Cin, H, W = x.shape
    Cin_w, Cout, KH, KW = w.shape
    if Cin != Cin_w:
        raise ShapeError(f"conv_transpose2d: input channels {Cin} != weight channels {Cin_w}")
    OH = (H - 1) * stride - 2 * padding + KH
    OW = (W - 1) * stride - 2 * padding + KW
    if OH <= 0 or OW <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output extent ({OH}, {OW})")

    xmat = x.data.reshape(B, Cin, H * W).transpose(0, 2, 1)  # (B, L, Cin)
    wmat = w.data.reshape(Cin, Cout * KH * KW)
    cols = xmat @ wmat  # (B, L, Cout*KH*KW)
    out = K.col2im2d(cols, (B, Cout, OH, OW), KH, KW, stride, stride,
                     padding, padding, mode)
    if b is not None:
        out = out + b.data.reshape(1, Cout, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gcols = K.im2col2d(g, KH, KW, stride, stride, padding, padding, mode)
        gxmat = gcols @ wmat.T  # (B, L, Cin)
        gx = np.ascontiguousarray(gxmat.transpose(0, 2, 1)).reshape(x.shape)
        gw = np.tensordot(xmat, gcols, axes=([0, 1], [0, 1])).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._from_op(out, parents, backward, "conv_transpose2d")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, pad_mode: str = "zero") -> Tensor:
    """x: (B, Cin, N), w: (Cout, Cin, K) -> (B, Cout, OL)."""
    mode = _mode_flag(pad_mode)
    B, Cin, N = x.shape
    Cout, Cin_w, k = w.shape
    if Cin != Cin_w:
        raise ShapeError(f"conv1d: input channels {Cin} != weight channels {Cin_w}")
    _check_spatial(N, k, padding, pad_mode, "conv1d")
    OL = (N + 2 * padding - k) // stride + 1

    cols = K.im2col1d(x.data, k, stride, padding, mode)
    wmat = w.data.reshape(Cout, Cin * k)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(B, Cout, OL)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gl = g.reshape(B, Cout, OL).transpose(0, 2, 1)
        gw = np.tensordot(gl, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        gcols = gl @ wmat
        gx = K.col2im1d(gcols, x.shape, k, stride, padding, mode)
        if b is None:
            return gx, gw
        return gx, gw, gl.sum(axis=(0, 1))

    return Tensor._from_op(out, parents, backward, "conv1d")


def conv_transpose1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0, pad_mode: str = "zero") -> Tensor:
    """x: (B, Cin, N), w: (Cin, Cout, K) -> (B, Cout, (N-1)*stride - 2p + K)."""
    mode = _mode_flag(pad_mode)
    B, Cin, N = x.shape
    Cin_w, Cout, k = w.shape
    if Cin != Cin_w:
        raise ShapeError(f"conv_transpose1d: input channels {Cin} != weight channels {Cin_w}")
    OL = (N - 1) * stride - 2 * padding + k
    if OL <= 0:
        raise ShapeError(f"conv_transpose1d: non-positive output extent {OL}")

    xmat = x.data.reshape(B, Cin, N).transpose(0, 2, 1)
    wmat = w.data.reshape(Cin, Cout * k)
    cols = xmat @ wmat
    out = K.col2im1d(cols, (B, Cout, OL), k, stride, padding, mode)
    if b is not None:
        out = out + b.data.reshape(1, Cout, 1)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gcols = K.im2col1d(g, k, stride, padding, mode)
        gxmat = gcols @ wmat.T
        gx = np.ascontiguousarray(gxmat.transpose(0, 2, 1)).reshape(x.shape)
        gw = np.tensordot(xmat, gcols, axes=([0, 1], [0, 1])).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return Tensor._from_op(out, parents, backward, "conv_transpose1d")
