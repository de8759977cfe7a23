"""Hot-loop kernels: compiled extension core with a pure-numpy fallback.

The compiled module (`_ckernels`, built from Cython) and `fallback` expose
the same functions; whichever is available is selected once at import time.
Set LATENTFLOW_FORCE_FALLBACK=1 to force the numpy path (used by the
equivalence tests and the benchmark).

API (all arrays are C-contiguous numpy):
    im2col2d(x, kh, kw, sh, sw, ph, pw, mode) -> (B, OH*OW, C*kh*kw)
    col2im2d(cols, x_shape, kh, kw, sh, sw, ph, pw, mode) -> x-shaped array
    im2col1d(x, k, s, p, mode) -> (B, OL, C*k)
    col2im1d(cols, x_shape, k, s, p, mode) -> x-shaped array
    ball_query(points, centers, r) -> (indices, offsets) CSR adjacency

`mode` is 0 for zero padding and 1 for periodic (index-wrapping) padding.
"""

import os

if os.environ.get("LATENTFLOW_FORCE_FALLBACK", "") not in ("", "0"):
    from . import fallback as impl

    HAS_COMPILED = False
else:
    try:
        from . import _ckernels as impl  # type: ignore[attr-defined]

        HAS_COMPILED = True
    except ImportError:
        from . import fallback as impl

        HAS_COMPILED = False

BACKEND = "compiled" if HAS_COMPILED else "fallback"

im2col2d = impl.im2col2d
col2im2d = impl.col2im2d
im2col1d = impl.im2col1d
col2im1d = impl.col2im1d
ball_query = impl.ball_query
