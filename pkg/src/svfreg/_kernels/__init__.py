"""Kernel backend selection.

The hot inner loops exist twice: a compiled Cython extension
(``_fastcore``) and a vectorized numpy fallback (``numpy_backend``).
Both implement the same six contracts (see ``numpy_backend`` docs).

``SVFREG_BACKEND`` picks the implementation:

* ``auto`` (default): the measured-best path per kernel — compiled
  gather/scatter/gather_dpoint (the interpolation loops vectorize poorly
  in numpy), numpy's im2col conv3d (BLAS beats scalar loops). Falls back
  to pure numpy when the extension is missing.
* ``cython``: everything from the extension (raises if not built).
* ``numpy``: everything from the fallback.

Any single mode is deterministic run-to-run; results across modes agree
to floating-point roundoff only. ``benchmarks/bench_kernels.py`` compares
the two implementations kernel by kernel.
"""

import os

_requested = os.environ.get("SVFREG_BACKEND", "auto")

if _requested not in ("auto", "cython", "numpy"):
    raise RuntimeError(f"unknown SVFREG_BACKEND value: {_requested!r}")

from . import numpy_backend as _np_impl

_cy_impl = None
if _requested in ("auto", "cython"):
    try:
        from . import _fastcore as _cy_impl
    except ImportError:
        if _requested == "cython":
            raise

if _cy_impl is None:
    BACKEND = "numpy"
    _sample_impl = _conv_impl = _np_impl
elif _requested == "cython":
    BACKEND = "cython"
    _sample_impl = _conv_impl = _cy_impl
else:
    BACKEND = "auto (cython sampling, numpy conv)"
    _sample_impl = _cy_impl
    _conv_impl = _np_impl

gather = _sample_impl.gather
scatter = _sample_impl.scatter
gather_dpoint = _sample_impl.gather_dpoint
conv3d_forward = _conv_impl.conv3d_forward
conv3d_backward_input = _conv_impl.conv3d_backward_input
conv3d_backward_params = _conv_impl.conv3d_backward_params
