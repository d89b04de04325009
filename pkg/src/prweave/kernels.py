"""Kernel backend selection.

The compiled extension is preferred for the polygon kernels; set
``PRWEAVE_PURE_PYTHON=1`` to force the numpy fallback (used by the benchmark
and the cross-backend tests). Attention always runs on numpy: at the model
sizes used here the BLAS-backed batched matmuls beat the compiled scalar
loops (see ``benchmarks/bench_kernels.py``), and training results then do
not depend on whether the extension is built. The compiled attention stays
available through :func:`compiled_module`.
"""
import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)

COMPILED_KERNELS = ("rasterize_even_odd", "polygon_is_simple")

_impl = _kernels_py
BACKEND = "python"

if os.environ.get("PRWEAVE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable, using numpy fallback")
    else:
        _impl = _compiled
        BACKEND = "compiled"

attention_forward = _kernels_py.attention_forward
attention_backward = _kernels_py.attention_backward
rasterize_even_odd = _impl.rasterize_even_odd
polygon_is_simple = _impl.polygon_is_simple


def compiled_module():
    """Return the compiled kernel module, or ``None`` if it is not built."""
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels
