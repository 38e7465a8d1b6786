"""Kernel backend selection.

The compiled extension is used when it was built and ``XFUSE_PURE_PYTHON`` is
not set to ``1``; otherwise the numpy fallback is loaded. Both expose
``fnv1a64``, ``im2col`` and ``col2im`` with identical results.
"""

import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("XFUSE_PURE_PYTHON") != "1":
    try:
        from . import _kernels as compiled_backend  # type: ignore[no-redef]
    except ImportError:
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend

BACKEND: str = _active.BACKEND
fnv1a64 = _active.fnv1a64
im2col = _active.im2col
col2im = _active.col2im
