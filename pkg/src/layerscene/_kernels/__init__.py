"""Kernel backend selection.

The compiled Cython extension is preferred when it imported cleanly; setting
``LAYERSCENE_PURE_PYTHON=1`` forces the numpy fallback. Both backends produce
bit-identical results (see tests/test_kernels.py).
"""

import os

from . import _ops

if os.environ.get("LAYERSCENE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _ops
    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _ops
        BACKEND = "python"

shift2d = _impl.shift2d
alpha_chain_binary = _impl.alpha_chain_binary
alpha_chain_soft = _impl.alpha_chain_soft
composite = _impl.composite
scatter_accumulate = _impl.scatter_accumulate

__all__ = [
    "BACKEND",
    "shift2d",
    "alpha_chain_binary",
    "alpha_chain_soft",
    "composite",
    "scatter_accumulate",
]
