"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``ELASTIC_RANK_BACKEND=python`` to force the
fallback (``=compiled`` makes a missing extension an import error).
"""
import os

from . import _pykernels

_requested = os.environ.get("ELASTIC_RANK_BACKEND", "auto").lower()

if _requested == "python":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = _pykernels
        BACKEND = "python"

matmul = _impl.matmul
ema_update = _impl.ema_update


def available_backends():
    """Map backend name to kernel module for every backend importable here."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels

        found["compiled"] = _ckernels
    except ImportError:
        pass
    return found
