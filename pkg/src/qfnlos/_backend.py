"""Kernel backend selection.

The compiled Cython module is used when it imports; setting the
environment variable ``QFNLOS_PURE_PYTHON=1`` forces the numpy fallback.
Both backends stay importable so they can be compared directly.
"""
import os
from types import ModuleType

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

COMPILED_AVAILABLE = _compiled is not None

if COMPILED_AVAILABLE and not os.environ.get("QFNLOS_PURE_PYTHON"):
    _active: ModuleType = _compiled
    ACTIVE_NAME = "compiled"
else:
    _active = _fallback
    ACTIVE_NAME = "python"


def get_backend(name: str | None = None) -> ModuleType:
    """Return the kernel module: ``"compiled"``, ``"python"`` or ``None`` for the active one."""
    if name is None:
        return _active
    if name == "python":
        return _fallback
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; reinstall with a C compiler")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def available_backends() -> list[str]:
    return ["compiled", "python"] if COMPILED_AVAILABLE else ["python"]
