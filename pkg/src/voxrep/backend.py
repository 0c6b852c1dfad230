"""Kernel backend selection: compiled extension when available, numpy otherwise.

The choice happens at import and can be forced with VOXREP_BACKEND=compiled
or VOXREP_BACKEND=numpy. Both backends expose the same three functions and
produce deterministic results; they may differ at float rounding level
because their accumulation orders differ.
"""

import os

from . import _kernels_np

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKENDS = {"numpy": _kernels_np}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled


class BackendError(RuntimeError):
    pass


def _select() -> str:
    requested = os.environ.get("VOXREP_BACKEND", "auto").lower()
    if requested == "auto":
        return "compiled" if _compiled is not None else "numpy"
    if requested not in BACKENDS:
        available = ", ".join(sorted(BACKENDS))
        raise BackendError(f"VOXREP_BACKEND={requested!r} not available (have: {available})")
    return requested


_active_name = _select()


def active_name() -> str:
    return _active_name


def active():
    return BACKENDS[_active_name]


def use(name: str) -> str:
    """Switch the active backend; returns the previous name (used by tests and benchmarks)."""
    global _active_name
    if name not in BACKENDS:
        available = ", ".join(sorted(BACKENDS))
        raise BackendError(f"backend {name!r} not available (have: {available})")
    previous = _active_name
    _active_name = name
    return previous
