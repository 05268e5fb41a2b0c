"""Backend switch for the hot kernels.

Set ``UIBREC_DISABLE_NUMBA=1`` in the environment to force the pure-numpy
path. :func:`set_backend` flips it at runtime (used by tests and the
benchmark).
"""
from __future__ import annotations

import os

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

_FLAG = os.environ.get("UIBREC_DISABLE_NUMBA", "").strip().lower()
_use_numba = HAS_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def use_numba() -> bool:
    return _use_numba


def backend() -> str:
    return "numba" if _use_numba else "numpy"


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend name."""
    global _use_numba
    prev = backend()
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}")
    return prev
