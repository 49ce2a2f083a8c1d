"""Kernel backend selection.

The compiled Cython extension carries the hot rasterization loops; a pure
python implementation with identical semantics acts as fallback. Selection
happens at import time; set SEMSPLAT_BACKEND=reference to force the fallback
(useful for debugging and for the comparison benchmark).
"""

from __future__ import annotations

import os

from . import reference

try:
    from . import _core  # type: ignore[attr-defined]
    HAVE_COMPILED = True
except ImportError:
    _core = None
    HAVE_COMPILED = False

_FORCED = os.environ.get("SEMSPLAT_BACKEND", "").strip().lower()
_num_threads = max(1, min(os.cpu_count() or 1, 8))


def active():
    """The kernel module currently in use."""
    if _FORCED == "reference" or not HAVE_COMPILED:
        return reference
    return _core


def backend_name() -> str:
    return "compiled" if active() is _core else "reference"


def set_num_threads(n: int):
    global _num_threads
    _num_threads = max(1, int(n))


def resolve_threads(n=None) -> int:
    return _num_threads if n is None else max(1, int(n))
