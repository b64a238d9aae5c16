"""Kernel backend selection.

Hot loops exist twice: a numba ``@njit`` version and a vectorised numpy
version. ``DYNFUSION_BACKEND=numpy`` (or a missing numba) selects the
numpy path; anything else uses numba. Tests and the benchmark flip the
backend at runtime with :func:`use_backend`.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

ENV_VAR = "DYNFUSION_BACKEND"
BACKENDS = ("numba", "numpy")

_current = "numpy" if numba is None or os.environ.get(ENV_VAR, "numba").lower() == "numpy" else "numba"


def njit(*args, **kwargs):
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def current() -> str:
    return _current


def use_numba() -> bool:
    return _current == "numba"


def set_backend(name: str) -> None:
    global _current
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and numba is None:
        raise RuntimeError("numba is not installed")
    _current = name


@contextmanager
def use_backend(name: str):
    prev = _current
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)
