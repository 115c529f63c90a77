"""Numba switch.

Hot kernels are compiled with numba unless ``DECU_NUMBA=0`` is set in the
environment (or numba is not importable), in which case the pure-numpy
implementations in :mod:`decu.kernels` are used instead.
"""

import os

_FLAG = os.environ.get("DECU_NUMBA", "1").strip().lower()

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _FLAG not in ("0", "false", "no", "off")


def njit(func=None, **kwargs):
    """``numba.njit`` when numba is available, otherwise the identity decorator.

    The compiled variants are always built when numba is importable, so the
    benchmark and the agreement tests can compare both paths regardless of
    ``DECU_NUMBA``; the flag only controls which one the public API dispatches to.
    """
    if not HAS_NUMBA:
        if func is not None:
            return func
        return lambda f: f
    opts = {"cache": True, "nogil": True}
    opts.update(kwargs)
    if func is not None:
        return numba.njit(**opts)(func)
    return numba.njit(**opts)


def thread_cap():
    """Parallelism cap from ``DECU_THREADS`` (0 or unset means one per CPU)."""
    raw = os.environ.get("DECU_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DECU_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError("DECU_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)
