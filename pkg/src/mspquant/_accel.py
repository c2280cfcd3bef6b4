"""Backend selection for the integer kernels.

Set ``MSPQUANT_NUMBA=0`` to force the pure-numpy code paths. When numba is not
importable the numpy paths are used regardless of the flag.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_FLAG = os.environ.get("MSPQUANT_NUMBA", "1").strip().lower()
_backend = "numba" if HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off") else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def get_backend():
    return _backend


def set_backend(name):
    """Switch kernel backend at runtime ("numba" or "numpy"). Returns the previous one."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    prev, _backend = _backend, name
    return prev
