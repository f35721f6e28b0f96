"""JIT switch for the hot kernels.

Every kernel in :mod:`cmpekit.kernels` exists twice: a loop version compiled
with ``numba.njit`` and a vectorised numpy version. Setting the environment
variable ``CMPEKIT_DISABLE_NUMBA=1`` (or running without numba installed)
routes all calls to the numpy path. The flag is read at call time so tests can
flip it with ``monkeypatch.setenv``.
"""
import os

ENV_FLAG = "CMPEKIT_DISABLE_NUMBA"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def use_numba():
    if not HAVE_NUMBA:
        return False
    return os.environ.get(ENV_FLAG, "").strip().lower() not in ("1", "true", "yes", "on")


def njit(func):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if HAVE_NUMBA:
        return numba.njit(cache=True)(func)
    return func


__all__ = ["ENV_FLAG", "HAVE_NUMBA", "njit", "use_numba"]
