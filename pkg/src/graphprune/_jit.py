"""Optional numba acceleration.

Set ``GRAPHPRUNE_NUMBA=0`` to force the pure-numpy kernels.
"""

import os
from typing import Any, Callable

_FLAG = os.environ.get("GRAPHPRUNE_NUMBA", "1").strip().lower()

try:
    from numba import njit as _njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is optional
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


def njit(**kwargs: Any) -> Callable[[Callable], Callable]:
    """``numba.njit`` when numba is installed, identity otherwise."""
    if not HAVE_NUMBA:
        return lambda f: f
    return _njit(**kwargs)
