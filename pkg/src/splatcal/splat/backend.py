"""Kernel backend selection.

The numba kernels are used by default.  Setting ``SPLATCAL_NUMBA=0`` in the
environment (or calling :func:`set_backend`) switches to the pure-numpy
implementation; it is also used automatically when numba cannot be imported.
"""

import logging
import os

from . import _kernels_numpy

log = logging.getLogger(__name__)

if "NUMBA_THREADING_LAYER" not in os.environ:
    # avoid probing an outdated TBB; the workqueue layer is always available
    os.environ["NUMBA_THREADING_LAYER"] = "workqueue"

try:
    from . import _kernels_numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _kernels_numba = None

_ENV_FLAG = "SPLATCAL_NUMBA"


def _env_wants_numba() -> bool:
    return os.environ.get(_ENV_FLAG, "1").strip().lower() not in ("0", "false", "off", "no")


_active = "numba" if (_kernels_numba is not None and _env_wants_numba()) else "numpy"


def get_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and _kernels_numba is None:
        raise RuntimeError("numba is not available")
    _active = name


def kernels(name: str | None = None):
    name = name or _active
    return _kernels_numba if name == "numba" else _kernels_numpy


def set_num_threads(n: int) -> int:
    """Cap numba worker threads; returns the count actually in effect."""
    if _kernels_numba is None:
        return 1
    import numba

    limit = numba.config.NUMBA_NUM_THREADS
    if n > limit:
        log.info("requested %d threads, numba limit is %d", n, limit)
    n = max(1, min(n, limit))
    numba.set_num_threads(n)
    return n
