"""Stepping-kernel backend selection.

The compiled Cython kernel and the pure-numpy kernel implement the same
contract (see pure.evolve_steps).  The compiled kernel is at least as
fast at every point count (benchmarks/bench_kernels.py), so it is used
whenever the extension built.  FLOWLAB_KERNEL overrides:

    FLOWLAB_KERNEL=compiled   require the extension (error if missing)
    FLOWLAB_KERNEL=pure       force the numpy backend
    FLOWLAB_KERNEL=auto       compiled if available (default)
"""

from __future__ import annotations

import os

from . import pure

SCHEME_HEUN = pure.SCHEME_HEUN
SCHEME_ITO_EULER = pure.SCHEME_ITO_EULER

try:
    from . import _core
    HAVE_COMPILED = True
except ImportError:
    _core = None
    HAVE_COMPILED = False

_mode = os.environ.get("FLOWLAB_KERNEL", "auto").lower()
if _mode not in ("auto", "compiled", "pure"):
    raise RuntimeError(f"FLOWLAB_KERNEL must be auto|compiled|pure, got {_mode!r}")
if _mode == "compiled" and not HAVE_COMPILED:
    raise RuntimeError("FLOWLAB_KERNEL=compiled but the extension is not built")

BACKEND = "pure" if _mode == "pure" or not HAVE_COMPILED else "compiled"
_impl = pure if BACKEND == "pure" else _core


def backend_name() -> str:
    return BACKEND


def evolve_steps(modes2pi, cos_coef, sin_coef, offsets, lift, frames, dW, dt,
                 scheme, rec_lift=None, rec_frames=None) -> int:
    """Advance lifted points (and optional frames) through len(dW) steps.

    Both backends mutate lift/frames in place and return -1 on success or
    the first non-finite step index.
    """
    return _impl.evolve_steps(modes2pi, cos_coef, sin_coef, offsets, lift,
                              frames, dW, dt, scheme, rec_lift, rec_frames)
