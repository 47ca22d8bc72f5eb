"""Hot numeric kernels: compiled when available, numpy otherwise.

The compiled module is picked at import time. Set ``SEMIMATCH_PURE_PYTHON=1``
to force the numpy implementations (the benchmark and the parity tests use
:func:`use_backend` to switch at runtime).
"""
import os

from . import _fallback

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _fallback}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels

_NAMES = ("conv2d_forward", "conv2d_backward", "bilinear_gather", "bilinear_scatter", "hard_argmax")


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def use_backend(name: str) -> None:
    """Bind the kernel entry points of this module to backend ``name``."""
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    mod = _BACKENDS[name]
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(mod, fn)
    g["BACKEND"] = name


def current_backend() -> str:
    return BACKEND


BACKEND = "python"
if _ckernels is not None and os.environ.get("SEMIMATCH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    use_backend("compiled")
else:
    use_backend("python")
