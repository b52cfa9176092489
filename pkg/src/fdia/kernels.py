"""Select the integration kernel: compiled core when built, numpy otherwise.

Set ``FDIA_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _integrate_py

try:
    if os.environ.get("FDIA_PURE_PYTHON"):
        raise ImportError("pure-python kernel requested")
    from . import _integrate as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_KERNELS = {"python": _integrate_py.integrate_chunk}
if _compiled is not None:
    _KERNELS["cython"] = _compiled.integrate_chunk


def get_kernel(backend: str | None = None):
    """Return ``integrate_chunk`` for ``backend`` (default: best available)."""
    name = backend or BACKEND
    if name not in _KERNELS:
        raise ValueError(f"kernel backend {name!r} unavailable (have {sorted(_KERNELS)})")
    return _KERNELS[name]


def available_backends() -> list[str]:
    return sorted(_KERNELS)
