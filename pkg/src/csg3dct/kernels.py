"""Backend selection for the sliding-window kernels.

The compiled extension is used when importable; set ``CSG3DCT_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

_impl = None
BACKEND = "python"

if os.environ.get("CSG3DCT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = None

if _impl is None:
    from . import _kernels_py as _impl

_NAMES = ("im2col3d", "col2im3d", "maxpool3d_forward", "maxpool3d_backward")


def _bind(impl) -> None:
    globals().update({name: getattr(impl, name) for name in _NAMES})


def use_backend(name: str) -> str:
    """Switch to ``"cython"`` or ``"python"`` kernels; returns the previous backend."""
    global BACKEND
    if name == "cython":
        from . import _kernels as impl
    elif name == "python":
        from . import _kernels_py as impl
    else:
        raise ValueError(f"unknown backend {name!r}")
    previous, BACKEND = BACKEND, name
    _bind(impl)
    return previous


_bind(_impl)

__all__ = ["BACKEND", "use_backend", *_NAMES]
