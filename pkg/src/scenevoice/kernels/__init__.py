"""Hot numeric kernels with a compiled core and a pure numpy fallback.

The compiled module is preferred when it imported cleanly; set the environment
variable ``SCENEVOICE_PURE=1`` (before import) or call :func:`set_backend` to
force the numpy implementation.  Both backends share one contract and agree to
floating-point roundoff, so everything above this layer is backend-agnostic.
"""

from __future__ import annotations

import os

from . import _numpy

_BACKENDS = {"numpy": _numpy}

try:
    from . import _fast

    _BACKENDS["cython"] = _fast
except ImportError:  # extension not built; numpy fallback stays active
    _fast = None

_active = "numpy"

cosine_forward = _numpy.cosine_forward
cosine_backward = _numpy.cosine_backward
softmax_forward = _numpy.softmax_forward
softmax_backward = _numpy.softmax_backward


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def get_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    """Route the kernel entry points through the named backend."""
    global _active, cosine_forward, cosine_backward, softmax_forward, softmax_backward
    try:
        impl = _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}") from None
    cosine_forward = impl.cosine_forward
    cosine_backward = impl.cosine_backward
    softmax_forward = impl.softmax_forward
    softmax_backward = impl.softmax_backward
    _active = name


if not os.environ.get("SCENEVOICE_PURE") and "cython" in _BACKENDS:
    set_backend("cython")
