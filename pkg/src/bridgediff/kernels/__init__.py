"""Kernel backend selection.

The compiled extension is preferred when present; the NumPy reference
implementation is the fallback. Override with BRIDGEDIFF_BACKEND=reference
or BRIDGEDIFF_BACKEND=native, or at runtime via :func:`set_backend`.
"""

from __future__ import annotations

import os

from . import reference

try:
    from . import _native as native
except ImportError:
    native = None

_requested = os.environ.get("BRIDGEDIFF_BACKEND", "")
if _requested == "reference":
    _active = reference
elif _requested == "native":
    if native is None:
        raise ImportError("BRIDGEDIFF_BACKEND=native but the extension is not built")
    _active = native
else:
    _active = native if native is not None else reference


def set_backend(name: str) -> None:
    global _active
    if name == "reference":
        _active = reference
    elif name == "native":
        if native is None:
            raise ValueError("native backend not available (extension not built)")
        _active = native
    else:
        raise ValueError(f"unknown backend {name!r}")


def backend_name() -> str:
    return _active.NAME


def conv2d_forward(x, w, b, pad):
    return _active.conv2d_forward(x, w, b, pad)


def conv2d_grad_input(gout, w, pad):
    return _active.conv2d_grad_input(gout, w, pad)


def conv2d_grad_weight(x, gout, pad, kh, kw):
    return _active.conv2d_grad_weight(x, gout, pad, kh, kw)


def bilinear_forward(x, oh, ow):
    return _active.bilinear_forward(x, oh, ow)


def bilinear_grad_input(gout, ih, iw):
    return _active.bilinear_grad_input(gout, ih, iw)
