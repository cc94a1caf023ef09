"""Kernel backend selection.

The compiled Cython extension is preferred when it imported cleanly; the
numpy module is the fallback. ``TRIVIT_KERNELS=python`` or
``TRIVIT_KERNELS=compiled`` forces a backend (the latter raises if the
extension is unavailable, so CI can assert it was built).
"""

import os

from trivit.numerics.kernels import pykernels

_FORCE = os.environ.get("TRIVIT_KERNELS", "").strip().lower()

_compiled = None
if _FORCE not in ("python", "py"):
    try:
        from trivit.numerics.kernels import _ckernels as _compiled
    except ImportError:
        if _FORCE in ("compiled", "c"):
            raise ImportError(
                "TRIVIT_KERNELS=compiled but the _ckernels extension is not "
                "built; run `pip install -e . --no-build-isolation`"
            )

active = _compiled if _compiled is not None else pykernels
BACKEND = "compiled" if _compiled is not None else "python"

softmax_forward = active.softmax_forward
softmax_backward = active.softmax_backward
layer_norm_forward = active.layer_norm_forward
layer_norm_backward = active.layer_norm_backward
gelu_forward = active.gelu_forward
gelu_backward = active.gelu_backward
rotate_plane = active.rotate_plane


def backend_name():
    return BACKEND


def available_backends():
    names = ["python"]
    if _compiled is not None:
        names.append("compiled")
    return names
