"""Hot inner loops with a compiled backend and a numpy fallback.

The Cython extension ``_core`` is used when it was built (``pip install -e .``
compiles it); otherwise the pure numpy module is loaded. Set
``MPHPE_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback
if os.environ.get("MPHPE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback


def _c(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def rasterize_triangles(image, inv_depth, verts, depth, colors, impl=None):
    """Z-buffered flat triangle fill into ``image`` (modified in place)."""
    mod = impl or _impl
    if verts.shape[0] == 0:
        return 0
    return mod.rasterize_triangles(image, inv_depth, _c(verts, np.float64),
                                   _c(depth, np.float64), _c(colors, np.uint8))


def box_iou_matrix(a, b, impl=None):
    mod = impl or _impl
    return mod.box_iou_matrix(_c(np.reshape(a, (-1, 4)), np.float64), _c(np.reshape(b, (-1, 4)), np.float64))


def nms(boxes, scores, iou_threshold, impl=None):
    mod = impl or _impl
    return mod.nms(_c(np.reshape(boxes, (-1, 4)), np.float64), _c(scores, np.float64), float(iou_threshold))


def greedy_match(iou, threshold, impl=None):
    mod = impl or _impl
    iou = _c(iou, np.float64)
    if iou.ndim != 2:
        raise ValueError(f"iou must be 2-D, got shape {iou.shape}")
    return mod.greedy_match(iou, float(threshold))


def available_backends():
    mods = {"python": _fallback}
    try:
        from . import _core

        mods["cython"] = _core
    except ImportError:
        pass
    return mods
