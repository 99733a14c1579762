"""Hot inner loops: bilinear sampling, deformable aggregation, row-wise linear
maps and voxel ray traversal.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_pykernels`` is selected. Set
``SPARSEVOX_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels as python

try:
    if os.environ.get("SPARSEVOX_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python kernels forced")
    from . import _ckernels as compiled
except ImportError:
    compiled = None

backend = compiled if compiled is not None else python
BACKEND = backend.NAME

bilinear_sample = backend.bilinear_sample
bilinear_backward = backend.bilinear_backward
deform_aggregate = backend.deform_aggregate
deform_aggregate_backward = backend.deform_aggregate_backward
linear_rows = backend.linear_rows
raycast = backend.raycast

__all__ = [
    "BACKEND", "backend", "compiled", "python",
    "bilinear_sample", "bilinear_backward", "deform_aggregate",
    "deform_aggregate_backward", "linear_rows", "raycast",
]
