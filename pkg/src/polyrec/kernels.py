"""Kernel dispatch: compiled extension when importable, numpy fallback otherwise.

Set ``POLYREC_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
topk_select = _pykernels.topk_select
masked_mse_grad = _pykernels.masked_mse_grad
adamw_update = _pykernels.adamw_update

if os.environ.get("POLYREC_PURE_PYTHON", "") != "1":
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        topk_select = _kernels.topk_select
        masked_mse_grad = _kernels.masked_mse_grad
        adamw_update = _kernels.adamw_update

__all__ = ["BACKEND", "topk_select", "masked_mse_grad", "adamw_update"]
