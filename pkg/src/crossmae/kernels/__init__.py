"""Kernel backend selection.

The compiled extension is used when it imported cleanly; set CROSSMAE_NO_EXT=1
to force the numpy fallback (used by the parity tests and the benchmark).
"""
import os

from . import fallback

if os.environ.get("CROSSMAE_NO_EXT"):
    _impl = fallback
    BACKEND = "fallback"
else:
    try:
        from . import _ckern as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = fallback
        BACKEND = "fallback"

gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
adamw_update = _impl.adamw_update
