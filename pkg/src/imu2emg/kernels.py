"""Kernel dispatch: compiled extension when importable, else pure Python.

Set ``IMU2EMG_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

if os.environ.get("IMU2EMG_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

sosfilt = _impl.sosfilt

__all__ = ["BACKEND", "sosfilt"]
