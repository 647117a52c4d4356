"""Convolution kernel backend selection.

The compiled extension (`vtm.kernels._native`, built from _native.pyx) is
used when importable; otherwise the numpy fallback in `reference` takes
over. Set VTM_KERNELS=python or VTM_KERNELS=native to force a choice;
forcing `native` raises if the extension is missing.
"""

from __future__ import annotations

import os

from . import reference

_forced = os.environ.get("VTM_KERNELS", "").strip().lower()

if _forced == "python":
    _impl = reference
    _backend = "python"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]
        _backend = "native"
    except ImportError:
        if _forced == "native":
            raise ImportError(
                "VTM_KERNELS=native but vtm.kernels._native is not built; "
                "reinstall with the extension or unset VTM_KERNELS"
            )
        _impl = reference
        _backend = "python"


def backend_name() -> str:
    return _backend


conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
