"""Pure-numpy fallback for the convolution hot kernels.

Forward and weight-gradient use stride-tricked windows plus tensordot
(BLAS); the input-gradient is expressed as a forward convolution of the
zero-dilated output gradient with the flipped kernel.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """x: (B, C, H, W), w: (O, C, kh, kw) -> (B, O, Ho, Wo)."""
    win = _windows(x, w.shape[2], w.shape[3], stride, pad)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward_weight(x: np.ndarray, gy: np.ndarray, w_shape: tuple,
                           stride: int = 1, pad: int = 0) -> np.ndarray:
    kh, kw = w_shape[2], w_shape[3]
    win = _windows(x, kh, kw, stride, pad)
    gw = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
    return np.ascontiguousarray(gw)


def conv2d_backward_input(gy: np.ndarray, w: np.ndarray, x_shape: tuple,
                          stride: int = 1, pad: int = 0) -> np.ndarray:
    b, _, h, wdt = x_shape
    _, c, kh, kw = w.shape
    assert kh == kw, "square kernels only"
    if stride > 1:
        _, o, ho, wo = gy.shape
        dil = np.zeros((b, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=gy.dtype)
        dil[:, :, ::stride, ::stride] = gy
        gy = dil
    # full correlation of the dilated grad with the flipped kernel gives the
    # gradient over padded coordinates; strided tails the forward never read
    # stay zero.
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))  # (C, O, kh, kw)
    gp = conv2d_forward(gy, wf, stride=1, pad=kh - 1)
    full = np.zeros((b, c, h + 2 * pad, wdt + 2 * pad), dtype=gy.dtype)
    full[:, :, :gp.shape[2], :gp.shape[3]] = gp
    return np.ascontiguousarray(full[:, :, pad:pad + h, pad:pad + wdt])
