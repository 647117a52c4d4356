"""Multi-scale label decoder.

The four matched token levels are reassembled into spatial grids,
projected to a common width, brought to a resolution ladder (an increasing
ladder from the deepest to the shallowest level), then fused coarse-to-fine
with residual convolution units and progressive 2x upsampling, ending in a
3x3 head. Finalization applies a sigmoid always and, for binary channels at
report stage, a fixed 0.1 threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .encoders import TokenPyramid
from .errors import DataError, NumericError, ShapeError

BINARY_THRESHOLD = 0.1
_ALLOWED_SCALES = (4.0, 2.0, 1.0, 0.5)


@dataclass(frozen=True)
class DecoderConfig:
    scales: tuple[float, ...] = (4.0, 2.0, 1.0, 0.5)   # shallow -> deep
    width: int = 64
    head_width: int = 32

    def __post_init__(self):
        if len(self.scales) != 4:
            raise DataError("need one scale per pyramid level")
        for s in self.scales:
            if s not in _ALLOWED_SCALES:
                raise DataError(f"unsupported reassembly scale {s}")
        for a, b in zip(self.scales, self.scales[1:]):
            if a != 2 * b:
                raise DataError("consecutive level scales must halve "
                                "(resolution strictly increases toward "
                                "the shallowest level)")


def init_decoder_params(ps: ParamSet, dim: int, dcfg: DecoderConfig,
                        rng: np.random.Generator) -> None:
    def conv(name, cout, cin, k):
        std = np.sqrt(2.0 / (cin * k * k))
        ps.add(f"{name}.w", (rng.standard_normal((cout, cin, k, k)) * std)
               .astype(np.float32))
        ps.add(f"{name}.b", np.zeros(cout, np.float32))

    w = dcfg.width
    for lv, scale in enumerate(dcfg.scales, start=1):
        conv(f"dec.lv{lv}.proj", w, dim, 1)
        ups = int(np.log2(scale)) if scale > 1 else 0
        for u in range(1, ups + 1):
            conv(f"dec.lv{lv}.up{u}", 4 * w, w, 1)   # depth-to-space x2
        if scale == 0.5:
            conv(f"dec.lv{lv}.down", w, w, 3)
    for lv in range(1, 5):
        conv(f"dec.fuse{lv}.c1", w, w, 3)
        conv(f"dec.fuse{lv}.c2", w, w, 3)
    conv("dec.head.c1", dcfg.head_width, w, 3)
    conv("dec.head.c2", 1, dcfg.head_width, 3)


def _depth_to_space2(y: Tensor) -> Tensor:
    """(B, 4c, h, w) -> (B, c, 2h, 2w); the k=2, s=2 transposed-conv layout."""
    b, c4, h, w = y.shape
    c = c4 // 4
    y = ad.reshape(y, (b, c, 2, 2, h, w))
    y = ad.transpose(y, (0, 1, 4, 2, 5, 3))
    return ad.reshape(y, (b, c, 2 * h, 2 * w))


_BILINEAR_CACHE: dict[tuple[int, type], np.ndarray] = {}


def _bilinear_matrix(n: int, dtype) -> np.ndarray:
    """(2n, n) interpolation matrix: half-pixel centers, edges clamped."""
    key = (n, np.dtype(dtype).type)
    if key not in _BILINEAR_CACHE:
        u = np.zeros((2 * n, n))
        for i in range(2 * n):
            src = (i + 0.5) / 2.0 - 0.5
            i0 = int(np.floor(src))
            frac = src - i0
            u[i, min(max(i0, 0), n - 1)] += 1.0 - frac
            u[i, min(max(i0 + 1, 0), n - 1)] += frac
        _BILINEAR_CACHE[key] = u.astype(dtype)
    return _BILINEAR_CACHE[key]


def bilinear_up2(x: Tensor) -> Tensor:
    """2x bilinear upsample of (..., h, w) via constant matrices."""
    h, w = x.shape[-2:]
    uh = ad.Tensor(_bilinear_matrix(h, x.dtype))
    uw = ad.Tensor(_bilinear_matrix(w, x.dtype).T)
    return ad.matmul(ad.matmul(uh, x), uw)


def reassemble_level(ps: ParamSet, tokens: Tensor, h: int, w: int, lv: int,
                     dcfg: DecoderConfig) -> Tensor:
    """(B, M, d) tokens -> (B, width, h*scale, w*scale) feature map."""
    b, m, d = tokens.shape
    if m != h * w:
        raise ShapeError(f"M={m} does not match grid {h}x{w}")
    x = ad.transpose(ad.reshape(tokens, (b, h, w, d)), (0, 3, 1, 2))
    x = ad.conv2d(x, ps[f"dec.lv{lv}.proj.w"], ps[f"dec.lv{lv}.proj.b"])
    scale = dcfg.scales[lv - 1]
    ups = int(np.log2(scale)) if scale > 1 else 0
    for u in range(1, ups + 1):
        x = _depth_to_space2(ad.conv2d(x, ps[f"dec.lv{lv}.up{u}.w"],
                                       ps[f"dec.lv{lv}.up{u}.b"]))
    if scale == 0.5:
        if h % 2 or w % 2:
            raise ShapeError(f"token grid {h}x{w} must be even for the "
                             "half-scale level")
        x = ad.conv2d(x, ps[f"dec.lv{lv}.down.w"], ps[f"dec.lv{lv}.down.b"],
                      stride=2, pad=1)
    return x


def _rcu(ps: ParamSet, x: Tensor, name: str) -> Tensor:
    h = ad.conv2d(ad.gelu(x), ps[f"dec.{name}.c1.w"], ps[f"dec.{name}.c1.b"],
                  pad=1)
    h = ad.conv2d(ad.gelu(h), ps[f"dec.{name}.c2.w"], ps[f"dec.{name}.c2.b"],
                  pad=1)
    return x + h


def decode_batch(ps: ParamSet, levels: list[Tensor], h: int, w: int,
                 out_hw: tuple[int, int], dcfg: DecoderConfig) -> Tensor:
    """Fuse 4 levels of (C, B, M, d) into raw maps (C, B, H, W)."""
    if len(levels) != 4:
        raise ShapeError(f"expected 4 levels, got {len(levels)}")
    c, b, m, d = levels[0].shape
    for t in levels:
        if t.shape != (c, b, m, d):
            raise ShapeError("pyramid levels disagree on shape")
    feats = [reassemble_level(ps, ad.reshape(levels[i], (c * b, m, d)),
                              h, w, i + 1, dcfg)
             for i in range(4)]
    x = _rcu(ps, feats[3], "fuse4")
    for lv in (3, 2, 1):
        x = bilinear_up2(x) + feats[lv - 1]
        x = _rcu(ps, x, f"fuse{lv}")
    while x.shape[-2] < out_hw[0] and x.shape[-1] < out_hw[1]:
        x = bilinear_up2(x)
    if x.shape[-2:] != tuple(out_hw):
        raise ShapeError(f"decoder reached {x.shape[-2:]}, target {out_hw}")
    x = ad.conv2d(x, ps["dec.head.c1.w"], ps["dec.head.c1.b"], pad=1)
    x = ad.conv2d(ad.gelu(x), ps["dec.head.c2.w"], ps["dec.head.c2.b"], pad=1)
    return ad.reshape(x, (c, b) + tuple(out_hw))


def decode(ps: ParamSet, pyr: TokenPyramid, dcfg: DecoderConfig,
           out_hw: tuple[int, int] | None = None) -> Tensor:
    """Single pyramid -> raw (H, W) map. Default target is 8x the grid
    (the patch-8 contract)."""
    if out_hw is None:
        out_hw = (pyr.h * 8, pyr.w * 8)
    levels = [ad.reshape(lv, (1, 1) + lv.shape) for lv in pyr.levels]
    raw = decode_batch(ps, levels, pyr.h, pyr.w, out_hw, dcfg)
    return ad.reshape(raw, out_hw)


def finalize(raw: Tensor, label_kind: str, stage: str):
    """Sigmoid always; binary channels at report stage threshold at 0.1.

    Returns a Tensor at loss stage (graph preserved) and a plain float32
    array at report stage.
    """
    if not np.isfinite(raw.data).all():
        raise NumericError("non-finite raw decoder output")
    if stage not in ("loss", "report"):
        raise DataError(f"unknown finalize stage {stage!r}")
    prob = ad.sigmoid(raw)
    if stage == "loss":
        return prob
    out = prob.data.copy()
    if label_kind == "binary":
        return (out >= BINARY_THRESHOLD).astype(np.float32)
    return out
