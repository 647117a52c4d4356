"""Tiny ViT encoders: a bias-adaptable image encoder and a label encoder.

Both encoders share one architecture and tap token grids at four depths.
The image encoder keeps no bias parameters of its own: every additive bias
(patch projection, attention and MLP projections, layer-norm shifts) is
looked up per task channel in a BiasBank, so adapting a task touches only
its bank entry. The label encoder owns a full private parameter set and is
shared across all tasks; it sees one label channel at a time.

Batched forward passes run on a (C, B, M, d) layout — C task channels of a
batch of B images each — with per-channel biases broadcast from (C, 1, 1, n).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import DataError, ShapeError

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    patch: int = 8
    dim: int = 64
    depth: int = 8
    heads: int = 4
    mlp_ratio: int = 2
    taps: tuple[int, ...] = (2, 4, 6, 8)
    max_grid: int = 8               # largest h or w in patches

    def __post_init__(self):
        if len(self.taps) != 4 or list(self.taps) != sorted(set(self.taps)):
            raise DataError("taps must be 4 strictly increasing depths")
        if self.taps[-1] != self.depth:
            raise DataError("last tap must equal encoder depth")
        if self.dim % self.heads:
            raise DataError("dim must be divisible by heads")


@dataclass
class TokenPyramid:
    """Per-level M×d token matrices tapped at four encoder depths."""
    levels: list[Tensor]
    h: int
    w: int

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ShapeError(f"expected 4 levels, got {len(self.levels)}")
        shapes = {lv.shape[-2:] for lv in self.levels}
        if len(shapes) != 1:
            raise ShapeError(f"levels disagree on (M, d): {sorted(shapes)}")
        if self.m != self.h * self.w:
            raise ShapeError(f"M={self.m} but grid is {self.h}x{self.w}")

    @property
    def m(self) -> int:
        return self.levels[0].shape[-2]

    @property
    def d(self) -> int:
        return self.levels[0].shape[-1]


def bias_sites(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """All additive-bias sites of one encoder, in forward order."""
    hidden = cfg.dim * cfg.mlp_ratio
    sites = [("patch.b", (cfg.dim,))]
    for i in range(1, cfg.depth + 1):
        sites += [
            (f"blk{i}.ln1.b", (cfg.dim,)),
            (f"blk{i}.attn.q.b", (cfg.dim,)),
            (f"blk{i}.attn.k.b", (cfg.dim,)),
            (f"blk{i}.attn.v.b", (cfg.dim,)),
            (f"blk{i}.attn.o.b", (cfg.dim,)),
            (f"blk{i}.ln2.b", (cfg.dim,)),
            (f"blk{i}.mlp.fc1.b", (hidden,)),
            (f"blk{i}.mlp.fc2.b", (cfg.dim,)),
        ]
    return sites


def init_vit_params(ps: ParamSet, prefix: str, cfg: EncoderConfig,
                    in_features: int, rng: np.random.Generator,
                    with_biases: bool) -> None:
    """Register one encoder's parameters under `prefix.`.

    with_biases=False registers only the shared (non-bias) tensors; the
    biases then live in a BiasBank.
    """
    def normal(shape):
        return (rng.standard_normal(shape) * INIT_STD).astype(np.float32)

    hidden = cfg.dim * cfg.mlp_ratio
    ps.add(f"{prefix}.patch.w", normal((in_features, cfg.dim)))
    ps.add(f"{prefix}.pos", normal((cfg.max_grid, cfg.max_grid, cfg.dim)))
    for i in range(1, cfg.depth + 1):
        blk = f"{prefix}.blk{i}"
        ps.add(f"{blk}.ln1.g", np.ones(cfg.dim, np.float32))
        ps.add(f"{blk}.ln2.g", np.ones(cfg.dim, np.float32))
        for proj in ("q", "k", "v", "o"):
            ps.add(f"{blk}.attn.{proj}.w", normal((cfg.dim, cfg.dim)))
        ps.add(f"{blk}.mlp.fc1.w", normal((cfg.dim, hidden)))
        ps.add(f"{blk}.mlp.fc2.w", normal((hidden, cfg.dim)))
    if with_biases:
        for site, shape in bias_sites(cfg):
            ps.add(f"{prefix}.{site}", np.zeros(shape, np.float32))


class BiasBank:
    """Per-task-channel bias vectors for the image encoder (θ_T).

    Entries are ParamSet tensors named ``bias/<task_key>/<site>``. The bank
    also keeps a non-learnable template (the encoder's initial bias values)
    used for copy initialization of new entries.
    """

    def __init__(self, ps: ParamSet, cfg: EncoderConfig):
        self._ps = ps
        self._sites = bias_sites(cfg)
        self._keys: list[str] = []
        self._template = {site: np.zeros(shape, np.float32)
                          for site, shape in self._sites}

    @property
    def sites(self) -> list[tuple[str, tuple[int, ...]]]:
        return list(self._sites)

    def keys(self) -> list[str]:
        return list(self._keys)

    def __contains__(self, key: str) -> bool:
        return key in self._keys

    def param_names(self, key: str) -> list[str]:
        return [f"bias/{key}/{site}" for site, _ in self._sites]

    def register(self, key: str, init: str = "template") -> None:
        """init: 'template' (copy of shared init), 'zeros', or 'mean'
        (element-wise mean over already registered entries)."""
        if key in self._keys:
            raise DataError(f"bias entry already registered: {key}")
        if "/" in key:
            raise DataError(f"task key may not contain '/': {key!r}")
        if init == "mean" and not self._keys:
            raise DataError("mean initialization needs existing entries")
        for site, shape in self._sites:
            if init == "zeros":
                value = np.zeros(shape, np.float32)
            elif init == "template":
                value = self._template[site].copy()
            elif init == "mean":
                value = np.mean([self._ps[f"bias/{k}/{site}"].data
                                 for k in self._keys], axis=0).astype(np.float32)
            else:
                raise DataError(f"unknown bias init {init!r}")
            self._ps.add(f"bias/{key}/{site}", value, task_specific=True)
        self._keys.append(key)

    def rebind(self, ps: ParamSet) -> "BiasBank":
        """Same keys and sites, viewed through another ParamSet."""
        clone = BiasBank.__new__(BiasBank)
        clone._ps = ps
        clone._sites = list(self._sites)
        clone._keys = list(self._keys)
        clone._template = {k: v.copy() for k, v in self._template.items()}
        return clone

    def adopt(self, key: str) -> None:
        """Record a key whose parameters were loaded from a checkpoint."""
        if key in self._keys:
            raise DataError(f"bias entry already registered: {key}")
        for name in self.param_names(key):
            if name not in self._ps:
                raise DataError(f"checkpoint lacks bias tensor {name}")
        self._keys.append(key)

    def entry(self, key: str) -> dict[str, np.ndarray]:
        if key not in self._keys:
            raise DataError(f"unregistered task key: {key}")
        return {site: self._ps[f"bias/{key}/{site}"].data.copy()
                for site, _ in self._sites}

    def set_entry(self, key: str, values: dict[str, np.ndarray]) -> None:
        for site, _ in self._sites:
            dst = self._ps[f"bias/{key}/{site}"]
            dst.data = np.ascontiguousarray(values[site], dtype=np.float32)

    def stacked(self, keys: list[str]) -> dict[str, Tensor]:
        """Per-site (C, 1, 1, n) tensors for a list of C task keys."""
        missing = [k for k in keys if k not in self._keys]
        if missing:
            raise DataError(f"unregistered task keys: {missing}")
        out = {}
        for site, shape in self._sites:
            stk = ad.stack([self._ps[f"bias/{k}/{site}"] for k in keys], axis=0)
            out[site] = ad.reshape(stk, (len(keys), 1, 1, shape[0]))
        return out


# ---------------------------------------------------------------------------
# forward passes


def _image_tokens(images: np.ndarray, patch: int, dtype) -> Tensor:
    """(B, 3, H, W) -> (1, B, M, 3*patch*patch) raster-ordered patches."""
    b, c, hh, ww = images.shape
    if hh % patch or ww % patch:
        raise ShapeError(f"spatial dims {hh}x{ww} not divisible by patch {patch}")
    h, w = hh // patch, ww // patch
    t = ad.Tensor(images, dtype=dtype)
    t = ad.reshape(t, (b, c, h, patch, w, patch))
    t = ad.transpose(t, (0, 2, 4, 1, 3, 5))
    return ad.reshape(t, (1, b, h * w, c * patch * patch))


def _label_tokens(labels: np.ndarray, patch: int, dtype) -> Tensor:
    """(C, B, H, W) -> (C, B, M, patch*patch)."""
    cc, b, hh, ww = labels.shape
    if hh % patch or ww % patch:
        raise ShapeError(f"spatial dims {hh}x{ww} not divisible by patch {patch}")
    h, w = hh // patch, ww // patch
    t = ad.Tensor(labels, dtype=dtype)
    t = ad.reshape(t, (cc, b, h, patch, w, patch))
    t = ad.transpose(t, (0, 1, 2, 4, 3, 5))
    return ad.reshape(t, (cc, b, h * w, patch * patch))


def _attention(x: Tensor, ps: ParamSet, blk: str, bias, cfg: EncoderConfig) -> Tensor:
    c, b, m, d = x.shape
    dh = cfg.dim // cfg.heads

    def heads(t):
        t = ad.reshape(t, (c, b, m, cfg.heads, dh))
        return ad.transpose(t, (0, 1, 3, 2, 4))

    q = heads(ad.linear(x, ps[f"{blk}.attn.q.w"], bias("attn.q.b")))
    k = heads(ad.linear(x, ps[f"{blk}.attn.k.w"], bias("attn.k.b")))
    v = heads(ad.linear(x, ps[f"{blk}.attn.v.w"], bias("attn.v.b")))
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 2, 4, 3))) * (1.0 / np.sqrt(dh))
    out = ad.matmul(ad.softmax_last(scores), v)
    out = ad.reshape(ad.transpose(out, (0, 1, 3, 2, 4)), (c, b, m, d))
    return ad.linear(out, ps[f"{blk}.attn.o.w"], bias("attn.o.b"))


def _mlp(x: Tensor, ps: ParamSet, blk: str, bias) -> Tensor:
    h = ad.gelu(ad.linear(x, ps[f"{blk}.mlp.fc1.w"], bias("mlp.fc1.b")))
    return ad.linear(h, ps[f"{blk}.mlp.fc2.w"], bias("mlp.fc2.b"))


def vit_forward(tokens: Tensor, ps: ParamSet, prefix: str, bias_of,
                cfg: EncoderConfig, h: int, w: int) -> list[Tensor]:
    """Run the block stack over (C, B, M, in) patch tokens; returns taps.

    bias_of(site) must yield a tensor broadcastable against (C, B, M, n).
    """
    if h > cfg.max_grid or w > cfg.max_grid:
        raise ShapeError(f"grid {h}x{w} exceeds max_grid {cfg.max_grid}")
    x = ad.linear(tokens, ps[f"{prefix}.patch.w"], bias_of("patch.b"))
    pos = ad.reshape(ad.slice2d(ps[f"{prefix}.pos"], h, w), (1, 1, h * w, cfg.dim))
    x = x + pos
    taps = []
    for i in range(1, cfg.depth + 1):
        blk = f"{prefix}.blk{i}"
        x = x + _attention(
            ad.layernorm(x, ps[f"{blk}.ln1.g"], bias_of(f"blk{i}.ln1.b")),
            ps, blk, lambda name, i=i: bias_of(f"blk{i}.{name}"), cfg)
        x = x + _mlp(
            ad.layernorm(x, ps[f"{blk}.ln2.g"], bias_of(f"blk{i}.ln2.b")),
            ps, blk, lambda name, i=i: bias_of(f"blk{i}.{name}"))
        if i in cfg.taps:
            taps.append(x)
    return taps


def encode_image_batch(ps: ParamSet, bank: BiasBank, images: np.ndarray,
                       task_keys: list[str], cfg: EncoderConfig) -> list[Tensor]:
    """(B, 3, H, W) images under C task keys -> 4 levels of (C, B, M, d)."""
    tokens = _image_tokens(np.asarray(images), cfg.patch,
                           ps["img.patch.w"].dtype)
    h = images.shape[2] // cfg.patch
    w = images.shape[3] // cfg.patch
    stacked = bank.stacked(task_keys)
    return vit_forward(tokens, ps, "img", lambda site: stacked[site], cfg, h, w)


def encode_label_batch(ps: ParamSet, labels: np.ndarray,
                       cfg: EncoderConfig) -> list[Tensor]:
    """(C, B, H, W) single-channel labels -> 4 levels of (C, B, M, d)."""
    tokens = _label_tokens(np.asarray(labels), cfg.patch,
                           ps["lbl.patch.w"].dtype)
    h = labels.shape[2] // cfg.patch
    w = labels.shape[3] // cfg.patch
    return vit_forward(tokens, ps, "lbl", lambda site: ps[f"lbl.{site}"], cfg, h, w)


def encode_image(ps: ParamSet, bank: BiasBank, image: np.ndarray,
                 task_key: str, cfg: EncoderConfig) -> TokenPyramid:
    """Single image, single task key -> TokenPyramid of (M, d) levels."""
    levels = encode_image_batch(ps, bank, image[None], [task_key], cfg)
    h, w = image.shape[1] // cfg.patch, image.shape[2] // cfg.patch
    return TokenPyramid([ad.reshape(lv, lv.shape[2:]) for lv in levels], h, w)


def encode_label(ps: ParamSet, label: np.ndarray, cfg: EncoderConfig) -> TokenPyramid:
    levels = encode_label_batch(ps, label[None, None], cfg)
    h, w = label.shape[0] // cfg.patch, label.shape[1] // cfg.patch
    return TokenPyramid([ad.reshape(lv, lv.shape[2:]) for lv in levels], h, w)


def bias_parameter_fraction(ps: ParamSet, bank: BiasBank) -> float:
    """|θ_T| for one task over |θ| + |θ_T| of the image encoder."""
    per_task = sum(int(np.prod(shape)) for _, shape in bank.sites)
    shared = sum(t.size for name, t in ps.items() if name.startswith("img."))
    return per_task / (per_task + shared)
