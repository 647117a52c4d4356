"""Hierarchical token matching.

Query label tokens are inferred per hierarchy level as attention-weighted
combinations of support label tokens, with similarity measured between
query and support *image* tokens:

    o_h  = Softmax(q w_h^Q (k w_h^K)^T / sqrt(d_H)) v w_h^V
    out  = o + GELU(o w^O),   o = Concat(o_1 .. o_H)

with layer normalization before each input projection (queries and keys
share one parameter set, values have their own), dropout on the attention
weights in train mode, and a final layer normalization on the output. The
residual form requires H*d_H == d. A diagnostic configuration can disable
the normalizations and the residual/projection term, making each output
token an exact convex combination of support label tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .encoders import TokenPyramid
from .errors import DataError, ShapeError

N_LEVELS = 4


@dataclass(frozen=True)
class MatchingConfig:
    heads: int = 4
    head_dim: int | None = None     # defaults to dim // heads
    dropout: float = 0.1
    layernorm: bool = True
    residual: bool = True

    def resolve_head_dim(self, dim: int) -> int:
        if self.head_dim is not None:
            return self.head_dim
        if dim % self.heads:
            raise DataError(f"dim {dim} not divisible by {self.heads} heads")
        return dim // self.heads


def init_matching_params(ps: ParamSet, dim: int, mcfg: MatchingConfig,
                         rng: np.random.Generator) -> None:
    dh = mcfg.resolve_head_dim(dim)
    inner = mcfg.heads * dh
    if mcfg.residual and inner != dim:
        raise DataError("residual matching needs heads*head_dim == dim")
    for lv in range(1, N_LEVELS + 1):
        p = f"match.lv{lv}"
        for proj in ("q", "k", "v"):
            ps.add(f"{p}.{proj}.w",
                   (rng.standard_normal((dim, inner)) * 0.02).astype(np.float32))
        ps.add(f"{p}.o.w",
               (rng.standard_normal((inner, dim)) * 0.02).astype(np.float32))
        for ln in ("ln_qk", "ln_v", "ln_out"):
            ps.add(f"{p}.{ln}.g", np.ones(dim, np.float32))
            ps.add(f"{p}.{ln}.b", np.zeros(dim, np.float32))


def set_identity_diagnostic(ps: ParamSet, dim: int) -> MatchingConfig:
    """Overwrite projections with identity; return the diagnostic config."""
    eye = np.eye(dim, dtype=np.float32)
    for lv in range(1, N_LEVELS + 1):
        for proj in ("q", "k", "v", "o"):
            ps[f"match.lv{lv}.{proj}.w"].data = eye.copy()
    return MatchingConfig(heads=1, head_dim=dim, dropout=0.0,
                          layernorm=False, residual=False)


def _split_heads(t: Tensor, heads: int, dh: int) -> Tensor:
    # (..., M, heads*dh) -> (..., heads, M, dh)
    lead = t.shape[:-2]
    m = t.shape[-2]
    t = ad.reshape(t, lead + (m, heads, dh))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return ad.transpose(t, axes)


def _merge_heads(t: Tensor) -> Tensor:
    # (..., heads, M, dh) -> (..., M, heads*dh)
    lead = t.shape[:-3]
    h, m, dh = t.shape[-3:]
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return ad.reshape(ad.transpose(t, axes), lead + (m, h * dh))


def _level_weights(ps: ParamSet, lv: int, q: Tensor, k: Tensor,
                   mcfg: MatchingConfig, mode: str,
                   rng: np.random.Generator | None) -> Tensor:
    """Attention weights (..., heads, M, NM) for one level."""
    p = f"match.lv{lv}"
    dim = q.shape[-1]
    dh = mcfg.resolve_head_dim(dim)
    if mcfg.layernorm:
        # queries and keys are normalized with one shared parameter set
        q = ad.layernorm(q, ps[f"{p}.ln_qk.g"], ps[f"{p}.ln_qk.b"])
        k = ad.layernorm(k, ps[f"{p}.ln_qk.g"], ps[f"{p}.ln_qk.b"])
    qp = _split_heads(ad.matmul(q, ps[f"{p}.q.w"]), mcfg.heads, dh)
    kp = _split_heads(ad.matmul(k, ps[f"{p}.k.w"]), mcfg.heads, dh)
    scores = ad.matmul(qp, ad.transpose(kp, tuple(range(kp.ndim - 2))
                                        + (kp.ndim - 1, kp.ndim - 2)))
    scores = scores * (1.0 / np.sqrt(dh))
    attn = ad.softmax_last(scores)
    if mode == "train" and mcfg.dropout > 0.0:
        if rng is None:
            raise DataError("train mode needs an rng for attention dropout")
        attn = ad.dropout(attn, mcfg.dropout, rng)
    return attn


def match_level(ps: ParamSet, lv: int, q: Tensor, k: Tensor, v: Tensor,
                mcfg: MatchingConfig, mode: str = "eval",
                rng: np.random.Generator | None = None) -> Tensor:
    """One level of matching. q: (..., M, d); k, v: (..., NM, d)."""
    p = f"match.lv{lv}"
    dim = q.shape[-1]
    dh = mcfg.resolve_head_dim(dim)
    attn = _level_weights(ps, lv, q, k, mcfg, mode, rng)
    if mcfg.layernorm:
        v = ad.layernorm(v, ps[f"{p}.ln_v.g"], ps[f"{p}.ln_v.b"])
    vp = _split_heads(ad.matmul(v, ps[f"{p}.v.w"]), mcfg.heads, dh)
    o = _merge_heads(ad.matmul(attn, vp))
    if mcfg.residual:
        o = o + ad.gelu(ad.matmul(o, ps[f"{p}.o.w"]))
    if mcfg.layernorm:
        o = ad.layernorm(o, ps[f"{p}.ln_out.g"], ps[f"{p}.ln_out.b"])
    return o


def _stack_support(pyrs: list[TokenPyramid]) -> list[Tensor]:
    """N pyramids of (M, d) levels -> per level (N*M, d) row matrices."""
    if not pyrs:
        raise DataError("matching needs at least one support example")
    levels = []
    for lv in range(N_LEVELS):
        levels.append(ad.concat([p.levels[lv] for p in pyrs], axis=0))
    return levels


def _check_compatible(query_pyr: TokenPyramid, *pyr_lists: list[TokenPyramid]):
    m, d = query_pyr.m, query_pyr.d
    for pyrs in pyr_lists:
        for p in pyrs:
            if (p.m, p.d) != (m, d):
                raise ShapeError(f"support pyramid (M={p.m}, d={p.d}) "
                                 f"incompatible with query (M={m}, d={d})")


def match_tokens(ps: ParamSet, query_pyr: TokenPyramid,
                 support_img_pyrs: list[TokenPyramid],
                 support_lbl_pyrs: list[TokenPyramid],
                 mcfg: MatchingConfig, mode: str = "eval",
                 seed: int | None = None) -> TokenPyramid:
    """Infer query label tokens level-by-level from the support set."""
    if len(support_img_pyrs) != len(support_lbl_pyrs):
        raise DataError("support image/label pyramid counts differ")
    _check_compatible(query_pyr, support_img_pyrs, support_lbl_pyrs)
    if mode not in ("train", "eval"):
        raise DataError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed) if mode == "train" else None
    ks = _stack_support(support_img_pyrs)
    vs = _stack_support(support_lbl_pyrs)
    out = []
    for lv in range(N_LEVELS):
        out.append(match_level(ps, lv + 1, query_pyr.levels[lv], ks[lv], vs[lv],
                               mcfg, mode, rng))
    return TokenPyramid(out, query_pyr.h, query_pyr.w)


def attention_maps(ps: ParamSet, query_pyr: TokenPyramid,
                   support_img_pyrs: list[TokenPyramid], level: int, head: int,
                   mcfg: MatchingConfig) -> np.ndarray:
    """Eval-mode softmax weights, shape (M, N*M), for one level and head."""
    if not 0 <= level < N_LEVELS:
        raise DataError(f"level index {level} out of range [0, {N_LEVELS})")
    if not 0 <= head < mcfg.heads:
        raise DataError(f"head index {head} out of range [0, {mcfg.heads})")
    _check_compatible(query_pyr, support_img_pyrs)
    k = _stack_support(support_img_pyrs)[level]
    attn = _level_weights(ps, level + 1, query_pyr.levels[level], k,
                          mcfg, "eval", None)
    return attn.data[head].copy()


def match_batch(ps: ParamSet, q_levels: list[Tensor], si_levels: list[Tensor],
                sl_levels: list[Tensor], mcfg: MatchingConfig,
                mode: str = "eval",
                rng: np.random.Generator | None = None) -> list[Tensor]:
    """Batched matching. q_levels: (C, B, M, d); s*_levels: (C, N, M, d).

    The N support examples are flattened into one NM-row matrix per channel
    and broadcast over the B query images.
    """
    out = []
    for lv in range(N_LEVELS):
        c, n, m, d = si_levels[lv].shape
        k = ad.reshape(si_levels[lv], (c, 1, n * m, d))
        v = ad.reshape(sl_levels[lv], (c, 1, n * m, d))
        out.append(match_level(ps, lv + 1, q_levels[lv], k, v, mcfg, mode, rng))
    return out
