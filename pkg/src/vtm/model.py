"""The assembled few-shot learner: encode, match, decode, loss.

A Model owns one ParamSet holding the shared image-encoder weights, the
label encoder, the matching projections, the decoder, and every per-task
bias entry. ``matching_mode="linear"`` swaps the matching module for a
per-level linear map from query image tokens to label tokens (the
no-matching ablation); the support set is then ignored at forward time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import encoders as enc
from . import matching as mt
from .autodiff import ParamSet, Tensor
from .errors import DataError, NumericError
from .taskspace import CE_EPS, Episode

MATCHING_MODES = ("attention", "linear")


@dataclass
class Model:
    ps: ParamSet
    bank: enc.BiasBank
    enc_cfg: enc.EncoderConfig
    mat_cfg: mt.MatchingConfig
    dec_cfg: dec.DecoderConfig
    matching_mode: str = "attention"
    meta: dict = field(default_factory=dict)

    # ------------------------------------------------------------------ build

    @staticmethod
    def build(enc_cfg: enc.EncoderConfig = enc.EncoderConfig(),
              mat_cfg: mt.MatchingConfig = mt.MatchingConfig(),
              dec_cfg: dec.DecoderConfig = dec.DecoderConfig(),
              matching_mode: str = "attention", seed: int = 0) -> "Model":
        if matching_mode not in MATCHING_MODES:
            raise DataError(f"unknown matching mode {matching_mode!r}")
        ps = ParamSet()
        rng = np.random.default_rng(seed)
        enc.init_vit_params(ps, "img", enc_cfg, 3 * enc_cfg.patch ** 2, rng,
                            with_biases=False)
        enc.init_vit_params(ps, "lbl", enc_cfg, enc_cfg.patch ** 2, rng,
                            with_biases=True)
        if matching_mode == "attention":
            mt.init_matching_params(ps, enc_cfg.dim, mat_cfg, rng)
        else:
            for lv in range(1, mt.N_LEVELS + 1):
                ps.add(f"linmap.lv{lv}.w",
                       (rng.standard_normal((enc_cfg.dim, enc_cfg.dim)) * 0.02)
                       .astype(np.float32))
                ps.add(f"linmap.lv{lv}.b", np.zeros(enc_cfg.dim, np.float32))
        dec.init_decoder_params(ps, enc_cfg.dim, dec_cfg, rng)
        bank = enc.BiasBank(ps, enc_cfg)
        return Model(ps, bank, enc_cfg, mat_cfg, dec_cfg, matching_mode)

    def with_params(self, ps: ParamSet) -> "Model":
        """Same architecture and bank keys over a different ParamSet
        (used for float64 gradient verification)."""
        return Model(ps, self.bank.rebind(ps), self.enc_cfg, self.mat_cfg,
                     self.dec_cfg, self.matching_mode)

    # ---------------------------------------------------------------- forward

    def episode_raw(self, support_images: np.ndarray, support_labels: np.ndarray,
                    query_images: np.ndarray, keys: list[str],
                    mode: str = "eval",
                    rng: np.random.Generator | None = None) -> Tensor:
        """Raw (pre-sigmoid) query predictions, shape (C, Q, H, W).

        support_images: (N, 3, H, W); support_labels: (C, N, H, W);
        query_images: (Q, 3, H, W); keys: C bias-bank keys.
        """
        if support_images.shape[0] < 1:
            raise DataError("empty support set")
        if len(keys) != support_labels.shape[0]:
            raise DataError("one bias key per label channel required")
        hh, ww = query_images.shape[2:]
        h, w = hh // self.enc_cfg.patch, ww // self.enc_cfg.patch
        q_levels = enc.encode_image_batch(self.ps, self.bank, query_images,
                                          keys, self.enc_cfg)
        if self.matching_mode == "attention":
            si_levels = enc.encode_image_batch(self.ps, self.bank,
                                               support_images, keys,
                                               self.enc_cfg)
            sl_levels = enc.encode_label_batch(self.ps, support_labels,
                                               self.enc_cfg)
            matched = mt.match_batch(self.ps, q_levels, si_levels, sl_levels,
                                     self.mat_cfg, mode, rng)
        else:
            matched = [ad.linear(q_levels[lv], self.ps[f"linmap.lv{lv + 1}.w"],
                                 self.ps[f"linmap.lv{lv + 1}.b"])
                       for lv in range(mt.N_LEVELS)]
        return dec.decode_batch(self.ps, matched, h, w, (hh, ww), self.dec_cfg)

    def episode_loss(self, episode: Episode, mode: str = "train",
                     rng: np.random.Generator | None = None
                     ) -> tuple[Tensor, dict[str, float]]:
        """Mean loss over the episode's channels and queries."""
        keys = [s.key for s in episode.specs]
        support_images = np.stack(episode.support_images)
        query_images = np.stack(episode.query_images)
        c = len(episode.specs)
        support_labels = np.stack(
            [np.stack([pair[ci] for pair in episode.support_labels])
             for ci in range(c)])
        targets = np.stack(
            [np.stack([pair[ci] for pair in episode.query_labels])
             for ci in range(c)])

        raw = self.episode_raw(support_images, support_labels, query_images,
                               keys, mode, rng)
        per_channel: list[Tensor] = []
        detail: dict[str, float] = {}
        for ci, spec in enumerate(episode.specs):
            prob = ad.sigmoid(ad.take0(raw, ci))
            t = ad.Tensor(targets[ci], dtype=raw.dtype)
            if spec.loss_kind == "cross_entropy":
                p = ad.clip(prob, CE_EPS, 1.0 - CE_EPS)
                loss_c = ad.mean(-(t * ad.log(p) + (1.0 - t) * ad.log(1.0 - p)))
            else:
                loss_c = ad.mean(ad.absolute(prob - t))
            per_channel.append(loss_c)
            detail[spec.key] = loss_c.item()
        total = ad.mean(ad.stack(per_channel))
        if not np.isfinite(total.data):
            raise NumericError(f"non-finite episode loss (channels: {detail})")
        return total, detail

    def predict_channel(self, query_image: np.ndarray,
                        support_images: np.ndarray, support_labels: np.ndarray,
                        key: str, label_kind: str,
                        stage: str = "report") -> np.ndarray | Tensor:
        """One query, one channel. support_labels: (N, H, W)."""
        raw = self.episode_raw(support_images, support_labels[None],
                               query_image[None], [key])
        raw_hw = ad.reshape(raw, raw.shape[2:])
        return dec.finalize(raw_hw, label_kind, stage)

    def attention_maps(self, query_image: np.ndarray,
                       support_images: np.ndarray, key: str,
                       level: int, head: int) -> np.ndarray:
        if self.matching_mode != "attention":
            raise DataError("attention maps require matching_mode=attention")
        qp = enc.encode_image(self.ps, self.bank, query_image, key,
                              self.enc_cfg)
        sp = [enc.encode_image(self.ps, self.bank, im, key, self.enc_cfg)
              for im in support_images]
        return mt.attention_maps(self.ps, qp, sp, level, head, self.mat_cfg)

    # ------------------------------------------------------------- accounting

    def shared_param_names(self) -> list[str]:
        return [n for n in self.ps.names() if not n.startswith("bias/")]

    def summary(self) -> dict[str, float]:
        total = self.ps.total_parameters()
        per_task = sum(int(np.prod(shape)) for _, shape in self.bank.sites)
        return {
            "total_parameters": total,
            "bias_parameters_per_task": per_task,
            "bias_fraction_of_image_encoder":
                enc.bias_parameter_fraction(self.ps, self.bank),
            "registered_tasks": len(self.bank.keys()),
        }
