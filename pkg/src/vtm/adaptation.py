"""Test-time adaptation: tune one task's encoder biases on its support set.

Only the BiasBank entry for the adapted channel moves; every shared
parameter and every other bank entry stays bit-identical. Each inner step
re-partitions the support set into a sub-support and sub-query half,
predicts the sub-query labels from the sub-support, and takes one Adam step
on the resulting loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError, UsageError
from .model import Model
from .taskspace import Episode, TaskChannelSpec
from .trainer import AdamState


@dataclass
class AdaptConfig:
    iterations: int = 200
    lr: float = 1e-4
    sub_support: int | None = None   # None -> floor(N/2)
    sub_query: int | None = None     # None -> remainder
    patience: int = 20
    seed: int = 0
    init: str = "mean"               # bias init for unseen keys

    def __post_init__(self):
        if self.iterations < 0:
            raise UsageError("iterations must be >= 0")
        if self.lr <= 0:
            raise UsageError("lr must be positive")
        if self.patience < 1:
            raise UsageError("patience must be >= 1")


def _partition_sizes(n: int, cfg: AdaptConfig) -> tuple[int, int]:
    ns = cfg.sub_support if cfg.sub_support is not None else n // 2
    nq = cfg.sub_query if cfg.sub_query is not None else n - ns
    if ns < 1 or nq < 1 or ns + nq != n:
        raise UsageError(f"partition {ns}+{nq} does not split support of {n}")
    return ns, nq


def ensure_entry(model: Model, key: str, init: str) -> None:
    if key in model.bank:
        return
    if init == "mean" and not model.bank.keys():
        init = "template"   # nothing to average over yet
    model.bank.register(key, init=init)


def adapt(model: Model, support_images: np.ndarray,
          support_labels: np.ndarray, spec: TaskChannelSpec,
          cfg: AdaptConfig = AdaptConfig()) -> list[float]:
    """Tune spec's bias entry on N support pairs; returns inner-loss history.

    support_images: (N, 3, H, W); support_labels: (N, H, W). The entry is
    registered (cfg.init) if unseen. Inner steps run in eval mode, so the
    procedure is deterministic given cfg.seed.
    """
    support_images = np.asarray(support_images, np.float32)
    support_labels = np.asarray(support_labels, np.float32)
    n = support_images.shape[0]
    if n < 2:
        raise DataError(f"adaptation needs >= 2 support pairs, got {n}")
    if support_labels.shape[0] != n:
        raise DataError("support image/label counts differ")
    ns, _ = _partition_sizes(n, cfg)
    ensure_entry(model, spec.key, cfg.init)

    bias_names = set(model.bank.param_names(spec.key))
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState()
    history: list[float] = []
    best = np.inf
    stale = 0
    for it in range(cfg.iterations):
        perm = rng.permutation(n)
        s_idx, q_idx = perm[:ns], perm[ns:]
        ep = Episode([spec],
                     [support_images[i] for i in s_idx],
                     [[support_labels[i]] for i in s_idx],
                     [support_images[i] for i in q_idx],
                     [[support_labels[i]] for i in q_idx])
        model.ps.zero_grad()
        loss, _ = model.episode_loss(ep, mode="eval")
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite adaptation loss at inner step "
                               f"{it} for {spec.key}")
        history.append(value)
        loss.backward()
        opt.apply(model.ps, lambda _name: cfg.lr, only=bias_names)
        if value < best - 1e-9:
            best = value
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.ps.zero_grad()
    return history


def predict(model: Model, query_image: np.ndarray,
            support_images: np.ndarray, support_labels: np.ndarray,
            spec: TaskChannelSpec) -> np.ndarray:
    """Report-stage prediction for one query using spec's tuned biases."""
    if spec.key not in model.bank:
        raise DataError(f"no bias entry for {spec.key}; adapt first")
    return model.predict_channel(np.asarray(query_image, np.float32),
                                 np.asarray(support_images, np.float32),
                                 np.asarray(support_labels, np.float32),
                                 spec.key, spec.label_kind, stage="report")
