"""Tasks, channels, episodes, and the two per-channel losses.

A dense task with C channels is handled as C independent single-channel
sub-tasks; each sub-task carries its own label kind (continuous or binary)
and the loss that goes with it (L1 or cross-entropy). Episodes bundle a
support and query set for a sampled list of channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DataError, ShapeError

CE_EPS = 1e-6


@dataclass(frozen=True)
class TaskChannelSpec:
    task: str
    channel: int                    # 1-based within the source task
    label_kind: str                 # "continuous" | "binary"
    loss_kind: str                  # "l1" | "cross_entropy"
    flip_allowed: bool = True

    def __post_init__(self):
        if self.label_kind not in ("continuous", "binary"):
            raise DataError(f"unknown label kind {self.label_kind!r}")
        if self.loss_kind not in ("l1", "cross_entropy"):
            raise DataError(f"unknown loss kind {self.loss_kind!r}")
        if (self.loss_kind == "cross_entropy") != (self.label_kind == "binary"):
            raise DataError("cross-entropy is used exactly for binary channels")

    @property
    def key(self) -> str:
        return f"{self.task}:{self.channel}"


@dataclass
class Episode:
    """Support/query image-label pairs for a set of sampled channels.

    images: float32 arrays (3, H, W) in [0,1]; labels[c]: (H, W) in [0,1],
    one per channel spec, aligned by index.
    """
    specs: list[TaskChannelSpec]
    support_images: list[np.ndarray]
    support_labels: list[list[np.ndarray]]   # [pair][channel]
    query_images: list[np.ndarray]
    query_labels: list[list[np.ndarray]]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.support_images) < 1:
            raise DataError("episode needs at least one support pair")
        shapes = {im.shape for im in self.support_images + self.query_images}
        if len(shapes) != 1:
            raise ShapeError(f"episode images disagree on shape: {sorted(shapes)}")
        for labels in (self.support_labels, self.query_labels):
            for per_pair in labels:
                if len(per_pair) != len(self.specs):
                    raise DataError("one label per channel spec required")

    @property
    def n_support(self) -> int:
        return len(self.support_images)

    @property
    def n_query(self) -> int:
        return len(self.query_images)


def validate_image(arr: np.ndarray, patch: int | None = None) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"image must be (3, H, W), got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError("image values must lie in [0,1]")
    if patch and (arr.shape[1] % patch or arr.shape[2] % patch):
        raise ShapeError(f"image dims {arr.shape[1:]} not divisible by patch {patch}")
    return arr


def validate_label(arr: np.ndarray, kind: str = "continuous") -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"label must be (H, W), got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError("label values must be standardized into [0,1]")
    if kind == "binary" and not np.isin(arr, (0.0, 1.0)).all():
        raise DataError("binary label has values outside {0,1}")
    return arr


def split_channels(label: np.ndarray, specs: list[TaskChannelSpec]) -> list[np.ndarray]:
    """(H, W, C) array -> C single-channel maps, order preserved."""
    label = np.asarray(label)
    if label.ndim != 3:
        raise ShapeError(f"expected (H, W, C), got {label.shape}")
    if label.shape[2] != len(specs):
        raise ShapeError(f"{label.shape[2]} channels vs {len(specs)} specs")
    if label.min() < 0.0 or label.max() > 1.0:
        raise DataError("label must be standardized into [0,1] before splitting")
    return [validate_label(label[:, :, c], specs[c].label_kind)
            for c in range(label.shape[2])]


def compute_loss(pred: ad.Tensor, target: np.ndarray, kind: str) -> ad.Tensor:
    """Mean per-pixel loss; pred is post-sigmoid for cross-entropy."""
    t = np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ShapeError(f"pred {pred.shape} vs target {t.shape}")
    if kind == "l1":
        return ad.mean(ad.absolute(pred - ad.Tensor(t)))
    if kind == "cross_entropy":
        p = ad.clip(pred, CE_EPS, 1.0 - CE_EPS)
        tt = ad.Tensor(t)
        return ad.mean(-(tt * ad.log(p) + (1.0 - tt) * ad.log(1.0 - p)))
    raise DataError(f"unknown loss kind {kind!r}")


def surface_normal_specs(task: str = "normal") -> list[TaskChannelSpec]:
    """Three continuous channels, horizontal flip disallowed."""
    return [TaskChannelSpec(task, c + 1, "continuous", "l1", flip_allowed=False)
            for c in range(3)]
