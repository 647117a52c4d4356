"""Evaluation: mIoU / RMSE / mean angle error, five-crop prediction, and
attention-map export.

mIoU accumulates intersection and union pixel counts over the whole list
before dividing (dataset-level aggregation); RMSE and mErr are per-image and
averaged by the caller. Five-crop prediction runs the model on the four
corner crops plus the center crop and averages overlapping pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adaptation
from . import decoder as dec
from .errors import DataError, ShapeError, UsageError
from .model import Model
from .taskspace import TaskChannelSpec


# ---------------------------------------------------------------------------
# metrics


def _as_binary(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.isin(arr, (0, 1)).all():
        raise DataError(f"{what} mask is not binary")
    return arr.astype(bool)


def miou(preds, gts) -> float:
    """Binary IoU with counts accumulated over all pairs; empty union -> 1."""
    if len(preds) != len(gts):
        raise DataError("pred/gt list lengths differ")
    inter = 0
    union = 0
    for i, (p, t) in enumerate(zip(preds, gts)):
        p = _as_binary(p, f"pred[{i}]")
        t = _as_binary(t, f"gt[{i}]")
        if p.shape != t.shape:
            raise ShapeError(f"pair {i} shapes differ: {p.shape} vs {t.shape}")
        inter += int((p & t).sum())
        union += int((p | t).sum())
    return 1.0 if union == 0 else inter / union


def rmse(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


def mean_angle_error(pred, gt) -> float:
    """Angle in degrees between per-pixel normals encoded as (x+1)/2.

    pred/gt: 3 label maps each ((3, H, W) or a list). Zero-norm pixels are
    skipped; if every pixel is degenerate that is an error.
    """
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape or pred.shape[0] != 3:
        raise ShapeError(f"need matching (3, H, W) stacks, got {pred.shape} "
                         f"vs {gt.shape}")
    p = 2.0 * pred - 1.0
    g = 2.0 * gt - 1.0
    pn = np.sqrt((p * p).sum(axis=0))
    gn = np.sqrt((g * g).sum(axis=0))
    valid = (pn > 0) & (gn > 0)
    if not valid.any():
        raise DataError("all pixels have zero-norm normals")
    cos = (p * g).sum(axis=0)[valid] / (pn[valid] * gn[valid])
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    return float(ang.mean())


# ---------------------------------------------------------------------------
# five-crop prediction


def five_crop_offsets(full: int, crop: int) -> list[tuple[int, int]]:
    """Corner and center crop origins; crops must tile the full image."""
    if crop >= full:
        raise UsageError(f"crop {crop} must be smaller than image {full}")
    if 2 * crop < full:
        raise UsageError(f"crop {crop} cannot cover image {full}: "
                         "corners would leave gaps")
    m = full - crop
    c = m // 2
    return [(0, 0), (0, m), (m, 0), (m, m), (c, c)]


def five_crop_aggregate(predict_fn, image: np.ndarray,
                        crop: int) -> np.ndarray:
    """Average predict_fn over the five crops; coverage >= 1 everywhere."""
    full = image.shape[-1]
    if image.shape[-2] != full:
        raise ShapeError("five-crop expects a square image")
    acc = np.zeros((full, full), np.float64)
    count = np.zeros((full, full), np.float64)
    for y0, x0 in five_crop_offsets(full, crop):
        pred = np.asarray(predict_fn(image[:, y0:y0 + crop, x0:x0 + crop]),
                          np.float64)
        if pred.shape != (crop, crop):
            raise ShapeError(f"predictor returned {pred.shape}, expected "
                             f"{(crop, crop)}")
        acc[y0:y0 + crop, x0:x0 + crop] += pred
        count[y0:y0 + crop, x0:x0 + crop] += 1.0
    return (acc / count).astype(np.float32)


def five_crop_predict(model: Model, image: np.ndarray,
                      support_images: np.ndarray, support_labels: np.ndarray,
                      spec: TaskChannelSpec, crop: int) -> np.ndarray:
    """Full-size prediction via five crops; support center-cropped to match.

    Aggregation always averages sigmoid probabilities; binary channels are
    thresholded once, after averaging.
    """
    full = image.shape[-1]
    c0 = (full - crop) // 2
    sup_i = support_images[:, :, c0:c0 + crop, c0:c0 + crop]
    sup_l = support_labels[:, c0:c0 + crop, c0:c0 + crop]

    def predict(patch):
        return model.predict_channel(patch, sup_i, sup_l, spec.key,
                                     "continuous", stage="report")

    agg = five_crop_aggregate(predict, image, crop)
    if spec.label_kind == "binary":
        return (agg >= dec.BINARY_THRESHOLD).astype(np.float32)
    return agg


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricEntry:
    task: str
    channel: int
    metric: str
    value: float
    n: int

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise DataError(f"non-finite metric {self.metric} for "
                            f"{self.task}:{self.channel}")
        if self.metric == "miou" and not 0.0 <= self.value <= 1.0:
            raise DataError(f"mIoU out of range: {self.value}")
        if self.metric == "merr" and not 0.0 <= self.value <= 180.0:
            raise DataError(f"mErr out of range: {self.value}")

    def line(self) -> str:
        return f"{self.task} {self.channel} {self.metric} " \
               f"{self.value:.6f} {self.n}"


@dataclass
class MetricReport:
    entries: list[MetricEntry] = field(default_factory=list)

    def add(self, entry: MetricEntry) -> None:
        self.entries.append(entry)

    def format(self) -> str:
        return "\n".join(e.line() for e in self.entries) + "\n"


def eval_channel(model: Model, ds, spec: TaskChannelSpec,
                 support_ids: list[str], query_ids: list[str],
                 crop: int | None = None) -> MetricEntry:
    """mIoU (binary) or image-mean RMSE (continuous) over query images."""
    sup_i = np.stack([ds.image(i) for i in support_ids])
    sup_l = np.stack([ds.label(spec.task, spec.channel, i)
                      for i in support_ids])
    full = sup_i.shape[-1]
    preds, gts = [], []
    for qid in query_ids:
        q = ds.image(qid)
        if crop is not None and crop < full:
            pred = five_crop_predict(model, q, sup_i, sup_l, spec, crop)
        else:
            pred = adaptation.predict(model, q, sup_i, sup_l, spec)
        preds.append(pred)
        gts.append(ds.label(spec.task, spec.channel, qid))
    if spec.label_kind == "binary":
        return MetricEntry(spec.task, spec.channel, "miou",
                           miou(preds, gts), len(query_ids))
    value = float(np.mean([rmse(p, t) for p, t in zip(preds, gts)]))
    return MetricEntry(spec.task, spec.channel, "rmse", value, len(query_ids))


# ---------------------------------------------------------------------------
# attention export


def attention_grid(attn: np.ndarray, grid_hw: tuple[int, int],
                   n_support: int) -> np.ndarray:
    """(M, N*M) attention -> (M*gh, N*gw) tiled gray map in [0,1].

    Row block t shows query token t's attention over each support image's
    token grid, tiles left to right by support index.
    """
    gh, gw = grid_hw
    m = gh * gw
    if attn.shape != (m, n_support * m):
        raise ShapeError(f"attention shape {attn.shape} does not match "
                         f"grid {grid_hw} x {n_support} supports")
    peak = float(attn.max())
    scale = 1.0 / peak if peak > 0 else 1.0
    out = np.zeros((m * gh, n_support * gw), np.float32)
    for t in range(m):
        for s in range(n_support):
            tile = attn[t, s * m:(s + 1) * m].reshape(gh, gw)
            out[t * gh:(t + 1) * gh, s * gw:(s + 1) * gw] = tile * scale
    return np.clip(out, 0.0, 1.0)


def write_pgm(path: Path, gray: np.ndarray) -> None:
    """Binary (P5) portable gray map from floats in [0,1]."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.min() < 0.0 or gray.max() > 1.0:
        raise DataError("PGM input must be a 2-D array in [0,1]")
    h, w = gray.shape
    data = np.round(gray * 255.0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())
