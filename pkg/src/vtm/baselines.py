"""Reference predictors used to sanity-margin the learned model.

Both are deliberately brute-force and share no code with the model:
``constant_mean_predict`` outputs the scalar mean of all support label
pixels; ``nearest_patch_copy`` tiles the query into non-overlapping patches
and copies, for each, the label patch of the most similar support image
patch (L2 over RGB pixels, exhaustive search, first index on ties).
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, ShapeError


def constant_mean_predict(support_labels: np.ndarray,
                          out_hw: tuple[int, int]) -> np.ndarray:
    support_labels = np.asarray(support_labels, np.float64)
    if support_labels.ndim != 3 or support_labels.shape[0] < 1:
        raise ShapeError(f"support labels must be (N, H, W), got "
                         f"{support_labels.shape}")
    return np.full(out_hw, support_labels.mean(), np.float32)


def nearest_patch_copy(query_image: np.ndarray, support_images: np.ndarray,
                       support_labels: np.ndarray,
                       patch: int = 8) -> np.ndarray:
    query_image = np.asarray(query_image, np.float64)
    support_images = np.asarray(support_images, np.float64)
    support_labels = np.asarray(support_labels, np.float64)
    if query_image.ndim != 3 or query_image.shape[0] != 3:
        raise ShapeError(f"query must be (3, H, W), got {query_image.shape}")
    n, _, h, w = support_images.shape
    if support_labels.shape != (n, h, w):
        raise ShapeError("support image/label geometry mismatch")
    qh, qw = query_image.shape[1:]
    if qh % patch or qw % patch or h % patch or w % patch:
        raise DataError(f"sizes must be multiples of patch {patch}")

    # all support patches, flattened once: (n_patches, 3*patch*patch)
    cand_vecs = []
    cand_labs = []
    for s in range(n):
        for i in range(0, h, patch):
            for j in range(0, w, patch):
                cand_vecs.append(
                    support_images[s, :, i:i + patch, j:j + patch].ravel())
                cand_labs.append(support_labels[s, i:i + patch, j:j + patch])
    cand = np.stack(cand_vecs)

    out = np.zeros((qh, qw), np.float32)
    for i in range(0, qh, patch):
        for j in range(0, qw, patch):
            v = query_image[:, i:i + patch, j:j + patch].ravel()
            d2 = ((cand - v) ** 2).sum(axis=1)
            best = int(np.argmin(d2))   # argmin takes the first on ties
            out[i:i + patch, j:j + patch] = cand_labs[best]
    return out


def baseline_rmse(ds, spec, support_ids: list[str], query_ids: list[str],
                  patch: int = 8) -> dict[str, float]:
    """Image-mean RMSE of both baselines for one channel."""
    sup_i = np.stack([ds.image(i) for i in support_ids])
    sup_l = np.stack([ds.label(spec.task, spec.channel, i)
                      for i in support_ids])
    const_errs, patch_errs = [], []
    const = None
    for qid in query_ids:
        gt = np.asarray(ds.label(spec.task, spec.channel, qid), np.float64)
        if const is None:
            const = constant_mean_predict(sup_l, gt.shape)
        const_errs.append(np.sqrt(np.mean((const - gt) ** 2)))
        pred = nearest_patch_copy(ds.image(qid), sup_i, sup_l, patch)
        patch_errs.append(np.sqrt(np.mean((pred - gt) ** 2)))
    return {"constant_mean": float(np.mean(const_errs)),
            "nearest_patch": float(np.mean(patch_errs))}
