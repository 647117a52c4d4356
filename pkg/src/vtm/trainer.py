"""Episodic meta-training: sampling, task augmentation, Adam, poly schedule.

Each step draws a batch of episodes from the training-fold channel pool,
optionally augments labels (jitter, blur, MixUp with another channel), and
takes one Adam step on the mean episode loss. The optimizer is lazy: a
parameter with no gradient this step keeps both its value and its moment
state bit-identical, so BiasBank entries for unsampled channels never move.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .datakit import Dataset, gaussian_blur
from .errors import DataError, NumericError, UsageError
from .model import Model
from .taskspace import Episode

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    total_steps: int = 20000
    batch_episodes: int = 4
    channels_per_episode: int = 5
    support_size: int = 4
    query_size: int = 4
    lr_scratch: float = 1e-4
    lr_pretrained: float = 1e-5
    poly_power: float = 0.9
    crop: int = 64
    seed: int = 0
    augment: bool = True
    jitter_scale: tuple = (0.7, 1.3)
    jitter_shift: tuple = (-0.2, 0.2)
    blur_kernels: tuple = (1, 3, 5)
    blur_sigma: tuple = (0.1, 2.0)
    mixup_alpha: float = 0.2
    log_every: int = 100

    def __post_init__(self):
        for name in ("total_steps", "batch_episodes", "channels_per_episode",
                     "support_size", "query_size", "crop", "log_every"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive")
        if min(self.lr_scratch, self.lr_pretrained) <= 0:
            raise UsageError("learning rates must be positive")
        if any(k % 2 == 0 for k in self.blur_kernels):
            raise UsageError("blur kernels must be odd")


def poly_lr(step: int, total: int, base: float, power: float = 0.9) -> float:
    if total <= 0 or step < 0 or step > total:
        raise UsageError(f"need 0 <= step <= total, got step={step} "
                         f"total={total}")
    return base * (1.0 - step / total) ** power


# ---------------------------------------------------------------------------
# episode sampling


def sample_episode(ds: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                   fold: str = "train") -> Episode:
    """Draw channels, disjoint support/query images, and shared crops/flips.

    A flip-disallowed channel anywhere in the episode disables flipping for
    the whole episode: labels must stay aligned with the (shared) image, so
    flips can only be applied to image and labels jointly.
    """
    pool = ds.channel_specs(fold)
    if len(pool) < cfg.channels_per_episode:
        raise DataError(f"channel pool has {len(pool)} entries, need "
                        f"{cfg.channels_per_episode}")
    need = cfg.support_size + cfg.query_size
    if len(ds.ids) < need:
        raise DataError(f"dataset has {len(ds.ids)} images, episode needs "
                        f"{need}")
    chan_idx = rng.choice(len(pool), size=cfg.channels_per_episode,
                          replace=False)
    specs = [pool[i] for i in chan_idx]
    flip_disabled = any(not s.flip_allowed for s in specs)

    img_idx = rng.choice(len(ds.ids), size=need, replace=False)
    ids = [ds.ids[i] for i in img_idx]
    sample_h = ds.image(ids[0]).shape[1]
    if cfg.crop > sample_h:
        raise DataError(f"crop {cfg.crop} exceeds image size {sample_h}")

    crops, flips, images, labels = [], [], [], []
    for image_id in ids:
        y0 = int(rng.integers(0, sample_h - cfg.crop + 1))
        x0 = int(rng.integers(0, sample_h - cfg.crop + 1))
        coin = bool(rng.random() < 0.5)
        flip = coin and not flip_disabled
        crops.append((y0, x0))
        flips.append(flip)
        img = ds.image(image_id)[:, y0:y0 + cfg.crop, x0:x0 + cfg.crop]
        per_chan = [ds.label(s.task, s.channel, image_id)
                    [y0:y0 + cfg.crop, x0:x0 + cfg.crop] for s in specs]
        if flip:
            img = img[:, :, ::-1]
            per_chan = [lab[:, ::-1] for lab in per_chan]
        images.append(np.ascontiguousarray(img))
        labels.append([np.ascontiguousarray(lab) for lab in per_chan])

    ns = cfg.support_size
    meta = {"image_ids": ids, "crops": crops, "flips": flips,
            "flip_disabled": flip_disabled, "fold": fold}
    return Episode(specs, images[:ns], labels[:ns], images[ns:], labels[ns:],
                   meta)


# ---------------------------------------------------------------------------
# task augmentation


def _blur_stack(labels: list[np.ndarray], size: int,
                sigma: float) -> list[np.ndarray]:
    if size == 1:
        return [lab.astype(np.float32) for lab in labels]
    return [gaussian_blur(lab, size, sigma).astype(np.float32)
            for lab in labels]


def augment_channel(labels: list[np.ndarray], scale: float, shift: float,
                    blur_size: int, blur_sigma: float, lam: float,
                    aux: list[np.ndarray] | None) -> list[np.ndarray]:
    """Jitter -> blur -> MixUp -> clamp for one channel's label list."""
    out = _blur_stack([scale * lab + shift for lab in labels],
                      blur_size, blur_sigma)
    if aux is not None:
        out = [lam * o + (1.0 - lam) * a for o, a in zip(out, aux)]
    return [np.clip(o, 0.0, 1.0).astype(np.float32) for o in out]


def make_aux_sampler(ds: Dataset, ep: Episode, rng: np.random.Generator):
    """Aux-channel accessor: training-fold labels under the episode's crops."""
    pool = ds.channel_specs("train")
    ids = ep.meta["image_ids"]
    crops = ep.meta["crops"]
    flips = ep.meta["flips"]
    crop = ep.support_images[0].shape[1]

    def aux(_channel_index: int):
        spec = pool[int(rng.integers(0, len(pool)))]
        labs = []
        for image_id, (y0, x0), flip in zip(ids, crops, flips):
            lab = ds.label(spec.task, spec.channel, image_id) \
                [y0:y0 + crop, x0:x0 + crop]
            labs.append(np.ascontiguousarray(lab[:, ::-1] if flip else lab))
        ns = ep.n_support
        return labs[:ns], labs[ns:]

    return aux


def augment_episode(ep: Episode, aux_channels, rng: np.random.Generator,
                    cfg: TrainConfig) -> Episode:
    """Per-channel jitter/blur/MixUp, parameters fixed across the episode."""
    sup = [list(per_pair) for per_pair in ep.support_labels]
    qry = [list(per_pair) for per_pair in ep.query_labels]
    trace = []
    for ci in range(len(ep.specs)):
        scale = float(rng.uniform(*cfg.jitter_scale))
        shift = float(rng.uniform(*cfg.jitter_shift))
        size = int(cfg.blur_kernels[int(rng.integers(0, len(cfg.blur_kernels)))])
        sigma = float(rng.uniform(*cfg.blur_sigma))
        lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
        aux_sup = aux_qry = None
        if aux_channels is not None:
            aux_sup, aux_qry = aux_channels(ci)
        new_sup = augment_channel([p[ci] for p in sup], scale, shift, size,
                                  sigma, lam, aux_sup)
        new_qry = augment_channel([p[ci] for p in qry], scale, shift, size,
                                  sigma, lam, aux_qry)
        for pi, lab in enumerate(new_sup):
            sup[pi][ci] = lab
        for pi, lab in enumerate(new_qry):
            qry[pi][ci] = lab
        trace.append({"scale": scale, "shift": shift, "blur": (size, sigma),
                      "lam": lam})
    meta = dict(ep.meta, augment=trace)
    return Episode(ep.specs, ep.support_images, sup, ep.query_images, qry,
                   meta)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Lazy per-parameter Adam; untouched parameters keep exact state."""

    def __init__(self, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.moments: dict[str, list] = {}   # name -> [m, v, t]

    def apply(self, ps: ad.ParamSet, lr_of, only=None) -> int:
        updated = 0
        for name in ps.names():
            if only is not None and name not in only:
                continue
            p = ps[name]
            if p.grad is None:
                continue
            g = p.grad
            slot = self.moments.get(name)
            if slot is None:
                slot = [np.zeros_like(p.data), np.zeros_like(p.data), 0]
                self.moments[name] = slot
            m, v, t = slot
            t += 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            p.data = (p.data - lr_of(name) * mhat
                      / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
            slot[0], slot[1], slot[2] = m, v, t
            updated += 1
        return updated


# ---------------------------------------------------------------------------
# training loop


def meta_train_step(model: Model, episodes: list[Episode], opt: AdamState,
                    step: int, cfg: TrainConfig,
                    rng: np.random.Generator) -> tuple[float, float]:
    """One optimizer step on the mean loss over a batch of episodes."""
    if not episodes:
        raise UsageError("empty episode batch")
    model.ps.zero_grad()
    losses = []
    details = []
    for ep in episodes:
        loss, per_chan = model.episode_loss(ep, mode="train", rng=rng)
        losses.append(loss)
        details.append(per_chan)
    total = losses[0] if len(losses) == 1 else ad.mean(ad.stack(losses))
    value = float(total.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss at step {step}: "
                           f"per-episode channels {details}")
    total.backward()
    lr_scratch = poly_lr(step, cfg.total_steps, cfg.lr_scratch,
                         cfg.poly_power)
    lr_pre = poly_lr(step, cfg.total_steps, cfg.lr_pretrained, cfg.poly_power)
    opt.apply(model.ps,
              lambda name: lr_pre if model.ps.is_pretrained(name)
              else lr_scratch)
    return value, lr_scratch


def train(model: Model, ds: Dataset, cfg: TrainConfig, log=None,
          checkpoint_fn=None, checkpoint_every: int = 0) -> list[float]:
    """Full meta-training run; returns the per-step loss history."""
    for spec in ds.channel_specs("train"):
        if spec.key not in model.bank:
            model.bank.register(spec.key, init="template")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState()
    history = []
    for step in range(cfg.total_steps):
        episodes = []
        for _ in range(cfg.batch_episodes):
            ep = sample_episode(ds, cfg, rng)
            if cfg.augment:
                ep = augment_episode(ep, make_aux_sampler(ds, ep, rng), rng,
                                     cfg)
            episodes.append(ep)
        value, lr = meta_train_step(model, episodes, opt, step, cfg, rng)
        history.append(value)
        if log and (step % cfg.log_every == 0 or step == cfg.total_steps - 1):
            log(f"step {step} loss {value:.6f} lr {lr:.6g}")
        if checkpoint_fn and checkpoint_every \
                and (step + 1) % checkpoint_every == 0:
            checkpoint_fn(model, step + 1)
    return history
