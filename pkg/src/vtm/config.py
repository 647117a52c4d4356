"""Run configuration: one documented key space for files and CLI flags.

Config files are line-oriented ``key = value`` text; ``#`` starts a
comment and blank lines are ignored. Every key has a default below, and
unknown keys are rejected so typos fail loudly instead of silently using
a default. The ``seed`` key falls back to the ``VTM_SEED`` environment
variable when not set anywhere else.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Mapping

from .adaptation import AdaptConfig
from .errors import UsageError
from .trainer import TrainConfig


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    return float(s)


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(","))


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(","))


def _str(s: str) -> str:
    return s


@dataclass(frozen=True)
class _Key:
    default: str
    parse: Callable[[str], object]
    help: str


# Single source of truth for the key space. CLI flags are derived from
# these names (underscores become hyphens).
KEYS: dict[str, _Key] = {
    "seed": _Key("", _str, "global random seed (empty: $VTM_SEED, else 0)"),
    "data": _Key("", _str, "dataset root directory"),
    "out": _Key("", _str, "output path (checkpoint, dataset root, or image)"),
    "checkpoint": _Key("", _str, "input checkpoint path"),
    "task": _Key("", _str, "task or task:channel key"),
    "image": _Key("", _str, "image id (default: first in the dataset)"),
    "level": _Key("2", _int, "matching level for attention maps (0-3)"),
    "head": _Key("0", _int, "attention head index"),
    "matching": _Key("attention", _str, "token mapping: attention | linear"),
    "steps": _Key("20000", _int, "meta-training steps"),
    "batch_episodes": _Key("4", _int, "episodes per training step"),
    "channels": _Key("5", _int, "task channels sampled per episode"),
    "support": _Key("4", _int, "support set size (also eval/adapt shots)"),
    "query": _Key("4", _int, "query set size per training episode"),
    "lr_scratch": _Key("1e-4", _float, "learning rate, scratch parameters"),
    "lr_pretrained": _Key("1e-5", _float,
                          "learning rate, pretrained parameters"),
    "poly_power": _Key("0.9", _float, "polynomial LR decay power"),
    "crop": _Key("64", _int, "training crop size in pixels"),
    "augment": _Key("true", _bool, "enable label augmentation"),
    "jitter_scale": _Key("0.7,1.3", _floats, "label jitter scale range"),
    "jitter_shift": _Key("-0.2,0.2", _floats, "label jitter shift range"),
    "blur_kernels": _Key("1,3,5", _ints, "label blur kernel choices"),
    "blur_sigma": _Key("0.1,2.0", _floats, "label blur sigma range"),
    "mixup_alpha": _Key("0.2", _float, "MixUp Beta(a,a) parameter"),
    "log_every": _Key("100", _int, "steps between training log lines"),
    "checkpoint_every": _Key("0", _int,
                             "steps between checkpoints (0: final only)"),
    "iterations": _Key("200", _int, "adaptation inner steps"),
    "adapt_lr": _Key("1e-4", _float, "adaptation learning rate"),
    "patience": _Key("20", _int, "adaptation early-stop patience"),
    "adapt_init": _Key("mean", _str,
                       "new bias entry init: mean | template | zeros"),
    "eval_crop": _Key("48", _int, "five-crop window for eval (0: whole image)"),
    "fold": _Key("test", _str, "dataset fold to evaluate"),
    "count": _Key("24", _int, "images to generate (gen-data)"),
}


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; unknown keys are caught by RunConfig."""
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected 'key = value', "
                                 f"got {raw.strip()!r}")
            out[key.strip()] = value.strip()
    return out


class RunConfig:
    """Typed view over the merged key space (defaults < file < flags)."""

    def __init__(self, *sources: Mapping[str, str]):
        merged = {k: spec.default for k, spec in KEYS.items()}
        for src in sources:
            for key, value in src.items():
                if key not in KEYS:
                    raise UsageError(f"unknown config key: {key}")
                if value is not None:
                    merged[key] = value
        self.raw = merged
        for key, value in merged.items():
            try:
                parsed = KEYS[key].parse(value)
            except ValueError as e:
                raise UsageError(f"bad value for {key}: {e}") from e
            setattr(self, key, parsed)
        if self.seed == "":
            self.seed = os.environ.get("VTM_SEED", "0")
        try:
            self.seed = int(self.seed)
        except ValueError as e:
            raise UsageError(f"bad seed: {e}") from e

    # ------------------------------------------------------------ converters

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            total_steps=self.steps,
            batch_episodes=self.batch_episodes,
            channels_per_episode=self.channels,
            support_size=self.support,
            query_size=self.query,
            lr_scratch=self.lr_scratch,
            lr_pretrained=self.lr_pretrained,
            poly_power=self.poly_power,
            crop=self.crop,
            seed=self.seed,
            augment=self.augment,
            jitter_scale=self.jitter_scale,
            jitter_shift=self.jitter_shift,
            blur_kernels=self.blur_kernels,
            blur_sigma=self.blur_sigma,
            mixup_alpha=self.mixup_alpha,
            log_every=self.log_every,
        )

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(
            iterations=self.iterations,
            lr=self.adapt_lr,
            patience=self.patience,
            seed=self.seed,
            init=self.adapt_init,
        )
