"""Synthetic dense-prediction tasks, label transforms, and dataset I/O.

The generator renders procedural scenes (gradient background, axis-aligned
rectangles, disks) and derives per-family label channels with exact ground
truth from the scene geometry: blurred intensity, oriented edge magnitude,
shape-membership masks, distance-to-boundary, and affine color mixtures.
One image collection is shared by all families, mirroring a multi-task
dense-label corpus.

On disk a dataset is `manifest.txt` + `images/<id>.png` (8-bit RGB) +
`labels/<task>/<channel>/<id>.bin` (raw float32, format below). Images are
quantized to 8 bits at generation time so a save/load roundtrip is exact.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError
from .taskspace import TaskChannelSpec

CANVAS = 64
LABEL_MAGIC = b"VTM1\n"

SOBEL_DEFAULT_PARAMS = ((3, 1.0), (11, 2.0), (19, 3.0))
GRAY_WEIGHTS = (0.299, 0.587, 0.114)
SOBEL_NORM = 4.0 * np.sqrt(2.0)

_SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                     [-2.0, 0.0, 2.0],
                     [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


# ---------------------------------------------------------------------------
# label transforms


def to_gray(image: np.ndarray) -> np.ndarray:
    """(3, H, W) in [0,1] -> (H, W) luminance."""
    r, g, b = GRAY_WEIGHTS
    return (r * image[0] + g * image[1] + b * image[2]).astype(np.float32)


def gaussian_kernel_1d(size: int, sigma: float) -> np.ndarray:
    if size % 2 == 0:
        raise DataError(f"blur kernel size must be odd, got {size}")
    if sigma <= 0:
        raise DataError("sigma must be positive")
    half = size // 2
    x = np.arange(size) - half
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return (k / k.sum()).astype(np.float64)


def gaussian_blur(plane: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Separable blur with edge-inclusive symmetric ("reflect") padding."""
    k = gaussian_kernel_1d(size, sigma)
    out = ndimage.correlate1d(plane.astype(np.float64), k, axis=0,
                              mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def _sobel_pair(plane: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = ndimage.correlate(plane, _SOBEL_X, mode="reflect")
    gy = ndimage.correlate(plane, _SOBEL_Y, mode="reflect")
    return gx, gy


def sobel_channels(image: np.ndarray,
                   params=SOBEL_DEFAULT_PARAMS) -> np.ndarray:
    """(3, H, W) image -> (H, W, len(params)) edge-magnitude channels.

    Per (kernel, sigma) pair: gray-convert, Gaussian blur, 3x3 Sobel
    magnitude, normalize by the analytic bound 4*sqrt(2), clamp to [0,1].
    """
    gray = to_gray(np.asarray(image, np.float32)).astype(np.float64)
    chans = []
    for size, sigma in params:
        blurred = gaussian_blur(gray, size, sigma)
        gx, gy = _sobel_pair(blurred)
        mag = np.sqrt(gx * gx + gy * gy) / SOBEL_NORM
        chans.append(np.clip(mag, 0.0, 1.0))
    return np.stack(chans, axis=-1).astype(np.float32)


def quantile_channels(depth: np.ndarray, cuts) -> np.ndarray:
    """(H, W) depth in [0,1] -> (H, W, 5) re-normalized quantile bins.

    cuts are 4 interior cut points; bin p spans [q_{p-1}, q_p] with q_0=0,
    q_5=1 and maps values to clamp((v - lo)/(hi - lo), 0, 1).
    """
    cuts = [float(c) for c in cuts]
    if len(cuts) != 4 or any(b <= a for a, b in zip(cuts, cuts[1:])) \
            or cuts[0] <= 0.0 or cuts[-1] >= 1.0:
        raise DataError(f"need 4 strictly increasing cuts in (0,1), got {cuts}")
    edges = [0.0] + cuts + [1.0]
    depth = np.asarray(depth, np.float64)
    chans = [np.clip((depth - lo) / (hi - lo), 0.0, 1.0)
             for lo, hi in zip(edges, edges[1:])]
    return np.stack(chans, axis=-1).astype(np.float32)


# ---------------------------------------------------------------------------
# procedural scenes


def render_scene(rng: np.random.Generator, size: int = CANVAS) -> dict:
    """One scene: 8-bit-quantized image plus exact shape masks."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    t = xx * np.cos(phi) + yy * np.sin(phi)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    c0, c1 = rng.uniform(0.05, 0.95, size=(2, 3))
    img = c0[:, None, None] + t[None] * (c1 - c0)[:, None, None]

    masks = {"rect": np.zeros((size, size), bool),
             "disk": np.zeros((size, size), bool)}
    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0.05, 0.95, size=3)
        if rng.random() < 0.5:
            w = int(rng.integers(10, 28))
            h = int(rng.integers(10, 28))
            x0 = int(rng.integers(0, size - w))
            y0 = int(rng.integers(0, size - h))
            m = np.zeros((size, size), bool)
            m[y0:y0 + h, x0:x0 + w] = True
            masks["rect"] |= m
        else:
            r = int(rng.integers(6, 15))
            cx = int(rng.integers(r, size - r))
            cy = int(rng.integers(r, size - r))
            gy, gx = np.mgrid[0:size, 0:size]
            m = (gx - cx) ** 2 + (gy - cy) ** 2 <= r * r
            masks["disk"] |= m
        img = np.where(m[None], color[:, None, None], img)

    masks["any"] = masks["rect"] | masks["disk"]
    img8 = np.round(np.clip(img, 0.0, 1.0) * 255.0)
    return {"image": (img8 / 255.0).astype(np.float32), "masks": masks}


def boundary_distance(mask: np.ndarray, norm: float | None = None) -> np.ndarray:
    """Distance to the nearest shape-boundary pixel, normalized and clamped.

    Boundary pixels (mask pixels with a 4-neighbor outside) map to exactly 0.
    With no shape present the label is all ones (clamped far distance).
    """
    size = mask.shape[0]
    norm = norm or size / 4.0
    if not mask.any():
        return np.ones(mask.shape, np.float32)
    eroded = ndimage.binary_erosion(mask, structure=np.array(
        [[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool), border_value=0)
    boundary = mask & ~eroded
    dist = ndimage.distance_transform_edt(~boundary)
    return np.clip(dist / norm, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic families


@dataclass(frozen=True)
class SyntheticFamily:
    """One dense-label task over the shared image collection."""
    name: str
    kind: str            # blur | edge | mask | dist | colormix
    params: dict
    fold: str = "train"  # train | test

    def channel_count(self) -> int:
        return {"blur": 1, "edge": 2, "mask": 1, "dist": 1, "colormix": 3}[self.kind]

    def label_kind(self) -> str:
        return "binary" if self.kind == "mask" else "continuous"

    def specs(self) -> list[TaskChannelSpec]:
        kind = self.label_kind()
        loss = "cross_entropy" if kind == "binary" else "l1"
        return [TaskChannelSpec(self.name, c + 1, kind, loss)
                for c in range(self.channel_count())]

    def labels(self, scene: dict) -> np.ndarray:
        """(H, W, C) exact ground-truth label for one scene."""
        img = scene["image"]
        if self.kind == "blur":
            lab = gaussian_blur(to_gray(img), self.params["size"],
                                self.params["sigma"])
            return np.clip(lab, 0.0, 1.0)[..., None].astype(np.float32)
        if self.kind == "edge":
            blurred = gaussian_blur(to_gray(img), self.params["size"],
                                    self.params["sigma"])
            gx, gy = _sobel_pair(blurred)
            chans = []
            for off in (0.0, 90.0):
                theta = np.deg2rad(self.params["theta_deg"] + off)
                d = np.abs(np.cos(theta) * gx + np.sin(theta) * gy) / 4.0
                chans.append(np.clip(d, 0.0, 1.0))
            return np.stack(chans, axis=-1).astype(np.float32)
        if self.kind == "mask":
            return scene["masks"][self.params["shape"]] \
                .astype(np.float32)[..., None]
        if self.kind == "dist":
            return boundary_distance(scene["masks"][self.params["shape"]])[..., None]
        if self.kind == "colormix":
            rng = np.random.default_rng(self.params["mix_seed"])
            w = rng.uniform(-1.0, 1.0, size=(3, 3))
            b = rng.uniform(0.0, 1.0, size=3)
            flat = img.reshape(3, -1)
            out = (w @ flat + b[:, None]).T.reshape(img.shape[1], img.shape[2], 3)
            return np.clip(out, 0.0, 1.0).astype(np.float32)
        raise DataError(f"unknown family kind {self.kind!r}")


def default_families() -> list[SyntheticFamily]:
    """Six training families plus two held-out ones with unseen parameters."""
    return [
        SyntheticFamily("blur_soft", "blur", {"size": 5, "sigma": 1.0}),
        SyntheticFamily("blur_wide", "blur", {"size": 9, "sigma": 2.5}),
        SyntheticFamily("edge_axis", "edge",
                        {"size": 5, "sigma": 1.0, "theta_deg": 0.0}),
        SyntheticFamily("mask_any", "mask", {"shape": "any"}),
        SyntheticFamily("dist_any", "dist", {"shape": "any"}),
        SyntheticFamily("colormix_a", "colormix", {"mix_seed": 11}),
        SyntheticFamily("blur_mid", "blur", {"size": 7, "sigma": 1.75},
                        fold="test"),
        SyntheticFamily("blur_band", "blur", {"size": 9, "sigma": 1.4},
                        fold="test"),
    ]


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Shared images plus per-(task, channel) label maps."""
    ids: list[str]
    _images: dict = field(repr=False, default_factory=dict)
    _labels: dict = field(repr=False, default_factory=dict)  # (task,ch)->{id}
    specs: list[TaskChannelSpec] = field(default_factory=list)
    folds: dict[str, str] = field(default_factory=dict)      # task -> fold
    quantiles: dict[str, tuple] = field(default_factory=dict)

    def image(self, image_id: str) -> np.ndarray:
        src = self._images[image_id]
        return src() if callable(src) else src

    def label(self, task: str, channel: int, image_id: str) -> np.ndarray:
        src = self._labels[(task, channel)][image_id]
        return src() if callable(src) else src

    def channel_specs(self, fold: str | None = None) -> list[TaskChannelSpec]:
        if fold is None:
            return list(self.specs)
        return [s for s in self.specs if self.folds[s.task] == fold]

    def tasks(self, fold: str | None = None) -> list[str]:
        seen = []
        for s in self.channel_specs(fold):
            if s.task not in seen:
                seen.append(s.task)
        return seen


def gen_synthetic(families: list[SyntheticFamily], seed: int,
                  count: int) -> Dataset:
    if count < 1:
        raise DataError("need at least one image")
    names = [f.name for f in families]
    if len(set(names)) != len(names):
        raise DataError("duplicate family names")
    ids = [f"img{i:05d}" for i in range(count)]
    images: dict[str, np.ndarray] = {}
    labels: dict[tuple[str, int], dict[str, np.ndarray]] = {}
    specs: list[TaskChannelSpec] = []
    folds: dict[str, str] = {}
    for fam in families:
        folds[fam.name] = fam.fold
        specs.extend(fam.specs())
        for c in range(1, fam.channel_count() + 1):
            labels[(fam.name, c)] = {}
    for i, image_id in enumerate(ids):
        scene = render_scene(np.random.default_rng((seed, i)))
        images[image_id] = scene["image"]
        for fam in families:
            lab = fam.labels(scene)
            for c in range(1, fam.channel_count() + 1):
                labels[(fam.name, c)][image_id] = \
                    np.ascontiguousarray(lab[:, :, c - 1])
    return Dataset(ids, images, labels, specs, folds)


# ---------------------------------------------------------------------------
# on-disk format


def write_label_file(path: Path, label: np.ndarray) -> None:
    label = np.asarray(label, np.float32)
    h, w = label.shape
    payload = LABEL_MAGIC + f"{h} {w}\n".encode() \
        + label.astype("<f4").tobytes()
    path.write_bytes(payload)


def read_label_file(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if data[:len(LABEL_MAGIC)] != LABEL_MAGIC:
        raise DataError(f"bad label magic in {path}")
    try:
        nl = data.index(b"\n", len(LABEL_MAGIC))
        h, w = map(int, data[len(LABEL_MAGIC):nl].split())
    except ValueError as e:
        raise DataError(f"bad label header in {path}") from e
    body = np.frombuffer(data[nl + 1:], dtype="<f4")
    if body.size != h * w:
        raise DataError(f"label payload size mismatch in {path}: "
                        f"expected {h * w} floats, found {body.size}")
    label = body.reshape(h, w)
    if label.min() < 0.0 or label.max() > 1.0:
        raise DataError(f"label values outside [0,1] in {path}")
    return label.copy()


def save_dataset(ds: Dataset, root: Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = ["vtm-dataset 1"]
    for image_id in ds.ids:
        img = ds.image(image_id)
        lines.append(f"image {image_id} {img.shape[1]} {img.shape[2]}")
        img8 = np.round(img * 255.0).astype(np.uint8)
        Image.fromarray(np.transpose(img8, (1, 2, 0))).save(
            root / "images" / f"{image_id}.png")
    for task in ds.tasks():
        specs = [s for s in ds.specs if s.task == task]
        kind = specs[0].label_kind
        flip = int(all(s.flip_allowed for s in specs))
        line = f"task {task} {len(specs)} {kind} {flip} {ds.folds[task]}"
        if task in ds.quantiles:
            line += " " + ",".join(f"{q:g}" for q in ds.quantiles[task])
        lines.append(line)
        for s in specs:
            cdir = root / "labels" / task / str(s.channel)
            cdir.mkdir(parents=True, exist_ok=True)
            for image_id in ds.ids:
                write_label_file(cdir / f"{image_id}.bin",
                                 ds.label(task, s.channel, image_id))
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def _load_image(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing image file {path}")
    arr = np.asarray(Image.open(path).convert("RGB"), np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_dataset(root: Path) -> Dataset:
    """Parse the manifest and return a lazily resolving Dataset."""
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"missing manifest {manifest}")
    lines = manifest.read_text().splitlines()
    if not lines or not lines[0].startswith("vtm-dataset"):
        raise DataError(f"unrecognized manifest header in {manifest}")

    ids: list[str] = []
    sizes: dict[str, tuple[int, int]] = {}
    specs: list[TaskChannelSpec] = []
    folds: dict[str, str] = {}
    quantiles: dict[str, tuple] = {}
    images: dict = {}
    labels: dict = {}

    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "image":
            if len(parts) != 4:
                raise DataError(f"{manifest}:{ln}: bad image line")
            image_id, h, w = parts[1], int(parts[2]), int(parts[3])
            ids.append(image_id)
            sizes[image_id] = (h, w)
            path = root / "images" / f"{image_id}.png"
            if not path.exists():
                raise DataError(f"{manifest}:{ln}: missing image file {path}")
            images[image_id] = functools.partial(_load_image, path)
        elif parts[0] == "task":
            if len(parts) not in (6, 7):
                raise DataError(f"{manifest}:{ln}: bad task line")
            task, nchan, kind, flip, fold = (parts[1], int(parts[2]), parts[3],
                                             parts[4] == "1", parts[5])
            if fold not in ("train", "test"):
                raise DataError(f"{manifest}:{ln}: bad fold {fold!r}")
            folds[task] = fold
            if len(parts) == 7:
                quantiles[task] = tuple(float(q) for q in parts[6].split(","))
            loss = "cross_entropy" if kind == "binary" else "l1"
            for c in range(1, nchan + 1):
                specs.append(TaskChannelSpec(task, c, kind, loss,
                                             flip_allowed=flip))
        else:
            raise DataError(f"{manifest}:{ln}: unknown directive {parts[0]!r}")
    if not ids:
        raise DataError(f"{manifest}: no images listed")
    for s in specs:
        chan_labels = {}
        for image_id in ids:
            path = root / "labels" / s.task / str(s.channel) / f"{image_id}.bin"
            if not path.exists():
                raise DataError(f"missing label file {path}")
            chan_labels[image_id] = functools.partial(read_label_file, path)
        labels[(s.task, s.channel)] = chan_labels
    return Dataset(ids, images, labels, specs, folds, quantiles)
