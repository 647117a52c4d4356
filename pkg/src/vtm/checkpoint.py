"""Checkpoint format: text manifest followed by one float32 blob.

Layout of a checkpoint file::

    vtm-checkpoint 1
    config <n>
    <key> = <value>          (n lines, sorted by key)
    params <count> <nbytes> sha256 <hex>
    <name> <d0,d1,...> <offset>   (count lines, lexicographic by name)
    blob
    <raw little-endian float32 bytes>

Offsets are in elements into the blob. The config section snapshots both
the caller-supplied run settings and the ``model.*`` keys needed to rebuild
the architecture, so ``load_model`` works from the file alone. Save order
is fully deterministic, which makes byte-identity a usable test for
reproducible training.
"""

from __future__ import annotations

import ast
import dataclasses
import hashlib
from typing import Mapping

import numpy as np

from . import decoder as dec
from . import encoders as enc
from . import matching as mt
from .autodiff import ParamSet
from .errors import DataError
from .model import Model

MAGIC = "vtm-checkpoint 1"


# --------------------------------------------------------------------- config


def _model_config(model: Model) -> dict[str, str]:
    out = {"model.matching_mode": model.matching_mode}
    for tag, cfg in (("enc", model.enc_cfg), ("mat", model.mat_cfg),
                     ("dec", model.dec_cfg)):
        for f in dataclasses.fields(cfg):
            out[f"model.{tag}.{f.name}"] = repr(getattr(cfg, f.name))
    return out


def _config_lines(model: Model, config: Mapping[str, object] | None) -> dict:
    merged: dict[str, str] = {}
    for key, value in (config or {}).items():
        text = value if isinstance(value, str) else repr(value)
        if not key or any(ch.isspace() for ch in key) or "=" in key:
            raise DataError(f"bad config key {key!r}")
        if "\n" in text:
            raise DataError(f"config value for {key!r} spans lines")
        merged[key] = text
    for key, text in _model_config(model).items():
        merged[key] = text
    return merged


def _rebuild(config: dict[str, str]) -> Model:
    def section(tag):
        prefix = f"model.{tag}."
        return {k[len(prefix):]: ast.literal_eval(v)
                for k, v in config.items() if k.startswith(prefix)}

    try:
        return Model.build(enc_cfg=enc.EncoderConfig(**section("enc")),
                           mat_cfg=mt.MatchingConfig(**section("mat")),
                           dec_cfg=dec.DecoderConfig(**section("dec")),
                           matching_mode=config["model.matching_mode"])
    except (KeyError, TypeError, ValueError, SyntaxError) as e:
        raise DataError(f"checkpoint lacks a usable model config: {e}") from e


# ----------------------------------------------------------------------- save


def save(path, model: Model, config: Mapping[str, object] | None = None) -> None:
    """Write model parameters (shared + bias bank) and a config snapshot."""
    names = model.ps.names()            # already sorted
    index = []
    chunks = []
    offset = 0
    for name in names:
        data = model.ps[name].data
        if data.dtype != np.float32:
            raise DataError(f"parameter {name} is {data.dtype}, not float32")
        shape = ",".join(str(d) for d in data.shape) or "-"
        index.append(f"{name} {shape} {offset}")
        chunks.append(np.ascontiguousarray(data))
        offset += data.size
    blob = b"".join(c.tobytes() for c in chunks)
    digest = hashlib.sha256(blob).hexdigest()
    cfg = _config_lines(model, config)
    lines = [MAGIC, f"config {len(cfg)}"]
    lines += [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    lines.append(f"params {len(index)} {len(blob)} sha256 {digest}")
    lines += index
    lines.append("blob")
    with open(path, "wb") as f:
        f.write("\n".join(lines).encode() + b"\n")
        f.write(blob)


# ----------------------------------------------------------------------- load


def _read_line(f, path) -> str:
    line = f.readline()
    if not line:
        raise DataError(f"truncated checkpoint: {path}")
    return line.decode().rstrip("\n")


def load(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Parse a checkpoint into (config, name -> float32 array)."""
    with open(path, "rb") as f:
        if _read_line(f, path) != MAGIC:
            raise DataError(f"not a checkpoint file: {path}")
        head = _read_line(f, path).split()
        if len(head) != 2 or head[0] != "config":
            raise DataError(f"bad config header in {path}")
        config: dict[str, str] = {}
        for _ in range(int(head[1])):
            line = _read_line(f, path)
            key, sep, value = line.partition(" = ")
            if not sep:
                raise DataError(f"bad config line in {path}: {line!r}")
            config[key] = value
        head = _read_line(f, path).split()
        if len(head) != 5 or head[0] != "params" or head[3] != "sha256":
            raise DataError(f"bad params header in {path}")
        count, nbytes, digest = int(head[1]), int(head[2]), head[4]
        index: list[tuple[str, tuple[int, ...], int]] = []
        for _ in range(count):
            parts = _read_line(f, path).split()
            if len(parts) != 3:
                raise DataError(f"bad index line in {path}")
            name, shape_s, off = parts
            shape = () if shape_s == "-" else tuple(
                int(d) for d in shape_s.split(","))
            index.append((name, shape, int(off)))
        if _read_line(f, path) != "blob":
            raise DataError(f"missing blob sentinel in {path}")
        blob = f.read()
    if len(blob) != nbytes:
        raise DataError(f"blob size mismatch in {path}: "
                        f"expected {nbytes}, got {len(blob)}")
    if hashlib.sha256(blob).hexdigest() != digest:
        raise DataError(f"blob hash mismatch in {path}")
    flat = np.frombuffer(blob, dtype="<f4")
    params: dict[str, np.ndarray] = {}
    for name, shape, off in index:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if off + size > flat.size:
            raise DataError(f"index overruns blob for {name} in {path}")
        params[name] = flat[off:off + size].reshape(shape).copy()
    return config, params


def load_model(path) -> tuple[Model, dict[str, str]]:
    """Rebuild the model a checkpoint was saved from and load its weights.

    Returns the model plus the config snapshot; re-saving with that config
    reproduces the original file byte for byte.
    """
    config, params = load(path)
    model = _rebuild(config)
    ps: ParamSet = model.ps
    bias_keys: list[str] = []
    for name, value in params.items():
        if name.startswith("bias/"):
            key = name.split("/")[1]
            if key not in bias_keys and key not in model.bank:
                bias_keys.append(key)
            if name not in ps:
                ps.add(name, value, task_specific=True)
                continue
        if name not in ps:
            raise DataError(f"checkpoint parameter {name} not in model")
        tensor = ps[name]
        if tensor.data.shape != value.shape:
            raise DataError(f"shape mismatch for {name}: checkpoint "
                            f"{value.shape} vs model {tensor.data.shape}")
        tensor.data = value
    for name in ps.names():
        if name not in params:
            raise DataError(f"model parameter {name} missing from checkpoint")
    for key in bias_keys:
        model.bank.adopt(key)
    return model, config
