"""Versioned binary checkpoint container.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
UTF-8 JSON header (configs, training state, array manifest), then the raw
array bytes in manifest order, forced little-endian. Writing the same model
twice produces identical bytes, which the deterministic-rerun tests rely on.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import tensor
from .model import LanguageModel, ModelConfig, _BODY_CLASSES

MAGIC = b"NCELMCKP"
FORMAT_VERSION = 1

_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path, model: LanguageModel, train_config: dict, train_state: dict) -> None:
    params = model.parameters()
    precision = "float64" if model.out_w.dtype == np.float64 else "float32"
    tag = _DTYPE_TAGS[precision]
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in params.items()]
    header = {
        "format_version": FORMAT_VERSION,
        "precision": precision,
        "model_config": model.config.to_dict(),
        "train_config": train_config,
        "train_state": train_state,
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for k in params:
            f.write(np.ascontiguousarray(params[k]).astype(tag).tobytes())


def load_checkpoint(path):
    """Returns (model, train_config dict, train_state dict)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic {magic!r})")
        version, header_len = struct.unpack("<IQ", f.read(12))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len).decode("utf-8"))
        cfg = ModelConfig.from_dict(header["model_config"])
        precision = header["precision"]
        tag = _DTYPE_TAGS[precision]
        dtype = tensor.resolve_dtype(precision)
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            raw = np.frombuffer(f.read(count * np.dtype(tag).itemsize), dtype=tag)
            arrays[entry["name"]] = raw.reshape(shape).astype(dtype)

    body = _BODY_CLASSES[cfg.architecture](cfg, np.random.default_rng(0), dtype)
    for name in body.params:
        if name not in arrays:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        if body.params[name].shape != arrays[name].shape:
            raise ValueError(
                f"checkpoint parameter {name!r} has shape {arrays[name].shape}, "
                f"expected {body.params[name].shape}"
            )
        body.params[name] = arrays[name]
    model = LanguageModel(config=cfg, body=body, out_w=arrays["out_w"], out_c=arrays["out_c"])
    return model, header["train_config"], header["train_state"]
