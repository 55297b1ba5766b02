"""Weight container: magic "VTWM", version, config document, raw tensors.

Layout, all little-endian:

    bytes 0..3   magic b"VTWM"
    bytes 4..5   format version (u16), currently 1
    bytes 6..9   config document length (u32)
    ...          config as canonical JSON (sorted keys, no whitespace)
    ...          tensors in manifest order, float32 row-major

Round-trips are bit-exact: load(save(w)) reproduces every tensor byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .model import LayerWeights, ModelConfig, ModelWeights, tensor_shapes, validate_weights
from .validation import ValidationError

MAGIC = b"VTWM"
FORMAT_VERSION = 1


def weights_to_bytes(weights: ModelWeights) -> bytes:
    validate_weights(weights)
    config_doc = weights.config.to_canonical_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION),
             struct.pack("<I", len(config_doc)), config_doc]
    for _, arr in weights.tensors():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def weights_from_bytes(blob: bytes) -> ModelWeights:
    if blob[:4] != MAGIC:
        raise ValidationError("not a VTWM container (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported container version {version}")
    (doc_len,) = struct.unpack_from("<I", blob, 6)
    doc_end = 10 + doc_len
    try:
        doc = json.loads(blob[10:doc_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"bad config document: {exc}") from exc
    config = ModelConfig.from_dict(doc)

    offset = doc_end
    arrays = {}
    for name, shape in tensor_shapes(config):
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob):
            raise ValidationError(f"container truncated inside tensor {name}")
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        arrays[name] = flat.reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise ValidationError(f"{len(blob) - offset} trailing bytes after tensors")

    layers = [
        LayerWeights(**{
            f.name: arrays[f"layers.{i}.{f.name}"] for f in fields(LayerWeights)
        })
        for i in range(config.num_layers)
    ]
    weights = ModelWeights(
        config=config,
        token_embedding=arrays["token_embedding"],
        layers=layers,
        final_norm_gain=arrays["final_norm_gain"],
        lm_head=arrays["lm_head"],
        vision_projector=arrays["vision_projector"],
    )
    validate_weights(weights)
    return weights


def save_weights(weights: ModelWeights, path: str | Path) -> None:
    Path(path).write_bytes(weights_to_bytes(weights))


def load_weights(path: str | Path) -> ModelWeights:
    return weights_from_bytes(Path(path).read_bytes())


def tensor_checksums(weights: ModelWeights) -> list[tuple[str, tuple[int, ...], str]]:
    """Per-tensor (name, shape, sha256-of-bytes), in manifest order."""
    out = []
    for name, arr in weights.tensors():
        digest = hashlib.sha256(
            np.ascontiguousarray(arr, dtype="<f4").tobytes()
        ).hexdigest()
        out.append((name, tuple(arr.shape), digest))
    return out


def container_checksum(weights: ModelWeights) -> str:
    return hashlib.sha256(weights_to_bytes(weights)).hexdigest()
