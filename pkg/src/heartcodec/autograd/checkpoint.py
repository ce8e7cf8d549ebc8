"""Textual checkpoint container.

JSON with sorted keys and 32-bit values written as the shortest decimal that
round-trips to the same float32, so files are byte-stable across platforms.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_NAME = "heartcodec-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode_array(arr) -> dict:
    a = np.asarray(arr, dtype=np.float32)
    return {
        "shape": list(a.shape),
        "values": [float(str(v)) for v in a.reshape(-1)],
    }


def _decode_array(obj: dict, dtype=np.float32) -> np.ndarray:
    a = np.asarray(obj["values"], dtype=np.float32).astype(dtype)
    return a.reshape(obj["shape"])


def dumps(
    architecture: dict,
    params: dict[str, np.ndarray],
    buffers: dict[str, np.ndarray],
    adam: dict | None = None,
    extra: dict | None = None,
) -> str:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "architecture": architecture,
        "params": {k: _encode_array(v) for k, v in params.items()},
        "buffers": {k: _encode_array(v) for k, v in buffers.items()},
    }
    if adam is not None:
        doc["adam"] = {
            **{k: adam[k] for k in ("lr", "weight_decay", "beta1", "beta2", "eps", "step")},
            "m": [_encode_array(x) for x in adam["m"]],
            "v": [_encode_array(x) for x in adam["v"]],
        }
    if extra:
        doc["extra"] = extra
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def save(path, **kwargs) -> None:
    Path(path).write_text(dumps(**kwargs), encoding="utf-8")


def load(path) -> dict:
    """Parse a checkpoint into plain dicts of float32 arrays."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    if doc.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path}: not a {FORMAT_NAME} file")
    if doc.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    out = {
        "architecture": doc["architecture"],
        "params": {k: _decode_array(v) for k, v in doc["params"].items()},
        "buffers": {k: _decode_array(v) for k, v in doc["buffers"].items()},
        "extra": doc.get("extra", {}),
    }
    if "adam" in doc:
        ad = dict(doc["adam"])
        ad["m"] = [_decode_array(x) for x in ad["m"]]
        ad["v"] = [_decode_array(x) for x in ad["v"]]
        out["adam"] = ad
    return out
