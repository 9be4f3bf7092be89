"""Versioned JSON checkpoints for resumable runs.

A checkpoint is a single JSON document with a format tag, a version, a
``kind`` naming the producing pipeline and an opaque ``payload`` the
pipeline serializes itself (genotypes, sensitivity windows, step sizes,
ranked list, iteration counter, RNG state, and for retraining pipelines the
trainer's working weights). Round-trips are lossless; numeric arrays travel
as base64 with an explicit dtype and shape.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointCorruptError, CheckpointVersionError

CHECKPOINT_FORMAT = "prunekit-checkpoint"
CHECKPOINT_VERSION = 1


def encode_array(arr: np.ndarray) -> dict[str, Any]:
    arr = np.ascontiguousarray(arr)
    return {
        "dtype": arr.dtype.str,
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes(order="C")).decode("ascii"),
    }


def decode_array(doc: dict[str, Any]) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype=np.dtype(doc["dtype"])).reshape(doc["shape"]).copy()


def encode_rng_state(state: dict) -> dict:
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def decode_rng_state(data: dict) -> dict:
    return {
        "bit_generator": data["bit_generator"],
        "state": {"state": int(data["state"]), "inc": int(data["inc"])},
        "has_uint32": int(data["has_uint32"]),
        "uinteger": int(data["uinteger"]),
    }


def save_checkpoint(kind: str, payload: dict[str, Any], path: str | Path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "payload": payload,
    }
    target = Path(path)
    tmp = target.with_suffix(target.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True))
    tmp.replace(target)


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> dict[str, Any]:
    raw = Path(path).read_text()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CheckpointCorruptError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    version = doc.get("version")
    if not isinstance(version, int) or version > CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {version!r} is newer than supported ({CHECKPOINT_VERSION})"
        )
    if expect_kind is not None and doc.get("kind") != expect_kind:
        raise CheckpointCorruptError(
            f"{path}: checkpoint kind {doc.get('kind')!r}, expected {expect_kind!r}"
        )
    return doc["payload"]
