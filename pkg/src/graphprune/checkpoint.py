"""Training checkpoints: a parameter blob plus a JSON sidecar.

The sidecar is written last, so a checkpoint exists only once both files
are complete.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .modelio import atomic_write, encode_blob, read_blob


def save_checkpoint(prefix, tensors: dict[str, np.ndarray], meta: dict[str, Any]) -> Path:
    prefix = Path(prefix)
    blob = prefix.with_suffix(".bin")
    atomic_write(blob, encode_blob(tensors))
    meta = dict(meta, blob=blob.name)
    side = prefix.with_suffix(".json")
    atomic_write(side, json.dumps(meta, indent=1, default=_jsonable))
    return side


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """``path`` may be the sidecar, the blob, or their common prefix."""
    path = Path(path)
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text())
    tensors = read_blob(side.parent / meta["blob"])
    return tensors, meta


def latest_checkpoint(directory) -> Path | None:
    sides = sorted(Path(directory).glob("ckpt_epoch*.json"))
    return sides[-1] if sides else None


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
