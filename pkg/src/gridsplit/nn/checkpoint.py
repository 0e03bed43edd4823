"""Checkpoint files.

A checkpoint is one JSON document::

    {
      "format": "gridsplit-checkpoint",
      "version": 1,
      "kind": "lgnn" | "heterognn",
      "arch": {...},            # constructor arguments
      "seed": int,
      "extra": {...},           # e.g. feature normalisation
      "params": [{"name": str, "shape": [..]}, ...],
      "n_params": int,
      "data": base64 of little-endian float64, parameters concatenated
              in the order of "params" (row-major)
    }

The order of "params" is the model's ``named_parameters()`` order.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .layers import Module

FORMAT = "gridsplit-checkpoint"
VERSION = 1


def flatten_params(model: Module) -> np.ndarray:
    return np.concatenate([p.data.ravel() for p in model.parameters()]) if model.parameters() else np.zeros(0)


def checkpoint_dict(model: Module, kind: str, arch: dict, seed: int, extra: dict | None = None) -> dict:
    named = model.named_parameters()
    flat = flatten_params(model).astype("<f8")
    return {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "arch": arch,
        "seed": int(seed),
        "extra": extra or {},
        "params": [{"name": n, "shape": list(p.shape)} for n, p in named],
        "n_params": int(flat.size),
        "data": base64.b64encode(flat.tobytes()).decode("ascii"),
    }


def load_params(model: Module, ckpt: dict) -> None:
    if ckpt.get("format") != FORMAT:
        raise ValueError("not a gridsplit checkpoint")
    flat = np.frombuffer(base64.b64decode(ckpt["data"]), dtype="<f8")
    named = model.named_parameters()
    if [n for n, _ in named] != [e["name"] for e in ckpt["params"]] or flat.size != model.n_parameters():
        raise ValueError("checkpoint does not match model architecture")
    pos = 0
    for (_, p), entry in zip(named, ckpt["params"]):
        k = p.data.size
        p.data[...] = flat[pos:pos + k].reshape(entry["shape"])
        pos += k


def save_checkpoint(path, ckpt: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(ckpt, sort_keys=True))
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    return json.loads(Path(path).read_text())
