"""Dataset layout, manifests, seeds and JSON persistence.

A dataset directory holds::

    manifest.json            schema "gridsplit-manifest" v1
    grid.json                GridSpec
    instances/<id>.json      Instance
    labels/<id>.json         optimiser label (z, lambda, mu, flows, solver info)

The manifest lists every file with its SHA-256 and the split of each
instance. Solver wall times are kept out of label files (they go to
``timings.csv``) so that reruns produce identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .grid_model import GridSpec, Instance, NodeBreakerGraph, build_node_breaker

MANIFEST_SCHEMA = "gridsplit-manifest"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


class BadRatios(ValueError):
    pass


class ManifestError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; ``record`` is written as JSON by the CLI."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.record = {"stage": stage, "error": message}


def derive_seed(root: int, *names) -> int:
    """Stage seed from the root seed: first 4 bytes of sha256("root/name/..."), big endian."""
    key = "/".join([str(int(root))] + [str(n) for n in names])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "big") & 0x7FFFFFFF


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj) -> None:
    """Atomic write of pretty, key-sorted JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")
    tmp.replace(path)


def read_json(path):
    return json.loads(Path(path).read_text())


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    tmp.replace(path)


def worker_count() -> int:
    try:
        cap = int(os.environ.get("GRIDSPLIT_THREADS", "0"))
    except ValueError:
        cap = 0
    n = os.cpu_count() or 1
    return max(1, min(n, cap) if cap > 0 else n)


@dataclass
class InstanceEntry:
    id: str
    file: str
    sha256: str
    seed: int
    split: str | None = None
    label: str | None = None
    label_sha256: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    grid_file: str = "grid.json"
    grid_sha256: str = ""
    entries: list[InstanceEntry] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def path(self) -> Path:
        return self.root / "manifest.json"

    def to_dict(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "version": MANIFEST_VERSION,
            "grid": {"file": self.grid_file, "sha256": self.grid_sha256},
            "instances": [vars(e) for e in self.entries],
            "provenance": self.provenance,
        }

    def save(self) -> None:
        write_json(self.path, self.to_dict())

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        if not (root / "manifest.json").exists():
            raise ManifestError(f"no manifest.json in {root}")
        d = read_json(root / "manifest.json")
        if d.get("schema") != MANIFEST_SCHEMA or d.get("version") != MANIFEST_VERSION:
            raise ManifestError("unsupported manifest schema")
        return cls(root, d["grid"]["file"], d["grid"]["sha256"],
                   [InstanceEntry(**e) for e in d["instances"]], d.get("provenance", {}))

    def verify(self) -> None:
        """Raise ManifestError when a referenced file is missing or altered."""
        checks = [(self.grid_file, self.grid_sha256)]
        checks += [(e.file, e.sha256) for e in self.entries]
        checks += [(e.label, e.label_sha256) for e in self.entries if e.label]
        for rel, digest in checks:
            p = self.root / rel
            if not p.exists():
                raise ManifestError(f"missing file {rel}")
            if file_hash(p) != digest:
                raise ManifestError(f"hash mismatch for {rel}")

    def grid(self) -> GridSpec:
        return GridSpec.from_dict(read_json(self.root / self.grid_file))

    def node_breaker(self) -> NodeBreakerGraph:
        return build_node_breaker(self.grid())

    def instance(self, e: InstanceEntry) -> Instance:
        return Instance.from_dict(read_json(self.root / e.file))

    def label(self, e: InstanceEntry) -> dict:
        if not e.label:
            raise ManifestError(f"instance {e.id} has no label")
        return read_json(self.root / e.label)

    def split(self, name: str) -> list[InstanceEntry]:
        return [e for e in self.entries if e.split == name]


def split_dataset(manifest: DatasetManifest, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetManifest:
    """Deterministic shuffled per-instance assignment to train/val/test.

    Counts are floor(ratio * n) for val and test, the remainder goes to train.
    """
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9 or ratios[0] <= 0:
        raise BadRatios(f"ratios must be three non-negative numbers summing to 1, got {ratios.tolist()}")
    n = len(manifest.entries)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(np.floor(ratios[1] * n + 1e-9))
    n_test = int(np.floor(ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test
    for rank, k in enumerate(order):
        manifest.entries[k].split = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    manifest.provenance["split"] = {"ratios": ratios.tolist(), "seed": int(seed)}
    return manifest


def tool_version() -> str:
    return __version__
