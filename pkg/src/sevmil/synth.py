"""Synthetic MIL bags with planted per-instance classes, and the on-disk bag format.

A bag file is ``b"MILB"``, then little-endian ``u32`` version, ``u32 n`` and
``u32 d``, then ``n * d`` little-endian float32 values in row-major order.
Labels live in a JSON manifest next to the bag files.
"""
from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hierarchy import Hierarchy, Priority

MAGIC = b"MILB"
VERSION = 1
HEADER = struct.Struct("<4sIII")
BACKGROUND = -1


class BagFormatError(ValueError):
    code = "bag-format"


class MagicMismatch(BagFormatError):
    code = "magic-mismatch"


class TruncatedFile(BagFormatError):
    code = "truncated-file"


class TrailingData(BagFormatError):
    code = "trailing-data"


class UnsupportedVersion(BagFormatError):
    code = "unsupported-version"


class ManifestMismatch(BagFormatError):
    code = "manifest-mismatch"


@dataclass
class Bag:
    id: str
    instances: np.ndarray                  # (n, d) float32
    labels: tuple[int, ...]                # one per level, coarsest first
    instance_labels: np.ndarray | None = None  # finest class per instance, -1 = background

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float32)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise ValueError("a bag needs an (n, d) instance matrix with n >= 1")
        self.labels = tuple(int(x) for x in self.labels)
        if self.instance_labels is not None:
            self.instance_labels = np.asarray(self.instance_labels, dtype=np.int64)
            if self.instance_labels.shape != (self.instances.shape[0],):
                raise ValueError("instance_labels must have one entry per instance")

    @property
    def n(self) -> int:
        return self.instances.shape[0]

    @property
    def dim(self) -> int:
        return self.instances.shape[1]

    @property
    def finest_label(self) -> int:
        return self.labels[-1]


@dataclass
class SynthSpec:
    hierarchy: Hierarchy
    feature_dim: int
    instances_per_bag: tuple[int, int]
    class_centers: np.ndarray
    noise_sigma: float
    bags_per_class: int
    background_fraction: float = 0.0
    background_center: np.ndarray | None = None
    seed: int = 0
    id_prefix: str = "bag"

    def validate(self) -> None:
        n_min, n_max = self.instances_per_bag
        if n_min < 1 or n_max < n_min:
            raise ValueError(f"invalid instances_per_bag {self.instances_per_bag}")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be positive")
        if not 0 <= self.background_fraction < 1:
            raise ValueError("background_fraction must lie in [0, 1)")
        C = self.hierarchy.n_classes(self.hierarchy.finest)
        centers = np.asarray(self.class_centers, dtype=float)
        if centers.shape != (C, self.feature_dim):
            raise ValueError(f"class_centers must have shape ({C}, {self.feature_dim})")
        d = np.linalg.norm(centers[:, None] - centers[None, :], axis=-1)
        if np.any(d[~np.eye(C, dtype=bool)] == 0):
            raise ValueError("class centers must be pairwise distinct")
        if self.bags_per_class < 1:
            raise ValueError("bags_per_class must be positive")


def make_centers(n_classes: int, dim: int, separation: float, seed: int = 0) -> np.ndarray:
    """Random directions scaled so the closest pair of centers is ``separation`` apart."""
    rng = np.random.default_rng([seed, 0xC3])
    c = rng.standard_normal((n_classes, dim))
    d = np.linalg.norm(c[:, None] - c[None, :], axis=-1)
    d = d[~np.eye(n_classes, dtype=bool)].min() if n_classes > 1 else 1.0
    return c * (separation / d)


def _lower_classes(h: Hierarchy, c: int) -> list[int]:
    rel = h.relation_matrix(h.finest)
    return [c] + [j for j in range(rel.shape[0]) if rel[c, j] == Priority.MORE_URGENT]


def _make_bag(spec: SynthSpec, cls: int, index: int) -> Bag:
    rng = np.random.default_rng([spec.seed, index])
    h = spec.hierarchy
    n_min, n_max = spec.instances_per_bag
    n = int(rng.integers(n_min, n_max + 1))
    pool = _lower_classes(h, cls)
    labels = np.empty(n, dtype=np.int64)
    labels[0] = cls
    for i in range(1, n):
        if rng.random() < spec.background_fraction:
            labels[i] = BACKGROUND
        else:
            labels[i] = pool[int(rng.integers(len(pool)))]
    labels = labels[rng.permutation(n)]
    centers = np.asarray(spec.class_centers, dtype=float)
    bg = np.zeros(spec.feature_dim) if spec.background_center is None else np.asarray(spec.background_center)
    means = np.where((labels == BACKGROUND)[:, None], bg[None, :], centers[np.maximum(labels, 0)])
    x = means + spec.noise_sigma * rng.standard_normal((n, spec.feature_dim))
    finest = bag_label(h, labels)
    return Bag(f"{spec.id_prefix}{index:05d}", x.astype(np.float32), h.labels_for(finest), labels)


def bag_label(h: Hierarchy, instance_labels) -> int:
    """Finest bag label: the most urgent planted class present (background ignored)."""
    present = [int(c) for c in np.unique(instance_labels) if c != BACKGROUND]
    return h.most_urgent(present)


def generate(spec: SynthSpec, threads: int = 1) -> list[Bag]:
    """Bags ordered by class then replicate; each bag uses its own seed derived from its index."""
    spec.validate()
    C = spec.hierarchy.n_classes(spec.hierarchy.finest)
    jobs = [(c, c * spec.bags_per_class + r) for c in range(C) for r in range(spec.bags_per_class)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(lambda j: _make_bag(spec, *j), jobs))
    return [_make_bag(spec, c, i) for c, i in jobs]


def write_bag(bag: Bag, path) -> dict:
    """Write the feature file and return the bag's manifest entry."""
    x = np.ascontiguousarray(bag.instances, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, x.shape[0], x.shape[1]))
        fh.write(x.tobytes())
    entry = {"id": bag.id, "labels": list(bag.labels), "path": os.fspath(path)}
    if bag.instance_labels is not None:
        entry["instance_labels"] = [int(v) for v in bag.instance_labels]
    return entry


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise TruncatedFile(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, version, n, d = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MagicMismatch(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: unsupported version {version}")
    expected = HEADER.size + 4 * n * d
    if len(data) < expected:
        raise TruncatedFile(f"{path}: expected {expected} bytes, found {len(data)}")
    if len(data) > expected:
        raise TrailingData(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(n, d).astype(np.float32)


def check_labels(h: Hierarchy, labels, instance_labels=None, where: str = "") -> None:
    labels = list(labels)
    if len(labels) != h.depth:
        raise ManifestMismatch(f"{where}: {len(labels)} labels for a {h.depth}-level hierarchy")
    for lvl, c in enumerate(labels):
        if not 0 <= c < h.n_classes(lvl):
            raise ManifestMismatch(f"{where}: label {c} out of range at level {lvl}")
    if tuple(labels) != h.labels_for(labels[-1]):
        raise ManifestMismatch(f"{where}: labels {labels} disagree with the parent map")
    if instance_labels is not None:
        C = h.n_classes(h.finest)
        if any(not (v == BACKGROUND or 0 <= v < C) for v in instance_labels):
            raise ManifestMismatch(f"{where}: instance label out of range")


def read_bag(path, entry: dict, hierarchy: Hierarchy | None = None) -> Bag:
    x = read_features(path)
    inst = entry.get("instance_labels")
    if hierarchy is not None:
        check_labels(hierarchy, entry["labels"], inst, where=str(entry.get("id")))
    if inst is not None and len(inst) != x.shape[0]:
        raise ManifestMismatch(f"{entry.get('id')}: {len(inst)} instance labels for {x.shape[0]} instances")
    return Bag(entry["id"], x, tuple(entry["labels"]), None if inst is None else np.asarray(inst))


def write_dataset(bags, out_dir, manifest_name: str = "manifest.json") -> Path:
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    entries = []
    for bag in bags:
        entry = write_bag(bag, out / "bags" / f"{bag.id}.milb")
        entry["path"] = f"bags/{bag.id}.milb"
        entries.append(entry)
    path = out / manifest_name
    path.write_text(json.dumps(entries, indent=1, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> list[dict]:
    try:
        entries = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ManifestMismatch(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(entries, list):
        raise ManifestMismatch(f"{path}: manifest must be a JSON array")
    for e in entries:
        if not isinstance(e, dict) or not {"id", "labels", "path"} <= e.keys():
            raise ManifestMismatch(f"{path}: entry missing id/labels/path")
    return entries


def read_dataset(manifest_path, hierarchy: Hierarchy | None = None) -> list[Bag]:
    base = Path(manifest_path).parent
    return [read_bag(base / e["path"], e, hierarchy) for e in load_manifest(manifest_path)]
