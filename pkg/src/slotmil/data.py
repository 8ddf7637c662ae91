"""Bags, the SMB1 bag-file format, manifests, synthetic data, k-fold splits.

A bag is one unit of prediction: an M-by-d_h matrix of instance features
plus a single bag-level label. Instance-level (latent) labels are optional
and, when present on binary data, determine the bag label as
y = 1 - prod(1 - y_m): a bag is positive iff any instance is.

On disk a bag is a little-endian binary file:

    magic "SMB1" | version u32 (=1) | M u32 | d_h u32 | M*d_h float32, row-major

and a dataset is a UTF-8 CSV manifest with header ``bag_id,label,split,path``
(paths relative to the manifest's directory, split one of train/valid/test),
optionally accompanied by a ``latents.csv`` sidecar with header
``bag_id,patch_index,latent_label``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    FormatError,
    ParameterError,
    TruncationError,
    ValidationError,
)
from .numerics import RngStream, sample_subset

_MAGIC = b"SMB1"
_VERSION = 1
SPLITS = ("train", "valid", "test")


@dataclass
class Bag:
    """One bag: feature matrix, bag label, optional per-instance labels."""

    bag_id: str
    features: np.ndarray  # (M, d_h) float32
    label: int
    latent_labels: Optional[list[int]] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValidationError(f"bag {self.bag_id}: features must be (M>=1, d_h)")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError(f"bag {self.bag_id}: non-finite feature values")
        if self.latent_labels is not None and len(self.latent_labels) != self.num_instances:
            raise ValidationError(f"bag {self.bag_id}: latent label count != M")

    @property
    def num_instances(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Dataset:
    bags: list[Bag]
    num_classes: int
    feature_dim: int
    split_tags: list[str]  # one of SPLITS per bag

    def indices(self, split: str) -> list[int]:
        return [i for i, tag in enumerate(self.split_tags) if tag == split]

    def pool_indices(self) -> list[int]:
        """All non-test bags: the pool that k-fold cross-validation re-splits."""
        return [i for i, tag in enumerate(self.split_tags) if tag != "test"]


def write_bag_file(bag: Bag, path) -> None:
    """Serialize one bag; the float32 payload round-trips bit-exactly."""
    m, d = bag.features.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", _VERSION, m, d))
        f.write(np.ascontiguousarray(bag.features, dtype="<f4").tobytes())


def read_bag_file(path, bag_id: Optional[str] = None, label: int = 0) -> Bag:
    """Read one SMB1 file; id and label come from the manifest, not the file."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    if len(raw) < 16:
        raise TruncationError(f"{path}: header truncated")
    version, m, d = struct.unpack("<III", raw[4:16])
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    need = 16 + 4 * m * d
    if len(raw) < need:
        raise TruncationError(f"{path}: header declares {m}x{d} values but file is short")
    feats = np.frombuffer(raw[16:need], dtype="<f4").reshape(m, d).copy()
    return Bag(bag_id or Path(path).stem, feats, label)


def load_manifest(path, num_classes: Optional[int] = None) -> Dataset:
    """Load a manifest CSV and every bag file it references.

    ``num_classes`` declares the label range; when omitted it is inferred
    as max(label) + 1. Errors name the offending row.
    """
    path = Path(path)
    base = path.parent
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        expected = ["bag_id", "label", "split", "path"]
        if reader.fieldnames != expected:
            raise FormatError(f"{path}: manifest header must be {','.join(expected)}")
        for row in reader:
            rows.append(row)
    if not rows:
        raise ValidationError(f"{path}: empty manifest")

    seen_ids = set()
    bags, tags = [], []
    inferred_c = 1 + max(int(r["label"]) for r in rows)
    c = num_classes if num_classes is not None else inferred_c
    for i, row in enumerate(rows):
        where = f"{path} row {i + 2}"
        bag_id = row["bag_id"]
        if bag_id in seen_ids:
            raise ValidationError(f"{where}: duplicate bag_id {bag_id!r}")
        seen_ids.add(bag_id)
        label = int(row["label"])
        if not 0 <= label < c:
            raise ValidationError(f"{where}: label {label} out of range for {c} classes")
        split = row["split"]
        if split not in SPLITS:
            raise ValidationError(f"{where}: split {split!r} not one of {SPLITS}")
        bag_path = base / row["path"]
        if not bag_path.exists():
            raise OSError(f"{where}: bag file {bag_path} is missing")
        bags.append(read_bag_file(bag_path, bag_id=bag_id, label=label))
        tags.append(split)

    d = bags[0].feature_dim
    for bag in bags:
        if bag.feature_dim != d:
            raise FormatError(f"bag {bag.bag_id}: feature dim {bag.feature_dim} != {d}")
    return Dataset(bags, c, d, tags)


def write_latents(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["bag_id", "patch_index", "latent_label"])
        for bag in dataset.bags:
            if bag.latent_labels is None:
                continue
            for i, y in enumerate(bag.latent_labels):
                w.writerow([bag.bag_id, i, y])


def attach_latents(dataset: Dataset, path) -> None:
    """Attach a latents.csv sidecar's instance labels to the bags in place."""
    per_bag: dict[str, dict[int, int]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for row in reader:
            per_bag.setdefault(row["bag_id"], {})[int(row["patch_index"])] = int(row["latent_label"])
    for bag in dataset.bags:
        entries = per_bag.get(bag.bag_id)
        if entries is None:
            continue
        bag.latent_labels = [entries.get(i, 0) for i in range(bag.num_instances)]


def load_dataset_dir(directory, num_classes: Optional[int] = None) -> Dataset:
    """Load ``manifest.csv`` plus the optional ``latents.csv`` sidecar."""
    directory = Path(directory)
    ds = load_manifest(directory / "manifest.csv", num_classes=num_classes)
    sidecar = directory / "latents.csv"
    if sidecar.exists():
        attach_latents(ds, sidecar)
    return ds


@dataclass
class SynthConfig:
    """Recipe for a synthetic two-class bag dataset.

    Negative bags draw every instance from N(mu_neg, sigma^2 I). Positive
    bags draw a fraction r ~ U[pos_frac_range] of instances (at least one)
    from N(mu_pos, sigma^2 I) and the rest from the negative component, so
    the bag label always follows from the instance labels. ``shift_delta``
    is added to every test-split instance to model a train/test
    distribution shift.
    """

    n_pos: int
    n_neg: int
    m_range: tuple[int, int]
    d_h: int
    mu_neg: np.ndarray
    mu_pos: np.ndarray
    sigma: float
    pos_frac_range: tuple[float, float]
    shift_delta: np.ndarray
    seed: int
    train_frac: float = 0.7
    valid_frac: float = 0.15

    def __post_init__(self):
        self.mu_neg = np.asarray(self.mu_neg, dtype=np.float64)
        self.mu_pos = np.asarray(self.mu_pos, dtype=np.float64)
        self.shift_delta = np.asarray(self.shift_delta, dtype=np.float64)
        lo, hi = self.pos_frac_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ParameterError(f"pos_frac_range must satisfy 0 < min <= max <= 1, got {self.pos_frac_range}")
        if self.m_range[0] < 1 or self.m_range[0] > self.m_range[1]:
            raise ParameterError(f"m_range must satisfy 1 <= min <= max, got {self.m_range}")
        if self.n_pos < 1 or self.n_neg < 1:
            raise ParameterError("need at least one bag of each class")
        for v, name in ((self.mu_neg, "mu_neg"), (self.mu_pos, "mu_pos"), (self.shift_delta, "shift_delta")):
            if v.shape != (self.d_h,):
                raise ParameterError(f"{name} must have length d_h={self.d_h}")
        if not (0.0 < self.train_frac < 1.0 and 0.0 <= self.valid_frac < 1.0
                and self.train_frac + self.valid_frac < 1.0):
            raise ParameterError("split fractions must leave room for a test split")


def _assign_splits(n: int, cfg: SynthConfig, rng: RngStream) -> list[str]:
    order = rng.permutation(n)
    n_train = int(round(cfg.train_frac * n))
    n_valid = int(round(cfg.valid_frac * n))
    tags = [""] * n
    for rank, idx in enumerate(order):
        if rank < n_train:
            tags[idx] = "train"
        elif rank < n_train + n_valid:
            tags[idx] = "valid"
        else:
            tags[idx] = "test"
    return tags


def synth_dataset(cfg: SynthConfig) -> Dataset:
    """Generate a deterministic synthetic dataset from the config's seed."""
    rng = RngStream(cfg.seed, stream_id=0)
    bags, tags = [], []

    specs = [("neg", i) for i in range(cfg.n_neg)] + [("pos", i) for i in range(cfg.n_pos)]
    class_tags = {
        "neg": _assign_splits(cfg.n_neg, cfg, RngStream(cfg.seed, stream_id=1)),
        "pos": _assign_splits(cfg.n_pos, cfg, RngStream(cfg.seed, stream_id=2)),
    }
    m_lo, m_hi = cfg.m_range
    frac_lo, frac_hi = cfg.pos_frac_range
    for kind, i in specs:
        m = m_lo + rng.randbelow(m_hi - m_lo + 1)
        feats = rng.normals((m, cfg.d_h), sigma=cfg.sigma) + cfg.mu_neg
        latents = [0] * m
        if kind == "pos":
            r = rng.uniform(frac_lo, frac_hi)
            n_posinst = max(1, int(r * m + 0.5))
            for j in sample_subset(rng, m, n_posinst):
                feats[j] += cfg.mu_pos - cfg.mu_neg
                latents[j] = 1
        split = class_tags[kind][i]
        if split == "test":
            feats = feats + cfg.shift_delta
        label = 1 - int(np.prod([1 - y for y in latents]))
        bags.append(Bag(f"{kind}{i:04d}", feats.astype(np.float32), label, latents))
        tags.append(split)
    return Dataset(bags, 2, cfg.d_h, tags)


def stratified_kfold(dataset: Dataset, k: int, seed: int) -> list[tuple[list[int], list[int]]]:
    """Split the non-test pool into k stratified (train, valid) partitions.

    Each class's pool members are shuffled once and dealt into k chunks
    whose sizes differ by at most one; fold f's validation set is the
    union of chunk f over classes, and its training set is the rest of
    the pool. Deterministic for a given seed.
    """
    if k < 2:
        raise ParameterError(f"stratified_kfold: k must be >= 2, got {k}")
    pool = dataset.pool_indices()
    by_class: dict[int, list[int]] = {}
    for idx in pool:
        by_class.setdefault(dataset.bags[idx].label, []).append(idx)
    for label, members in sorted(by_class.items()):
        if len(members) < k:
            raise ParameterError(f"class {label} has {len(members)} pool bags, fewer than k={k}")

    chunks_per_class = {}
    for offset, (label, members) in enumerate(sorted(by_class.items())):
        rng = RngStream(seed, stream_id=100 + offset)
        order = [members[i] for i in rng.permutation(len(members))]
        n = len(order)
        base, extra = divmod(n, k)
        chunks, start = [], 0
        for f in range(k):
            size = base + (1 if f < extra else 0)
            chunks.append(order[start:start + size])
            start += size
        chunks_per_class[label] = chunks

    folds = []
    for f in range(k):
        valid = sorted(i for label in chunks_per_class for i in chunks_per_class[label][f])
        valid_set = set(valid)
        train = sorted(i for i in pool if i not in valid_set)
        folds.append((train, valid))
    return folds
