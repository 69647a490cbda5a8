"""Datasets, synthetic biased data, oversampling, skewing and balanced splits.

Every function here is a pure function of its inputs and a seed; input
datasets are never modified.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from basefair.errors import DegenerateGroupError, ParseError
from basefair.io import atomic_write_text, read_json, write_json


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    target: int
    protected: int


@dataclass(frozen=True)
class Dataset:
    """Samples stored column-wise: ``features`` (N x D), ``targets``, ``protected``."""

    features: np.ndarray
    targets: np.ndarray
    protected: np.ndarray
    num_classes: int
    num_demographics: int
    provenance: Tuple[str, ...] = ()

    def __post_init__(self):
        x = np.array(self.features, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(x), -1)
        y = np.array(self.targets, dtype=np.int64)
        a = np.array(self.protected, dtype=np.int64)
        if not (len(x) == len(y) == len(a)):
            raise ValueError("features, targets and protected must have equal length")
        if self.num_classes < 1 or self.num_demographics < 1:
            raise ValueError("cardinalities must be positive")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("target label outside declared num_classes")
        if len(a) and (a.min() < 0 or a.max() >= self.num_demographics):
            raise ValueError("protected label outside declared num_demographics")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        for arr in (x, y, a):
            arr.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "protected", a)
        object.__setattr__(self, "provenance", tuple(self.provenance))

    def __len__(self):
        return len(self.targets)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def samples(self) -> List[LabeledSample]:
        return [
            LabeledSample(self.features[i], int(self.targets[i]), int(self.protected[i]))
            for i in range(len(self))
        ]

    @property
    def pairs(self) -> List[Tuple[int, int]]:
        """Every declared (protected, target) pair, in sorted order."""
        return [(a, y) for a in range(self.num_demographics) for y in range(self.num_classes)]

    def pair_indices(self) -> Dict[Tuple[int, int], np.ndarray]:
        return {
            (a, y): np.flatnonzero((self.protected == a) & (self.targets == y))
            for a, y in self.pairs
        }

    def pair_counts(self) -> Dict[Tuple[int, int], int]:
        return {k: len(v) for k, v in self.pair_indices().items()}

    def count_matrix(self) -> np.ndarray:
        """Counts indexed ``[target, protected]``."""
        m = np.zeros((self.num_classes, self.num_demographics), dtype=np.int64)
        np.add.at(m, (self.targets, self.protected), 1)
        return m

    def subset(self, indices, note: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        prov = self.provenance + ((note,) if note else ())
        return Dataset(
            self.features[idx], self.targets[idx], self.protected[idx],
            self.num_classes, self.num_demographics, prov,
        )

    def with_note(self, note: str) -> "Dataset":
        return Dataset(
            self.features, self.targets, self.protected,
            self.num_classes, self.num_demographics, self.provenance + (note,),
        )

    def metadata(self) -> dict:
        return {
            "num_samples": len(self),
            "num_classes": self.num_classes,
            "num_demographics": self.num_demographics,
            "feature_dim": self.feature_dim,
            "provenance": list(self.provenance),
            "pair_counts": [
                {"protected": a, "target": y, "count": c} for (a, y), c in self.pair_counts().items()
            ],
        }


# --- CSV -------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Optional declared cardinalities; ``None`` means infer from the file."""

    num_classes: Optional[int] = None
    num_demographics: Optional[int] = None
    feature_dim: Optional[int] = None


def _fmt(x: float) -> str:
    return repr(float(x))


def dataset_to_csv(dataset: Dataset) -> str:
    header = ["protected", "target"] + [f"f{i}" for i in range(dataset.feature_dim)]
    lines = [",".join(header)]
    for a, y, row in zip(dataset.protected.tolist(), dataset.targets.tolist(), dataset.features):
        lines.append(",".join([str(a), str(y)] + [_fmt(v) for v in row]))
    return "\n".join(lines) + "\n"


def write_csv(dataset: Dataset, path, sidecar: bool = True, extra_meta: Optional[dict] = None) -> None:
    """Write the CSV and, by default, a ``.meta.json`` sidecar next to it."""
    path = Path(path)
    atomic_write_text(path, dataset_to_csv(dataset))
    if sidecar:
        meta = dataset.metadata()
        if extra_meta:
            meta.update(extra_meta)
        write_json(sidecar_path(path), meta)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def load_csv(path, schema: Optional[CsvSchema] = None) -> Dataset:
    """Read a dataset CSV. Cardinalities come from ``schema``, then the sidecar, then the data."""
    path = Path(path)
    schema = schema or CsvSchema()
    meta = read_json(sidecar_path(path)) if sidecar_path(path).exists() else {}
    num_classes = schema.num_classes or meta.get("num_classes")
    num_demo = schema.num_demographics or meta.get("num_demographics")

    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        if header[:2] != ["protected", "target"]:
            raise ParseError("header must start with 'protected,target'", line=1)
        feat_cols = header[2:]
        expected = [f"f{i}" for i in range(len(feat_cols))]
        if feat_cols != expected:
            raise ParseError(f"feature columns must be named {','.join(expected) or 'f0,...'}", line=1)
        if not feat_cols:
            raise ParseError("no feature columns", line=1)
        if schema.feature_dim is not None and len(feat_cols) != schema.feature_dim:
            raise ParseError(f"expected {schema.feature_dim} feature columns, found {len(feat_cols)}", line=1)

        feats, ys, As = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} columns, found {len(row)}", line=lineno)
            try:
                a, y = int(row[0]), int(row[1])
            except ValueError:
                raise ParseError("labels must be integers", line=lineno) from None
            try:
                f = [float(v) for v in row[2:]]
            except ValueError:
                raise ParseError("non-numeric feature value", line=lineno) from None
            if not all(math.isfinite(v) for v in f):
                raise ParseError("non-finite feature value", line=lineno)
            if y < 0 or (num_classes is not None and y >= num_classes):
                raise ParseError(f"target {y} out of range (num_classes={num_classes})", line=lineno)
            if a < 0 or (num_demo is not None and a >= num_demo):
                raise ParseError(f"protected {a} out of range (num_demographics={num_demo})", line=lineno)
            feats.append(f)
            ys.append(y)
            As.append(a)

    if num_classes is None:
        num_classes = max(max(ys, default=0) + 1, 2)
    if num_demo is None:
        num_demo = max(As, default=0) + 1
    prov = tuple(meta.get("provenance", ())) + (f"loaded from {path.name}",)
    return Dataset(
        np.array(feats, dtype=float).reshape(len(feats), len(feat_cols)),
        np.array(ys, dtype=np.int64),
        np.array(As, dtype=np.int64),
        num_classes,
        num_demo,
        prov,
    )


# --- synthetic data -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian class clusters with per-demographic noise and offsets.

    Class centroids sit on scaled coordinate axes so any two are
    ``group_separation`` apart (requires ``feature_dim >= num_classes``).
    ``demographic_shift`` is one offset vector per demographic.
    """

    num_samples: int = 4000
    num_classes: int = 2
    num_demographics: int = 2
    feature_dim: int = 2
    group_separation: float = 2.0
    demographic_noise: Tuple[float, ...] = ()
    demographic_shift: Tuple[Tuple[float, ...], ...] = ()
    seed: int = 0

    def __post_init__(self):
        if min(self.num_samples, self.num_classes, self.num_demographics, self.feature_dim) < 1:
            raise ValueError("dimensions must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.feature_dim < self.num_classes:
            raise ValueError("feature_dim must be at least num_classes")
        noise = tuple(float(v) for v in self.demographic_noise) or (1.0,) * self.num_demographics
        if len(noise) != self.num_demographics:
            raise ValueError("demographic_noise needs one entry per demographic")
        if any(v < 0 for v in noise):
            raise ValueError("noise scales must be non-negative")
        shift = tuple(tuple(float(v) for v in row) for row in self.demographic_shift)
        if not shift:
            shift = ((0.0,) * self.feature_dim,) * self.num_demographics
        if len(shift) != self.num_demographics or any(len(r) != self.feature_dim for r in shift):
            raise ValueError("demographic_shift must be num_demographics x feature_dim")
        object.__setattr__(self, "demographic_noise", noise)
        object.__setattr__(self, "demographic_shift", shift)

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "num_classes": self.num_classes,
            "num_demographics": self.num_demographics,
            "feature_dim": self.feature_dim,
            "group_separation": self.group_separation,
            "demographic_noise": list(self.demographic_noise),
            "demographic_shift": [list(r) for r in self.demographic_shift],
            "seed": self.seed,
        }


def _check_pair_matrix(matrix, num_targets, num_demographics) -> np.ndarray:
    m = np.asarray(matrix, dtype=float)
    if m.shape != (num_targets, num_demographics):
        raise ValueError(f"pair matrix must have shape ({num_targets}, {num_demographics}), got {m.shape}")
    if not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1:
        raise ValueError("pair matrix entries must lie in [0, 1]")
    if m.max() != 1.0:
        raise ValueError("pair matrix must have maximum entry 1")
    return m


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``total`` proportional to ``weights``."""
    quotas = total * weights / weights.sum()
    base = np.floor(quotas).astype(np.int64)
    remainder = total - int(base.sum())
    # ties resolved by position for determinism
    order = np.argsort(-(quotas - base), kind="stable")
    base[order[:remainder]] += 1
    return base


def generate_synthetic(spec: SyntheticSpec, pair_distribution=None) -> Dataset:
    """Draw a dataset whose (target, protected) counts follow ``pair_distribution``.

    ``pair_distribution`` is indexed ``[target, protected]``; uniform when omitted.
    """
    C, A, D = spec.num_classes, spec.num_demographics, spec.feature_dim
    if pair_distribution is None:
        weights = np.ones((C, A))
    else:
        weights = _check_pair_matrix(pair_distribution, C, A)
    counts = _apportion(spec.num_samples, weights.ravel()).reshape(C, A)

    rng = np.random.default_rng(spec.seed)
    centroids = np.zeros((C, D))
    centroids[np.arange(C), np.arange(C)] = spec.group_separation / math.sqrt(2.0)
    centroids -= centroids.mean(axis=0)
    shift = np.array(spec.demographic_shift)

    feats, ys, As = [], [], []
    for y in range(C):
        for a in range(A):
            n = int(counts[y, a])
            if n == 0:
                continue
            noise = rng.standard_normal((n, D)) * spec.demographic_noise[a]
            feats.append(centroids[y] + shift[a] + noise)
            ys.append(np.full(n, y))
            As.append(np.full(n, a))
    x = np.concatenate(feats)
    y_all = np.concatenate(ys)
    a_all = np.concatenate(As)
    perm = rng.permutation(len(x))
    note = f"generate_synthetic(seed={spec.seed})"
    return Dataset(x[perm], y_all[perm], a_all[perm], C, A, (note,))


# --- balancing ----------------------------------------------------------------


def _require_nonempty_pairs(dataset: Dataset):
    idx = dataset.pair_indices()
    for key, members in idx.items():
        if len(members) == 0:
            raise DegenerateGroupError(key, f"pair (protected={key[0]}, target={key[1]}) has no samples")
    return idx


def oversample_balance(dataset: Dataset, seed: int) -> Dataset:
    """Duplicate random members of smaller pairs until every pair matches the largest.

    Originals keep their order; duplicates are appended pair by pair.
    """
    idx = _require_nonempty_pairs(dataset)
    target = max(len(v) for v in idx.values())
    rng = np.random.default_rng(seed)
    extra = []
    for key in sorted(idx):
        members = idx[key]
        short = target - len(members)
        if short > 0:
            extra.append(members[rng.integers(0, len(members), size=short)])
    note = f"oversample_balance(seed={seed}, per_pair={target})"
    if not extra:
        return dataset.with_note(note)
    order = np.concatenate([np.arange(len(dataset))] + extra)
    return dataset.subset(order, note)


# --- skew protocol ------------------------------------------------------------


@dataclass(frozen=True)
class SkewSpec:
    skew: float
    num_targets: int = 2
    num_demographics: int = 2
    class_order: Optional[Tuple[int, ...]] = None
    demographic_order: Optional[Tuple[int, ...]] = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.skew <= 1.0:
            raise ValueError(f"skew must lie in [0, 1], got {self.skew}")
        for name, order, n in (
            ("class_order", self.class_order, self.num_targets),
            ("demographic_order", self.demographic_order, self.num_demographics),
        ):
            if order is not None and sorted(order) != list(range(n)):
                raise ValueError(f"{name} must be a permutation of 0..{n - 1}")


def skew_matrix(spec: SkewSpec) -> np.ndarray:
    """Relative (target, protected) rates: corners 1 / 1-s, bilinear in between.

    Rows are targets, columns demographics. Grid position ``(i, j)`` holds
    class ``class_order[i]`` and demographic ``demographic_order[j]``.
    """
    R, C = spec.num_targets, spec.num_demographics
    if R < 2 or C < 2:
        raise ValueError("skew matrix needs at least 2 targets and 2 demographics")
    s = spec.skew
    u = (np.arange(R) / (R - 1))[:, None]
    v = (np.arange(C) / (C - 1))[None, :]
    grid = (1 - u) * (1 - v) + (1 - s) * (1 - u) * v + (1 - s) * u * (1 - v) + u * v
    rows = spec.class_order if spec.class_order is not None else range(R)
    cols = spec.demographic_order if spec.demographic_order is not None else range(C)
    out = np.empty_like(grid)
    out[np.ix_(list(rows), list(cols))] = grid
    return out


def skew_pair_counts(counts: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Per-pair sizes kept by ``apply_skew`` (both arrays ``[target, protected]``)."""
    positive = matrix > 0
    if not positive.any():
        raise ValueError("skew matrix has no positive entries")
    base = int(np.min(np.floor(counts[positive] / matrix[positive])))
    # Python's round() is round-half-even
    keep = np.zeros_like(counts)
    for (y, a), m in np.ndenumerate(matrix):
        keep[y, a] = round(base * m) if m > 0 else 0
    return keep


def apply_skew(dataset: Dataset, matrix, seed: int) -> Dataset:
    """Undersample so pair sizes follow ``matrix`` (indexed ``[target, protected]``).

    The largest base count compatible with every pair is used; pairs with a
    zero entry are dropped entirely. Kept samples retain their original order.
    """
    m = np.asarray(matrix, dtype=float)
    if m.shape != (dataset.num_classes, dataset.num_demographics):
        raise ValueError("skew matrix shape does not match dataset cardinalities")
    if not np.any(m > 0):
        raise ValueError("skew matrix has no positive entries")
    idx = _require_nonempty_pairs(dataset)
    keep = skew_pair_counts(dataset.count_matrix(), m)
    rng = np.random.default_rng(seed)
    chosen = []
    for a, y in sorted(idx):
        members = idx[(a, y)]
        k = int(keep[y, a])
        if k:
            chosen.append(rng.choice(members, size=k, replace=False))
    order = np.sort(np.concatenate(chosen))
    return dataset.subset(order, f"apply_skew(seed={seed})")


def mutual_information(counts: np.ndarray) -> float:
    """Mutual information (nats) of a contingency table."""
    p = counts / counts.sum()
    py = p.sum(axis=1, keepdims=True)
    pa = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (py @ pa)[nz])))


# --- splits -------------------------------------------------------------------


def balanced_test_split(dataset: Dataset, test_fraction: float, seed: int):
    """Split off a test set with the same number of samples from every pair."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    idx = _require_nonempty_pairs(dataset)
    # leave at least one sample of every pair for training
    k = min(
        int(math.floor(test_fraction * len(dataset) / len(idx))),
        min(len(v) for v in idx.values()) - 1,
    )
    if k < 1:
        raise DegenerateGroupError(
            None, "need at least one test sample per pair and two samples in every pair"
        )
    rng = np.random.default_rng(seed)
    test_idx = []
    for key in sorted(idx):
        test_idx.append(rng.choice(idx[key], size=k, replace=False))
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.ones(len(dataset), dtype=bool)
    mask[test_idx] = False
    train = dataset.subset(np.flatnonzero(mask), f"train split(seed={seed}, per_pair_test={k})")
    test = dataset.subset(test_idx, f"balanced test split(seed={seed}, per_pair={k})")
    return train, test


def triplicate_splits(dataset: Dataset, test_fraction: float, base_seed: int, n: int = 3):
    return [balanced_test_split(dataset, test_fraction, base_seed + i) for i in range(n)]
