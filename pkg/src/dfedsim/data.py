"""Labeled datasets, non-IID partitioners, and CSV ingestion.

Partitions are reproducible functions of (dataset labels, parameters, seed)
and always leave every client with at least one sample.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .numerics import RngStream


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # (n, d_in) float64
    labels: np.ndarray  # (n,) int64 in 0..C-1
    name: str = "dataset"

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if f.ndim != 2 or y.ndim != 1 or f.shape[0] != y.shape[0]:
            raise DataError(
                f"features {f.shape} and labels {y.shape} are inconsistent"
            )
        if y.size and y.min() < 0:
            raise DataError("labels must be non-negative class ids")
        if not np.all(np.isfinite(f)):
            raise DataError("features contain non-finite values")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.n else 0


@dataclass(frozen=True)
class Partition:
    """Per-client sample-index lists (disjoint, all clients nonempty)."""

    assignments: tuple  # tuple of int64 arrays
    params: dict
    seed: int

    def __post_init__(self):
        seen = set()
        for cid, idx in enumerate(self.assignments):
            if len(idx) == 0:
                raise DataError(f"client {cid} received no samples")
            s = set(int(i) for i in idx)
            if seen & s:
                raise DataError("partition assignments overlap")
            seen |= s

    @property
    def m(self) -> int:
        return len(self.assignments)

    def sizes(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignments], dtype=np.int64)


def _check_m(ds: LabeledDataset, m: int):
    if m < 1:
        raise ConfigError(f"client count must be >= 1, got {m}")
    if m > ds.n:
        raise ConfigError(f"cannot split {ds.n} samples across {m} clients")


def partition_iid(ds: LabeledDataset, m: int, rng: RngStream) -> Partition:
    """Uniform shuffle then equal split (sizes differ by at most one)."""
    _check_m(ds, m)
    perm = rng.permutation(ds.n)
    chunks = np.array_split(perm, m)
    return Partition(
        assignments=tuple(np.sort(c).astype(np.int64) for c in chunks),
        params={"kind": "iid"},
        seed=rng.seed,
    )


def _largest_remainder_counts(total: int, props: np.ndarray, current: np.ndarray):
    """Integer split of `total` by proportions; leftovers go to the largest
    fractional remainders, ties broken toward currently smaller clients."""
    raw = props * total
    base = np.floor(raw).astype(np.int64)
    leftover = total - int(base.sum())
    if leftover > 0:
        frac = raw - base
        order = sorted(
            range(len(props)),
            key=lambda i: (-frac[i], current[i] + base[i], i),
        )
        for i in order[:leftover]:
            base[i] += 1
    return base


def partition_dirichlet(
    ds: LabeledDataset, m: int, alpha: float, rng: RngStream
) -> Partition:
    """Per-class Dirichlet(alpha) split across clients.

    For each class, client shares are drawn from Dir(alpha * 1_m) and the
    class indices are divided by largest-remainder rounding. Redraws (up to
    100 times) if some client ends up empty, then falls back to greedily
    moving samples from the largest clients.
    """
    if alpha <= 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    _check_m(ds, m)
    classes = np.unique(ds.labels)
    for attempt in range(100):
        sub = rng.spawn("dirichlet", attempt)
        lists = [[] for _ in range(m)]
        sizes = np.zeros(m, dtype=np.int64)
        for c in classes:
            idx = np.flatnonzero(ds.labels == c)
            idx = idx[sub.permutation(idx.size)]
            props = sub.dirichlet(np.full(m, float(alpha)))
            counts = _largest_remainder_counts(idx.size, props, sizes)
            start = 0
            for i in range(m):
                lists[i].extend(idx[start : start + counts[i]].tolist())
                start += counts[i]
            sizes += counts
        if all(sizes > 0):
            break
    else:
        # greedy repair: donate one sample from the largest client to each empty one
        for i in range(m):
            while sizes[i] == 0:
                donor = int(np.argmax(sizes))
                lists[i].append(lists[donor].pop())
                sizes[i] += 1
                sizes[donor] -= 1
    assignments = tuple(np.sort(np.array(l, dtype=np.int64)) for l in lists)
    return Partition(
        assignments=assignments,
        params={"kind": "dirichlet", "alpha": float(alpha)},
        seed=rng.seed,
    )


def partition_pathological(
    ds: LabeledDataset, m: int, classes_per_client: int, rng: RngStream
) -> Partition:
    """Each client holds exactly `classes_per_client` distinct classes.

    Shard labels cycle through a shuffled class order so every class is used;
    each class's samples are split evenly among the clients holding it.
    """
    _check_m(ds, m)
    classes = np.unique(ds.labels)
    C = classes.size
    cpc = classes_per_client
    if not 0 < cpc <= C:
        raise ConfigError(f"classes_per_client must be in 1..{C}, got {cpc}")
    order = classes[rng.permutation(C)]
    shard_labels = [order[s % C] for s in range(m * cpc)]
    # consecutive cpc <= C entries of a cycled permutation are distinct
    per_client = [shard_labels[i * cpc : (i + 1) * cpc] for i in range(m)]
    holders = {int(c): [] for c in classes}
    for cid, cls_list in enumerate(per_client):
        for c in cls_list:
            holders[int(c)].append(cid)
    lists = [[] for _ in range(m)]
    for c in classes:
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.spawn("pathological", int(c)).permutation(idx.size)]
        who = holders[int(c)]
        if idx.size < len(who):
            raise ConfigError(
                f"class {int(c)} has {idx.size} samples for {len(who)} shards"
            )
        for chunk, cid in zip(np.array_split(idx, len(who)), who):
            lists[cid].extend(chunk.tolist())
    assignments = tuple(np.sort(np.array(l, dtype=np.int64)) for l in lists)
    return Partition(
        assignments=assignments,
        params={"kind": "pathological", "classes_per_client": cpc},
        seed=rng.seed,
    )


def make_synthetic_blobs(
    n_classes: int,
    d_in: int,
    n: int,
    separation: float,
    rng: RngStream,
    name: str = "blobs",
) -> LabeledDataset:
    """Gaussian class blobs with unit covariance.

    Class means sit at pairwise distance `separation` (exact when
    d_in >= n_classes via scaled orthogonal axes, approximate otherwise via
    random directions). Class counts are balanced up to rounding.
    """
    if n_classes < 1 or d_in < 1 or n < 1 or separation < 0:
        raise ConfigError("blob parameters must be positive (separation >= 0)")
    if d_in >= n_classes:
        means = np.zeros((n_classes, d_in))
        for c in range(n_classes):
            means[c, c] = separation / np.sqrt(2.0)
    else:
        dirs = rng.spawn("means").standard_normal((n_classes, d_in))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        means = dirs * (separation / np.sqrt(2.0))
    counts = np.full(n_classes, n // n_classes, dtype=np.int64)
    counts[: n % n_classes] += 1
    labels = np.repeat(np.arange(n_classes), counts)
    feats = means[labels] + rng.spawn("noise").standard_normal((n, d_in))
    perm = rng.spawn("shuffle").permutation(n)
    return LabeledDataset(features=feats[perm], labels=labels[perm], name=name)


def load_csv(path) -> LabeledDataset:
    """Read the documented CSV layout: header f0,...,f{d-1},label."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        d = len(header) - 1
        expected = [f"f{i}" for i in range(d)] + ["label"]
        if header != expected:
            raise DataError(
                f"{path}: bad header {header!r}, expected f0..f{d-1},label"
            )
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 1:
                raise DataError(f"{path}:{lineno}: expected {d + 1} fields")
            try:
                feats.append([float(v) for v in row[:d]])
                labels.append(int(row[d]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not feats:
        raise DataError(f"{path}: no data rows")
    return LabeledDataset(
        features=np.array(feats, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
        name=str(path),
    )


def save_csv(ds: LabeledDataset, path) -> None:
    """Write a dataset in the layout accepted by :func:`load_csv`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(ds.d_in)] + ["label"])
        for row, y in zip(ds.features, ds.labels):
            writer.writerow([f"{v:.17g}" for v in row] + [int(y)])
