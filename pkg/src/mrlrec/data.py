"""Interaction ingestion, per-user splitting and synthetic hierarchical data."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .types import MRLRecError

TSV = "tsv"
CSV = "csv"
FORMATS = (TSV, CSV)


class DataError(MRLRecError):
    pass


class MalformedLine(DataError):
    def __init__(self, line_no: int, line: str, path=None):
        self.line_no = line_no
        self.path = path
        where = f"{path}:{line_no}" if path else f"line {line_no}"
        super().__init__(f"malformed interaction at {where}: {line!r}")


class EmptyDataset(DataError):
    pass


class InfeasibleSpec(DataError):
    pass


@dataclass
class InteractionDataset:
    """De-duplicated implicit interactions with dense index maps.

    ``interactions`` is an ``(N, 2)`` int array of ``(user, item)`` rows in
    first-appearance order. The three partitions are ``None`` until
    :func:`split` has been applied.
    """

    user_keys: list[str]
    item_keys: list[str]
    interactions: np.ndarray
    train: np.ndarray | None = None
    validation: np.ndarray | None = None
    test: np.ndarray | None = None
    _positives_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_users(self) -> int:
        return len(self.user_keys)

    @property
    def n_items(self) -> int:
        return len(self.item_keys)

    @property
    def is_split(self) -> bool:
        return self.train is not None

    def partition(self, name: str) -> np.ndarray:
        part = {"train": self.train, "validation": self.validation, "test": self.test}[name]
        if part is None:
            raise DataError("dataset has not been split")
        return part

    def positives(self, include_validation: bool = False) -> "PositiveIndex":
        """Per-user training positives (optionally with validation merged in)."""
        key = bool(include_validation)
        if key not in self._positives_cache:
            pairs = self.partition("train")
            if include_validation:
                pairs = np.concatenate([pairs, self.partition("validation")])
            self._positives_cache[key] = PositiveIndex(pairs, self.n_users, self.n_items)
        return self._positives_cache[key]

    @property
    def per_user_train_positives(self) -> "PositiveIndex":
        return self.positives()

    def user_index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.user_keys)}

    def item_index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.item_keys)}


# catalogs up to this many (user, item) cells get a dense membership bitmap
_BITMAP_LIMIT = 1 << 26


class PositiveIndex:
    """Membership structure over ``(user, item)`` pairs.

    Pairs are encoded as ``user * n_items + item``. Small catalogs answer
    membership from a dense bitmap, large ones by ``searchsorted`` on the
    sorted codes.
    """

    def __init__(self, pairs: np.ndarray, n_users: int, n_items: int):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        self.n_users = n_users
        self.n_items = n_items
        self.codes = np.unique(pairs[:, 0] * n_items + pairs[:, 1])
        users = self.codes // n_items
        self.counts = np.bincount(users, minlength=n_users)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)])
        self._bitmap = None
        if n_users * n_items <= _BITMAP_LIMIT:
            self._bitmap = np.zeros(n_users * n_items, dtype=bool)
            self._bitmap[self.codes] = True

    def items_of(self, user: int) -> np.ndarray:
        lo, hi = self.offsets[user], self.offsets[user + 1]
        return self.codes[lo:hi] - user * self.n_items

    def contains(self, users, items) -> np.ndarray:
        codes = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        if self._bitmap is not None:
            return self._bitmap[codes]
        if len(self.codes) == 0:
            return np.zeros(codes.shape, dtype=bool)
        pos = np.searchsorted(self.codes, codes)
        pos = np.minimum(pos, len(self.codes) - 1)
        return self.codes[pos] == codes

    def __contains__(self, pair) -> bool:
        u, i = pair
        return bool(self.contains(u, i))

    def as_sets(self) -> list[set[int]]:
        return [set(self.items_of(u).tolist()) for u in range(self.n_users)]


def _read_pairs(path, fmt: str):
    if fmt not in FORMATS:
        raise ValueError(f"unknown interaction format {fmt!r}; expected one of {FORMATS}")
    with open(path, encoding="utf-8", newline="") as fh:
        if fmt == TSV:
            for line_no, line in enumerate(fh, 1):
                stripped = line.rstrip("\r\n")
                if not stripped.strip() or stripped.lstrip().startswith("#"):
                    continue
                parts = stripped.split("\t")
                if len(parts) != 2 or not parts[0] or not parts[1]:
                    raise MalformedLine(line_no, stripped, path)
                yield parts[0], parts[1]
        else:
            reader = csv.reader(fh)
            header = None
            for row in reader:
                line_no = reader.line_num
                if not row or (len(row) == 1 and not row[0].strip()) or row[0].lstrip().startswith("#"):
                    continue
                if header is None:
                    header = [c.strip().lower() for c in row]
                    if header != ["user", "item"]:
                        raise MalformedLine(line_no, ",".join(row), path)
                    continue
                if len(row) != 2 or not row[0] or not row[1]:
                    raise MalformedLine(line_no, ",".join(row), path)
                yield row[0], row[1]


def from_pairs(pairs) -> InteractionDataset:
    """Build an unsplit dataset from ``(user_key, item_key)`` pairs."""
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    rows = []
    for ukey, ikey in pairs:
        u = users.setdefault(ukey, len(users))
        i = items.setdefault(ikey, len(items))
        if (u, i) not in seen:
            seen.add((u, i))
            rows.append((u, i))
    if not rows:
        raise EmptyDataset("no interactions found")
    return InteractionDataset(list(users), list(items), np.array(rows, dtype=np.int64))


def ingest(path, fmt: str = TSV) -> InteractionDataset:
    """Read an interaction file; duplicates collapse and indices follow first appearance.

    Raises
    ------
    MalformedLine
        A data line without exactly two non-empty fields.
    EmptyDataset
        No data lines at all.
    """
    try:
        return from_pairs(_read_pairs(path, fmt))
    except EmptyDataset:
        raise EmptyDataset(f"{path}: no interactions found") from None


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def split(
    dataset: InteractionDataset,
    train_ratio: float = 0.8,
    validation_ratio_of_train: float = 0.1,
    seed: int = 0,
) -> InteractionDataset:
    """Per-user random train/test split, then a global validation sample of train.

    Each user with ``n_u >= 2`` interactions sends ``round(n_u * (1 - train_ratio))``
    of them (half-up, at least one kept for training) to test. Validation is
    ``round(validation_ratio_of_train * |train candidates|)`` pairs drawn
    uniformly from the pooled training candidates, skipping any pair that is
    the last training interaction of a user who has test items.
    """
    if not 0.0 < train_ratio < 1.0:
        raise ValueError("train_ratio must lie in (0, 1)")
    if not 0.0 <= validation_ratio_of_train < 1.0:
        raise ValueError("validation_ratio_of_train must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    pairs = dataset.interactions
    order = np.argsort(pairs[:, 0], kind="stable")
    sorted_pairs = pairs[order]
    bounds = np.searchsorted(sorted_pairs[:, 0], np.arange(dataset.n_users + 1))

    train_parts, test_parts = [], []
    for u in range(dataset.n_users):
        rows = sorted_pairs[bounds[u]:bounds[u + 1]]
        n_u = len(rows)
        if n_u == 0:
            continue
        n_test = 0
        if n_u >= 2:
            n_test = min(_round_half_up(n_u * (1.0 - train_ratio)), n_u - 1)
        perm = rng.permutation(n_u)
        test_parts.append(rows[perm[:n_test]])
        train_parts.append(rows[perm[n_test:]])
    train = np.concatenate(train_parts)
    test = np.concatenate(test_parts) if test_parts else np.empty((0, 2), dtype=np.int64)

    n_val = _round_half_up(validation_ratio_of_train * len(train))
    train_left = np.bincount(train[:, 0], minlength=dataset.n_users)
    has_test = np.bincount(test[:, 0], minlength=dataset.n_users) > 0
    take = np.zeros(len(train), dtype=bool)
    taken = 0
    for idx in rng.permutation(len(train)):
        if taken >= n_val:
            break
        u = train[idx, 0]
        if has_test[u] and train_left[u] <= 1:
            continue
        take[idx] = True
        train_left[u] -= 1
        taken += 1
    return replace(
        dataset,
        train=_canonical(train[~take]),
        validation=_canonical(train[take]),
        test=_canonical(test),
        _positives_cache={},
    )


def _canonical(pairs: np.ndarray) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


# ---------------------------------------------------------------------------
# file outputs


def write_pairs(path, pairs: np.ndarray, dataset: InteractionDataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i in pairs:
            fh.write(f"{dataset.user_keys[u]}\t{dataset.item_keys[i]}\n")


def write_index_map(path, dataset: InteractionDataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for idx, key in enumerate(dataset.user_keys):
            fh.write(f"{key}\t{idx}\tuser\n")
        for idx, key in enumerate(dataset.item_keys):
            fh.write(f"{key}\t{idx}\titem\n")


def read_index_map(path) -> tuple[list[str], list[str]]:
    users: dict[int, str] = {}
    items: dict[int, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("user", "item"):
                raise MalformedLine(line_no, line, path)
            target = users if parts[2] == "user" else items
            target[int(parts[1])] = parts[0]
    for table in (users, items):
        if sorted(table) != list(range(len(table))):
            raise DataError(f"{path}: dense indices are not contiguous")
    return [users[i] for i in range(len(users))], [items[i] for i in range(len(items))]


SPLIT_FILES = {"train": "train.tsv", "validation": "validation.tsv", "test": "test.tsv"}
INDEX_MAP = "index_map.tsv"
CANONICAL = "interactions.tsv"


def write_split(out_dir, dataset: InteractionDataset) -> dict[str, str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, fname in SPLIT_FILES.items():
        write_pairs(out_dir / fname, dataset.partition(name), dataset)
        written[name] = str(out_dir / fname)
    write_index_map(out_dir / INDEX_MAP, dataset)
    written["index_map"] = str(out_dir / INDEX_MAP)
    return written


def load_split(data_dir) -> InteractionDataset:
    """Load a directory written by :func:`write_split`."""
    data_dir = Path(data_dir)
    user_keys, item_keys = read_index_map(data_dir / INDEX_MAP)
    uidx = {k: i for i, k in enumerate(user_keys)}
    iidx = {k: i for i, k in enumerate(item_keys)}
    parts = {}
    for name, fname in SPLIT_FILES.items():
        rows = []
        for line_no, (uk, ik) in enumerate(_read_pairs(data_dir / fname, TSV), 1):
            if uk not in uidx or ik not in iidx:
                raise DataError(f"{data_dir / fname}: key pair {uk!r},{ik!r} missing from index map")
            rows.append((uidx[uk], iidx[ik]))
        parts[name] = np.array(rows, dtype=np.int64).reshape(-1, 2)
    everything = np.concatenate([parts["train"], parts["validation"], parts["test"]])
    if len(everything) == 0:
        raise EmptyDataset(f"{data_dir}: all partitions empty")
    return InteractionDataset(
        user_keys,
        item_keys,
        _canonical(everything),
        train=_canonical(parts["train"]),
        validation=_canonical(parts["validation"]),
        test=_canonical(parts["test"]),
    )


# ---------------------------------------------------------------------------
# synthetic hierarchical data


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 500
    n_items: int = 500
    tree_depth: int = 3
    branching: int = 3
    interactions_per_user: int = 20
    noise_rate: float = 0.1
    seed: int = 0
    # relative weight per level of divergence from the user's path
    decay: float = 0.5

    def __post_init__(self):
        if self.tree_depth < 1:
            raise ValueError("tree_depth must be >= 1")
        if self.branching < 2:
            raise ValueError("branching must be >= 2")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        if self.n_users < 1 or self.n_items < 1 or self.interactions_per_user < 1:
            raise ValueError("counts must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")


@dataclass(frozen=True)
class GroundTruthHierarchy:
    """Root-to-leaf category paths; row ``k`` holds the child index chosen at each depth."""

    user_paths: np.ndarray
    item_paths: np.ndarray

    def shared_depth(self, user: int, item: int) -> int:
        """Number of leading path nodes the user and item have in common."""
        same = self.user_paths[user] == self.item_paths[item]
        return int(np.argmin(same)) if not same.all() else len(same)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for kind, paths in (("user", self.user_paths), ("item", self.item_paths)):
                for idx, p in enumerate(paths):
                    fh.write(f"{kind}\t{idx}\t{'/'.join(str(int(n)) for n in p)}\n")


def _leaf_path(leaf: int, depth: int, branching: int) -> np.ndarray:
    path = np.empty(depth, dtype=np.int64)
    for level in range(depth - 1, -1, -1):
        path[level] = leaf % branching
        leaf //= branching
    return path


def generate_synthetic(spec: SyntheticSpec) -> tuple[InteractionDataset, GroundTruthHierarchy]:
    """Sample a dataset whose preferences follow a ``branching``-ary category tree.

    Items are spread evenly over the leaves; every user gets a random leaf.
    Of a user's interactions, ``round(noise_rate * n)`` are uniform over the
    catalog and the rest are drawn without replacement from items in the
    user's top-level category, with weight ``decay ** (depth - shared)``
    where ``shared`` counts the path nodes the item shares with the user.
    """
    rng = np.random.default_rng(spec.seed)
    depth, b = spec.tree_depth, spec.branching
    n_leaves = b**depth
    item_leaf = rng.permutation(np.arange(spec.n_items) % n_leaves)
    user_leaf = rng.integers(0, n_leaves, size=spec.n_users)
    leaf_paths = np.stack([_leaf_path(leaf, depth, b) for leaf in range(n_leaves)])
    item_paths = leaf_paths[item_leaf]
    user_paths = leaf_paths[user_leaf]

    n = spec.interactions_per_user
    n_noise = _round_half_up(spec.noise_rate * n)
    n_signal = n - n_noise
    if n > spec.n_items:
        raise InfeasibleSpec(f"{n} interactions per user exceed the catalog of {spec.n_items}")

    rows = []
    for u in range(spec.n_users):
        same = item_paths == user_paths[u]
        # shared prefix length per item
        shared = np.where(same.all(axis=1), depth, np.argmin(same, axis=1))
        eligible = np.flatnonzero(shared >= 1)
        if len(eligible) < n_signal:
            raise InfeasibleSpec(
                f"user {u}: {n_signal} on-path interactions requested, only {len(eligible)} matching items"
            )
        weights = spec.decay ** (depth - shared[eligible]).astype(float)
        chosen = rng.choice(eligible, size=n_signal, replace=False, p=weights / weights.sum())
        rest = np.setdiff1d(np.arange(spec.n_items), chosen)
        noise = rng.choice(rest, size=n_noise, replace=False) if n_noise else np.empty(0, dtype=np.int64)
        for i in np.concatenate([chosen, noise]):
            rows.append((u, int(i)))

    dataset = InteractionDataset(
        [f"u{u}" for u in range(spec.n_users)],
        [f"i{i}" for i in range(spec.n_items)],
        np.array(rows, dtype=np.int64),
    )
    return dataset, GroundTruthHierarchy(user_paths, item_paths)


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
