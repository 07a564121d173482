"""Negative sampling: uniform, dynamic (DNS) and matryoshka (MNS).

The scalar functions are thin wrappers over the batched ones with a batch
of one, so both paths consume the random stream identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PositiveIndex
from .embeddings import Tables
from .types import DimensionSchedule, MRLRecError, TrainingTuple

UNIFORM = "uniform"
DNS = "dns"
MNS = "mns"
STRATEGIES = (UNIFORM, DNS, MNS)

_MAX_REJECTION_ROUNDS = 32


class NoNegativesAvailable(MRLRecError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str | None = None  # None: chosen by the training variant
    dns_pool_size: int = 16
    seed: int | None = None  # None: derived from the run seed

    def __post_init__(self):
        if self.strategy is not None and self.strategy not in STRATEGIES:
            raise ValueError(f"unknown sampler strategy {self.strategy!r}")
        if self.dns_pool_size < 1:
            raise ValueError("dns_pool_size must be >= 1")


def _positive_index(positives) -> PositiveIndex:
    # accept a dataset as well as a ready PositiveIndex
    if isinstance(positives, PositiveIndex):
        return positives
    return positives.positives()


def draw_negatives(users, n: int, positives, rng: np.random.Generator) -> np.ndarray:
    """``(B, n)`` items drawn uniformly from each user's non-positive items.

    Rejection sampling; entries still rejected after a fixed number of
    rounds are drawn from the explicit complement.
    """
    index = _positive_index(positives)
    users = np.asarray(users, dtype=np.int64).reshape(-1)
    n_items = index.n_items
    if users.size and np.any(index.counts[users] >= n_items):
        bad = users[index.counts[users] >= n_items][0]
        raise NoNegativesAvailable(f"user {bad} has interacted with every item")
    out = rng.integers(0, n_items, size=(len(users), n))
    owner = np.repeat(users[:, None], n, axis=1)
    bad = index.contains(owner, out)
    rounds = 0
    while bad.any():
        if rounds == _MAX_REJECTION_ROUNDS:
            for b, k in zip(*np.nonzero(bad)):
                complement = np.setdiff1d(np.arange(n_items), index.items_of(users[b]))
                out[b, k] = complement[rng.integers(0, len(complement))]
            break
        out[bad] = rng.integers(0, n_items, size=int(bad.sum()))
        bad = index.contains(owner, out)
        rounds += 1
    return out


def select_hardest(users, pool: np.ndarray, tables: Tables, d_cut: int) -> np.ndarray:
    """Per row, the pool item with the highest prefix score; ties go to the lowest item index."""
    eu = tables.users.data[users, :d_cut]
    ec = tables.items.data[pool, :d_cut]
    scores = np.einsum("bd,bmd->bm", eu, ec)
    best = scores.max(axis=1, keepdims=True)
    tie_break = np.where(scores == best, pool, np.iinfo(np.int64).max)
    return tie_break.min(axis=1)


def dns_batch(
    users,
    positives_items,
    positives,
    tables: Tables,
    d_cut: int,
    pool_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Dynamic negative sampling for a batch; returns one item per user.

    ``positives_items`` (the positive of each pair) is accepted for
    signature parity with other hard-negative strategies; DNS ignores it.
    """
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    if not 1 <= d_cut <= tables.dim:
        raise ValueError(f"d_cut {d_cut} outside 1..{tables.dim}")
    users = np.asarray(users, dtype=np.int64).reshape(-1)
    pool = draw_negatives(users, pool_size, positives, rng)
    if pool_size == 1:
        return pool[:, 0]
    return select_hardest(users, pool, tables, d_cut)


def mns_batch(
    users,
    positive_items,
    positives,
    tables: Tables,
    schedule: DimensionSchedule,
    pool_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Matryoshka negative sampling: one DNS draw per level on that level's prefix.

    Returns ``(B, L)`` negatives, column ``l - 1`` holding ``j_l``. Pools are
    drawn independently per level, in ascending level order.
    """
    users = np.asarray(users, dtype=np.int64).reshape(-1)
    cols = [
        dns_batch(users, positive_items, positives, tables, d, pool_size, rng) for d in schedule.sizes
    ]
    return np.stack(cols, axis=1)


def sample_uniform(user: int, positives, rng: np.random.Generator) -> int:
    return int(draw_negatives([user], 1, positives, rng)[0, 0])


def sample_dns(
    user: int,
    positive: int,
    positives,
    tables: Tables,
    d_cut: int,
    pool_size: int,
    rng: np.random.Generator,
) -> int:
    return int(dns_batch([user], [positive], positives, tables, d_cut, pool_size, rng)[0])


def sample_mns(
    user: int,
    positive: int,
    positives,
    tables: Tables,
    schedule: DimensionSchedule,
    pool_size: int,
    rng: np.random.Generator,
) -> TrainingTuple:
    negs = mns_batch([user], [positive], positives, tables, schedule, pool_size, rng)[0]
    return TrainingTuple(int(user), int(positive), tuple(int(j) for j in negs))


def repeat_rate(negatives: np.ndarray) -> float:
    """Fraction of MNS tuples in which some item was chosen at more than one level."""
    negatives = np.asarray(negatives)
    if negatives.ndim != 2 or negatives.shape[1] < 2 or len(negatives) == 0:
        return 0.0
    s = np.sort(negatives, axis=1)
    return float(np.mean(np.any(s[:, 1:] == s[:, :-1], axis=1)))
