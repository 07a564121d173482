"""Shared vocabulary: dimension schedules, training tuples and the error hierarchy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class MRLRecError(Exception):
    """Base class for all library errors."""


class ScheduleError(MRLRecError, ValueError):
    pass


class NotStrictlyIncreasing(ScheduleError):
    pass


class LastSizeMismatch(ScheduleError):
    pass


class NonPositiveSize(ScheduleError):
    pass


@dataclass(frozen=True)
class DimensionSchedule:
    """Nested embedding levels ``d_1 < d_2 < ... < d_L = full_dim`` with loss weights.

    Levels are 1-based throughout the library; ``size(0)`` is the
    conventional ``d_0 = 0``.
    """

    sizes: tuple[int, ...]
    weights: tuple[float, ...]
    full_dim: int

    def __post_init__(self):
        if not self.sizes:
            raise ScheduleError("schedule needs at least one level")
        if any(s <= 0 for s in self.sizes) or self.full_dim <= 0:
            raise NonPositiveSize(f"sizes must be positive: {list(self.sizes)}")
        for a, b in zip(self.sizes, self.sizes[1:]):
            if not a < b:
                raise NotStrictlyIncreasing(f"sizes must be strictly increasing: {list(self.sizes)}")
        if self.sizes[-1] != self.full_dim:
            raise LastSizeMismatch(f"last size {self.sizes[-1]} != full_dim {self.full_dim}")
        if len(self.weights) != len(self.sizes):
            raise ScheduleError("one weight per level required")
        if any(not np.isfinite(w) or w < 0 for w in self.weights):
            raise ScheduleError(f"weights must be finite and non-negative: {list(self.weights)}")

    @property
    def levels(self) -> int:
        return len(self.sizes)

    def size(self, level: int) -> int:
        """Return ``d_level``; level 0 maps to 0."""
        if level == 0:
            return 0
        if not 1 <= level <= self.levels:
            raise IndexError(level)
        return self.sizes[level - 1]

    def level_mask(self) -> np.ndarray:
        """``(L, d)`` 0/1 matrix whose row ``l`` covers dims ``[0, d_l)``."""
        mask = np.zeros((self.levels, self.full_dim))
        for row, s in enumerate(self.sizes):
            mask[row, :s] = 1.0
        return mask

    def to_dict(self) -> dict:
        return {"dims": list(self.sizes), "weights": list(self.weights)}


def validate_schedule(
    sizes: Sequence[int], full_dim: int, weights: Sequence[float] | None = None
) -> DimensionSchedule:
    """Build a schedule; weights default to uniform ``1/L``.

    Raises
    ------
    NotStrictlyIncreasing, LastSizeMismatch, NonPositiveSize
    """
    sizes = tuple(int(s) for s in sizes)
    if not sizes:
        raise ScheduleError("sizes must be non-empty")
    if weights is None:
        weights = (1.0 / len(sizes),) * len(sizes)
    return DimensionSchedule(sizes, tuple(float(w) for w in weights), int(full_dim))


def single_level(full_dim: int) -> DimensionSchedule:
    return validate_schedule([full_dim], full_dim)


@dataclass(frozen=True)
class TrainingTuple:
    """One positive pair and one negative item per level, ordered level 1 to L."""

    user: int
    positive: int
    negatives: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if len(self.negatives) < 1:
            raise ValueError("a training tuple needs at least one negative")

    @property
    def is_triplet(self) -> bool:
        return len(self.negatives) == 1


@dataclass(frozen=True)
class TupleBatch:
    """Array form of a list of training tuples.

    ``negatives`` has shape ``(B, n_neg)``; ``n_neg`` is 1 for triplets and
    ``L`` for matryoshka tuples.
    """

    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64).reshape(-1)
        positives = np.asarray(self.positives, dtype=np.int64).reshape(-1)
        negatives = np.asarray(self.negatives, dtype=np.int64)
        if negatives.ndim == 1:
            negatives = negatives[:, None]
        if not (len(users) == len(positives) == len(negatives)):
            raise ValueError("users, positives and negatives must have equal length")
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "positives", positives)
        object.__setattr__(self, "negatives", negatives)

    def __len__(self) -> int:
        return len(self.users)

    @property
    def n_negatives(self) -> int:
        return self.negatives.shape[1]

    @classmethod
    def from_tuples(cls, tuples: Sequence[TrainingTuple]) -> "TupleBatch":
        tuples = list(tuples)
        widths = {len(t.negatives) for t in tuples}
        if len(widths) > 1:
            raise ValueError("all tuples in a batch must carry the same number of negatives")
        width = widths.pop() if widths else 1
        return cls(
            np.array([t.user for t in tuples], dtype=np.int64),
            np.array([t.positive for t in tuples], dtype=np.int64),
            np.array([t.negatives for t in tuples], dtype=np.int64).reshape(len(tuples), width),
        )

    def tuples(self) -> list[TrainingTuple]:
        return [
            TrainingTuple(int(u), int(i), tuple(int(j) for j in js))
            for u, i, js in zip(self.users, self.positives, self.negatives)
        ]


def as_batch(batch) -> TupleBatch:
    if isinstance(batch, TupleBatch):
        return batch
    if isinstance(batch, TrainingTuple):
        return TupleBatch.from_tuples([batch])
    return TupleBatch.from_tuples(batch)
