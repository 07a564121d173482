"""User/item embedding tables, matryoshka slicing and the binary checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .types import DimensionSchedule, MRLRecError

MAGIC = b"MRLREC01"


class LevelOutOfRange(MRLRecError, IndexError):
    pass


class InvalidBlockRange(MRLRecError, ValueError):
    pass


class LengthMismatch(MRLRecError, ValueError):
    pass


class CheckpointError(MRLRecError):
    pass


class EmbeddingTable:
    """Dense ``rows x dim`` float64 parameter matrix for one entity kind."""

    def __init__(self, data: np.ndarray):
        data = np.array(data, dtype=np.float64, copy=True)
        if data.ndim != 2:
            raise ValueError("embedding data must be 2-D")
        if not np.all(np.isfinite(data)):
            raise ValueError("embedding entries must be finite")
        self.data = data

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __getitem__(self, idx):
        return self.data[idx]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.data)

    def __eq__(self, other):
        return isinstance(other, EmbeddingTable) and np.array_equal(self.data, other.data)


@dataclass
class Tables:
    """The pair of tables a matrix-factorization model consists of."""

    users: EmbeddingTable
    items: EmbeddingTable

    def __post_init__(self):
        if self.users.dim != self.items.dim:
            raise ValueError("user and item tables must share a dimension")

    @property
    def dim(self) -> int:
        return self.users.dim

    def table(self, kind: str) -> EmbeddingTable:
        if kind == "user":
            return self.users
        if kind == "item":
            return self.items
        raise KeyError(kind)

    def copy(self) -> "Tables":
        return Tables(self.users.copy(), self.items.copy())

    @classmethod
    def from_arrays(cls, users, items) -> "Tables":
        return cls(EmbeddingTable(users), EmbeddingTable(items))


def init_xavier(rows: int, dim: int, seed: int | np.random.Generator) -> EmbeddingTable:
    """Xavier-uniform init with ``fan_in = fan_out = dim``: ``U(-sqrt(3/dim), sqrt(3/dim))``."""
    if rows < 1 or dim < 1:
        raise ValueError("rows and dim must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (dim + dim))
    return EmbeddingTable(rng.uniform(-bound, bound, size=(rows, dim)))


def init_tables(n_users: int, n_items: int, dim: int, rng: np.random.Generator) -> Tables:
    return Tables(init_xavier(n_users, dim, rng), init_xavier(n_items, dim, rng))


def prefix_slice(table: EmbeddingTable, row: int, level: int, schedule: DimensionSchedule) -> np.ndarray:
    """View of ``row`` over dims ``[0, d_level)``; levels are 1-based."""
    if not 1 <= level <= schedule.levels:
        raise LevelOutOfRange(f"level {level} outside 1..{schedule.levels}")
    return table.data[row, : schedule.size(level)]


def block_slice(table: EmbeddingTable, row: int, x: int, y: int, schedule: DimensionSchedule) -> np.ndarray:
    """View of ``row`` over dims ``[d_x, d_y)`` with ``d_0 = 0``."""
    if not 0 <= x < y <= schedule.levels:
        raise InvalidBlockRange(f"block ({x}, {y}) invalid for {schedule.levels} levels")
    return table.data[row, schedule.size(x) : schedule.size(y)]


def sliced_score(user_view, item_view) -> float:
    user_view = np.asarray(user_view, dtype=np.float64)
    item_view = np.asarray(item_view, dtype=np.float64)
    if user_view.shape != item_view.shape:
        raise LengthMismatch(f"views of length {user_view.shape} and {item_view.shape}")
    return float(np.dot(user_view, item_view))


def block_scores(user_vec: np.ndarray, item_vec: np.ndarray, schedule: DimensionSchedule) -> np.ndarray:
    """Per-block inner products ``r^{l-1,l}`` for ``l = 1..L``."""
    prod = np.asarray(user_vec, dtype=np.float64) * np.asarray(item_vec, dtype=np.float64)
    edges = (0,) + schedule.sizes
    return np.array([prod[a:b].sum() for a, b in zip(edges, edges[1:])])


# ---------------------------------------------------------------------------
# checkpoint I/O

_HEADER = struct.Struct("<8s4Q")


def save_checkpoint(path, tables: Tables, schedule: DimensionSchedule) -> None:
    """Write ``MRLREC01`` + u64 counts + u64 sizes + float32 user and item matrices (LE)."""
    if schedule.full_dim != tables.dim:
        raise CheckpointError("schedule full_dim does not match table dim")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, tables.users.rows, tables.items.rows, tables.dim, schedule.levels))
        fh.write(np.asarray(schedule.sizes, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(tables.users.data, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(tables.items.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[Tables, tuple[int, ...]]:
    """Read a checkpoint; returns the tables (upcast to float64) and the level sizes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an MRLREC01 checkpoint")
    _, n_users, n_items, dim, levels = _HEADER.unpack_from(raw)
    offset = _HEADER.size
    expected = offset + 8 * levels + 4 * dim * (n_users + n_items)
    if len(raw) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(raw)}")
    sizes = tuple(int(s) for s in np.frombuffer(raw, dtype="<u8", count=levels, offset=offset))
    offset += 8 * levels
    users = np.frombuffer(raw, dtype="<f4", count=n_users * dim, offset=offset).reshape(n_users, dim)
    offset += 4 * n_users * dim
    items = np.frombuffer(raw, dtype="<f4", count=n_items * dim, offset=offset).reshape(n_items, dim)
    return Tables.from_arrays(users.astype(np.float64), items.astype(np.float64)), sizes


def export_text(path, table: EmbeddingTable) -> None:
    np.savetxt(path, table.data, fmt="%.9g", delimiter=" ")
