"""BPR, MRL and MRL-with-MNS objectives with exact analytic gradients.

All three losses are sums over tuples of ``-w * ln sigmoid(margin)``;
gradients are returned per touched table row, summed across the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .embeddings import Tables
from .types import DimensionSchedule, MRLRecError, TrainingTuple, TupleBatch, as_batch

BPR = "bpr"
MRL = "mrl"
MRL_MNS = "mrl-mns"
LOSS_KINDS = (BPR, MRL, MRL_MNS)
REDUCTIONS = ("sum", "mean")


class WrongTupleArity(MRLRecError, ValueError):
    pass


class ScheduleMismatch(MRLRecError, ValueError):
    pass


class NonZeroFrozenBlocks(MRLRecError, ValueError):
    pass


def softplus(x):
    """``ln(1 + e^x)`` without overflow."""
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


class SparseGrad(NamedTuple):
    rows: np.ndarray
    values: np.ndarray


def _accumulate(rows: np.ndarray, values: np.ndarray) -> SparseGrad:
    """Sum gradient rows that share an index; output rows are sorted."""
    unique, inverse = np.unique(rows, return_inverse=True)
    n = len(rows)
    if n <= 64:
        out = np.zeros((len(unique), values.shape[1]))
        np.add.at(out, inverse.reshape(-1), values)
        return SparseGrad(unique, out)
    # 0/1 incidence matrix: summing through a sparse product is several times
    # faster than ufunc.reduceat along axis 0
    incidence = sp.csr_matrix((np.ones(n), (inverse.reshape(-1), np.arange(n))), shape=(len(unique), n))
    return SparseGrad(unique, np.asarray(incidence @ values))


@dataclass
class LossBatchResult:
    loss: float
    gradients: dict[str, SparseGrad]
    per_tuple: np.ndarray = field(repr=False, default=None)

    def row(self, kind: str, index: int) -> np.ndarray:
        """Dense gradient of one row; zeros for rows the batch never touched."""
        g = self.gradients[kind]
        hit = np.flatnonzero(g.rows == index)
        if len(hit) == 0:
            return np.zeros(g.values.shape[1])
        return g.values[hit[0]].copy()

    def dense(self, kind: str, n_rows: int) -> np.ndarray:
        g = self.gradients[kind]
        out = np.zeros((n_rows, g.values.shape[1]))
        out[g.rows] = g.values
        return out

    def as_dict(self) -> dict[tuple[str, int], np.ndarray]:
        return {
            (kind, int(r)): v for kind, g in self.gradients.items() for r, v in zip(g.rows, g.values)
        }


def _check_reduction(reduction: str) -> None:
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")


def bpr_loss(batch, tables: Tables, reduction: str = "sum") -> LossBatchResult:
    """Full-dimension BPR over triplets ``(u, i, j)``."""
    _check_reduction(reduction)
    batch = as_batch(batch)
    if batch.n_negatives != 1:
        raise WrongTupleArity(f"BPR takes exactly one negative per tuple, got {batch.n_negatives}")
    U, V = tables.users.data, tables.items.data
    eu = U[batch.users]
    ei = V[batch.positives]
    ej = V[batch.negatives[:, 0]]
    margin = np.einsum("bd,bd->b", eu, ei) - np.einsum("bd,bd->b", eu, ej)
    per_tuple = softplus(-margin)
    coef = -sigmoid(-margin)  # d loss / d margin
    if reduction == "mean":
        coef = coef / len(batch)
    c = coef[:, None]
    grads = {
        "user": _accumulate(batch.users, c * (ei - ej)),
        "item": _accumulate(
            np.concatenate([batch.positives, batch.negatives[:, 0]]),
            np.concatenate([c * eu, -c * eu]),
        ),
    }
    loss = per_tuple.sum() if reduction == "sum" else per_tuple.mean()
    return LossBatchResult(float(loss), grads, per_tuple)


def _nested_loss(
    batch: TupleBatch, tables: Tables, schedule: DimensionSchedule, reduction: str
) -> LossBatchResult:
    """Weighted per-level BPR on prefixes; level ``l`` uses ``batch.negatives[:, l]``."""
    if tables.dim != schedule.full_dim:
        raise ScheduleMismatch(f"tables have dim {tables.dim}, schedule expects {schedule.full_dim}")
    sizes = schedule.sizes
    U, V = tables.users.data, tables.items.data
    w = np.asarray(schedule.weights)
    eu = U[batch.users]
    ei = V[batch.positives]
    ej = V[batch.negatives]  # (B, L, d)
    r_pos = np.cumsum(eu * ei, axis=1)[:, np.asarray(sizes) - 1]
    r_neg = np.stack(
        [np.einsum("bd,bd->b", eu[:, :d], ej[:, level, :d]) for level, d in enumerate(sizes)], axis=1
    )
    margin = r_pos - r_neg
    per_tuple = (w * softplus(-margin)).sum(axis=1)
    coef = -w * sigmoid(-margin)  # d loss / d margin, (B, L)
    if reduction == "mean":
        coef = coef / len(batch)
    # a dim below d_l receives the level-l coefficient for every level l covering it
    pos_coef = coef @ schedule.level_mask()
    grad_u = pos_coef * ei
    grad_j = np.zeros_like(ej)
    for level, d in enumerate(sizes):
        c = coef[:, level : level + 1]
        grad_u[:, :d] -= c * ej[:, level, :d]
        grad_j[:, level, :d] = -c * eu[:, :d]
    grad_i = pos_coef * eu
    grads = {
        "user": _accumulate(batch.users, grad_u),
        "item": _accumulate(
            np.concatenate([batch.positives, batch.negatives.reshape(-1)]),
            np.concatenate([grad_i, grad_j.reshape(-1, schedule.full_dim)]),
        ),
    }
    loss = per_tuple.sum() if reduction == "sum" else per_tuple.mean()
    return LossBatchResult(float(loss), grads, per_tuple)


def mrl_loss(batch, tables: Tables, schedule: DimensionSchedule, reduction: str = "sum") -> LossBatchResult:
    """Matryoshka loss where every level shares one negative per tuple.

    Tuples may carry a single negative, or ``L`` identical ones.
    """
    _check_reduction(reduction)
    batch = as_batch(batch)
    L = schedule.levels
    negs = batch.negatives
    if negs.shape[1] == L and L > 1:
        if np.any(negs != negs[:, :1]):
            raise ScheduleMismatch("MRL loss requires the same negative at every level")
    elif negs.shape[1] != 1:
        raise ScheduleMismatch(f"tuples carry {negs.shape[1]} negatives for a {L}-level schedule")
    shared = TupleBatch(batch.users, batch.positives, np.repeat(negs[:, :1], L, axis=1))
    return _nested_loss(shared, tables, schedule, reduction)


def mrl_mns_loss(
    batch, tables: Tables, schedule: DimensionSchedule, reduction: str = "sum"
) -> LossBatchResult:
    """Matryoshka loss where level ``l`` is scored only against its own negative ``j_l``."""
    _check_reduction(reduction)
    batch = as_batch(batch)
    if batch.n_negatives != schedule.levels:
        raise WrongTupleArity(f"expected {schedule.levels} negatives per tuple, got {batch.n_negatives}")
    return _nested_loss(batch, tables, schedule, reduction)


def compute_loss(kind: str, batch, tables: Tables, schedule: DimensionSchedule, reduction: str = "sum"):
    if kind == BPR:
        return bpr_loss(batch, tables, reduction)
    if kind == MRL:
        return mrl_loss(batch, tables, schedule, reduction)
    if kind == MRL_MNS:
        return mrl_mns_loss(batch, tables, schedule, reduction)
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# frozen-block analysis


@dataclass
class GradientReport:
    """Derivatives of one loss with respect to the block ``[d_{l-1}, d_l)``.

    ``analytic`` is ``dL/dr^{l-1,l}_{ui}`` recovered from the loss module's
    positive-item gradient; ``closed_form`` is the prediction for the
    zeroed-context state; the ``*_block`` arrays are embedding gradients
    restricted to the block, with finite-difference counterparts.
    """

    loss_kind: str
    level: int
    levels: int
    analytic: float
    closed_form: float
    difference: float
    user_block: np.ndarray
    positive_block: np.ndarray
    negative_blocks: np.ndarray
    fd_user_block: np.ndarray | None
    fd_positive_block: np.ndarray | None


def _tuple_negatives(kind: str, tup: TrainingTuple, schedule: DimensionSchedule) -> TrainingTuple:
    L = schedule.levels
    negs = tup.negatives
    if kind == BPR:
        # BPR consumes the deepest negative of a matryoshka tuple
        return TrainingTuple(tup.user, tup.positive, (negs[-1],))
    if kind == MRL:
        if len(set(negs)) != 1:
            raise ScheduleMismatch("MRL loss requires the same negative at every level")
        return TrainingTuple(tup.user, tup.positive, (negs[0],))
    if len(negs) != L:
        raise WrongTupleArity(f"expected {L} negatives, got {len(negs)}")
    return tup


def _fd_block(f, vec: np.ndarray, lo: int, hi: int, h: float = 1e-5) -> np.ndarray:
    out = np.empty(hi - lo)
    for k in range(lo, hi):
        orig = vec[k]
        vec[k] = orig + h
        up = f()
        vec[k] = orig - h
        down = f()
        vec[k] = orig
        out[k - lo] = (up - down) / (2 * h)
    return out


def frozen_block_derivative(
    loss_kind: str,
    tup: TrainingTuple,
    tables: Tables,
    schedule: DimensionSchedule,
    level: int,
    finite_differences: bool = True,
    fd_step: float = 1e-5,
) -> GradientReport:
    """Compare a loss's block derivative with its closed form when all other blocks are zero.

    Raises
    ------
    NonZeroFrozenBlocks
        Some involved vector has a non-zero entry outside the target block.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    L = schedule.levels
    if not 1 <= level <= L:
        raise ValueError(f"level {level} outside 1..{L}")
    lo, hi = schedule.size(level - 1), schedule.size(level)
    items = [tup.positive, *tup.negatives]
    if tup.positive in tup.negatives:
        raise ValueError("positive item may not double as a negative")
    vectors = [tables.users.data[tup.user]] + [tables.items.data[i] for i in items]
    for vec in vectors:
        if np.any(vec[:lo] != 0.0) or np.any(vec[hi:] != 0.0):
            raise NonZeroFrozenBlocks(f"entries outside [{lo}, {hi}) must be exactly zero")

    used = _tuple_negatives(loss_kind, tup, schedule)
    result = compute_loss(loss_kind, [used], tables, schedule)
    eu = tables.users.data[tup.user]
    user_block = result.row("user", tup.user)[lo:hi]
    positive_block = result.row("item", tup.positive)[lo:hi]
    negative_blocks = np.stack([result.row("item", j)[lo:hi] for j in used.negatives])
    norm2 = float(eu[lo:hi] @ eu[lo:hi])
    if norm2 == 0.0:
        raise ValueError("user block is zero; the score derivative is unidentifiable")
    analytic = float(positive_block @ eu[lo:hi]) / norm2

    ei = tables.items.data[tup.positive]
    r_pos = float(eu[lo:hi] @ ei[lo:hi])
    if loss_kind == BPR:
        j = used.negatives[0]
        delta = r_pos - float(eu[lo:hi] @ tables.items.data[j, lo:hi])
        closed = -(1.0 / L) * L * (1.0 - float(sigmoid(delta)))
    else:
        negs = used.negatives * L if loss_kind == MRL else used.negatives
        closed = 0.0
        for k in range(level, L + 1):
            j = negs[k - 1]
            delta = r_pos - float(eu[lo:hi] @ tables.items.data[j, lo:hi])
            closed -= schedule.weights[k - 1] * (1.0 - float(sigmoid(delta)))

    fd_user = fd_pos = None
    if finite_differences:
        probe = tables.copy()

        def value():
            return compute_loss(loss_kind, [used], probe, schedule).loss

        fd_user = _fd_block(value, probe.users.data[tup.user], lo, hi, fd_step)
        fd_pos = _fd_block(value, probe.items.data[tup.positive], lo, hi, fd_step)
    return GradientReport(
        loss_kind=loss_kind,
        level=level,
        levels=L,
        analytic=analytic,
        closed_form=closed,
        difference=analytic - closed,
        user_block=user_block,
        positive_block=positive_block,
        negative_blocks=negative_blocks,
        fd_user_block=fd_user,
        fd_positive_block=fd_pos,
    )
