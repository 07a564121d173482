import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrlrec.embeddings import Tables
from mrlrec.losses import (
    BPR,
    MRL,
    MRL_MNS,
    NonZeroFrozenBlocks,
    ScheduleMismatch,
    WrongTupleArity,
    bpr_loss,
    compute_loss,
    frozen_block_derivative,
    mrl_loss,
    mrl_mns_loss,
)
from mrlrec.types import TrainingTuple, TupleBatch, validate_schedule
from mrlrec.verification import frozen_instance, schedule_for_levels

import oracles

SCHED5 = validate_schedule([4, 8, 16, 32, 64], 64)


def _tables(rng, n_users, n_items, d, scale=1.0):
    return Tables.from_arrays(scale * rng.normal(size=(n_users, d)), scale * rng.normal(size=(n_items, d)))


def test_tied_scores_give_ln2():
    t = Tables.from_arrays(np.array([[1.0, 0.0]]), np.array([[2.0, 1.0], [2.0, -3.0]]))
    r = bpr_loss(TrainingTuple(0, 0, (1,)), t)
    assert abs(r.loss - math.log(2)) < 1e-15


def test_unit_margin():
    t = Tables.from_arrays(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 0.0]]))
    r = bpr_loss(TrainingTuple(0, 0, (1,)), t)
    assert abs(r.loss - 0.313262) < 1e-6
    assert abs(r.loss + math.log(1 / (1 + math.exp(-1)))) < 1e-15


def test_all_zero_embeddings_mrl():
    t = Tables.from_arrays(np.zeros((1, 64)), np.zeros((2, 64)))
    r = mrl_loss(TrainingTuple(0, 0, (1,)), t, SCHED5)
    assert abs(r.loss - math.log(2)) < 1e-15


def test_loss_values_match_oracle(rng):
    t = _tables(rng, 4, 9, 64, 0.3)
    negs = rng.integers(0, 9, size=(6, 5))
    users, pos = rng.integers(0, 4, 6), rng.integers(0, 9, 6)
    for kind in (BPR, MRL, MRL_MNS):
        n, sizes, weights = oracles.loss_spec(kind, negs, SCHED5.sizes, SCHED5.weights)
        batch = TupleBatch(users, pos, n if kind != MRL else n[:, :1])
        got = compute_loss(kind, batch, t, SCHED5).loss
        want = oracles.nested_loss_value(t.users.data[None], t.items.data[None], users, pos, n, sizes, weights)[0]
        assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


@pytest.mark.parametrize("kind", [BPR, MRL, MRL_MNS])
def test_gradients_match_finite_differences(kind, rng):
    sched = validate_schedule([2, 4, 8], 8)
    t = _tables(rng, 3, 7, 8)
    users, pos = np.array([0, 1, 0, 2]), np.array([1, 2, 3, 1])
    negs = rng.integers(0, 7, size=(4, 3))
    n, sizes, weights = oracles.loss_spec(kind, negs, sched.sizes, sched.weights)
    batch = TupleBatch(users, pos, n if kind != MRL else n[:, :1])
    r = compute_loss(kind, batch, t, sched)
    fu, fi = oracles.fd_gradient(t.users.data, t.items.data, users, pos, n, sizes, weights)
    assert oracles.rel_err(r.dense("user", 3), fu) < 1e-6
    assert oracles.rel_err(r.dense("item", 7), fi) < 1e-6


@pytest.mark.parametrize("kind", [BPR, MRL, MRL_MNS])
def test_mean_reduction_scales_sum(kind, rng):
    t = _tables(rng, 3, 6, 64, 0.2)
    batch = TupleBatch(rng.integers(0, 3, 5), rng.integers(0, 6, 5), rng.integers(0, 6, (5, 5 if kind == MRL_MNS else 1)))
    s = compute_loss(kind, batch, t, SCHED5, "sum")
    m = compute_loss(kind, batch, t, SCHED5, "mean")
    assert abs(m.loss - s.loss / 5) < 1e-12
    np.testing.assert_allclose(m.gradients["item"].values, s.gradients["item"].values / 5, rtol=1e-12)
    with pytest.raises(ValueError):
        compute_loss(kind, batch, t, SCHED5, "median")


def test_duplicate_rows_accumulate(rng):
    t = _tables(rng, 1, 3, 4)
    one = bpr_loss(TrainingTuple(0, 1, (2,)), t)
    two = bpr_loss([TrainingTuple(0, 1, (2,))] * 2, t)
    np.testing.assert_allclose(two.dense("user", 1), 2 * one.dense("user", 1), rtol=1e-14)
    assert list(two.gradients["user"].rows) == [0]


def test_many_rows_accumulate_like_small_path(rng):
    # the sparse-matrix path (large batches) and the add.at path agree
    t = _tables(rng, 5, 8, 8, 0.5)
    batch = TupleBatch(rng.integers(0, 5, 300), rng.integers(0, 8, 300), rng.integers(0, 8, (300, 1)))
    big = bpr_loss(batch, t)
    parts = [bpr_loss(TupleBatch(batch.users[s:s + 50], batch.positives[s:s + 50], batch.negatives[s:s + 50]), t) for s in range(0, 300, 50)]
    np.testing.assert_allclose(big.dense("item", 8), sum(p.dense("item", 8) for p in parts), atol=1e-12)


@given(st.floats(-30, 30), st.floats(1e-3, 5), st.integers(0, 2))
def test_larger_margin_lowers_each_loss(base, step, kind_idx):
    kind = (BPR, MRL, MRL_MNS)[kind_idx]
    sched = validate_schedule([1, 2], 2)
    # user (1, 1); positive (a, a) so both prefix margins grow with a
    def loss(a):
        t = Tables.from_arrays(np.array([[1.0, 1.0]]), np.array([[a, a], [0.0, 0.0], [0.1, -0.1]]))
        negs = (1, 2) if kind == MRL_MNS else (1,)
        return compute_loss(kind, TrainingTuple(0, 0, negs), t, sched).per_tuple[0]
    lo, hi = loss(base), loss(base + step)
    assert hi < lo


def test_mrl_single_level_equals_bpr(rng):
    t = _tables(rng, 3, 5, 16)
    batch = TupleBatch(rng.integers(0, 3, 7), rng.integers(0, 5, 7), rng.integers(0, 5, (7, 1)))
    a = bpr_loss(batch, t)
    b = mrl_loss(batch, t, validate_schedule([16], 16))
    assert abs(a.loss - b.loss) <= 1e-12
    for k in ("user", "item"):
        np.testing.assert_allclose(a.dense(k, 5), b.dense(k, 5), atol=1e-12)


def test_mns_with_identical_negatives_equals_mrl(rng):
    t = _tables(rng, 3, 5, 64, 0.2)
    j = rng.integers(0, 5, (6, 1))
    users, pos = rng.integers(0, 3, 6), rng.integers(0, 5, 6)
    a = mrl_loss(TupleBatch(users, pos, j), t, SCHED5)
    b = mrl_mns_loss(TupleBatch(users, pos, np.repeat(j, 5, axis=1)), t, SCHED5)
    assert a.loss == b.loss
    for k in ("user", "item"):
        np.testing.assert_array_equal(a.dense(k, 5), b.dense(k, 5))


def test_arity_errors(rng):
    t = _tables(rng, 1, 6, 64)
    with pytest.raises(WrongTupleArity):
        bpr_loss(TrainingTuple(0, 0, (1, 2)), t)
    with pytest.raises(WrongTupleArity):
        mrl_mns_loss(TrainingTuple(0, 0, (1, 2)), t, SCHED5)
    with pytest.raises(ScheduleMismatch):
        mrl_loss(TrainingTuple(0, 0, (1, 2, 3, 4, 5)), t, SCHED5)
    with pytest.raises(ScheduleMismatch):
        mrl_loss(TrainingTuple(0, 0, (1,)), t, validate_schedule([4, 8], 8))


def test_frozen_block_ratio_example():
    rng = np.random.default_rng(3)
    sched = schedule_for_levels(5)
    t, tup = frozen_instance(rng, sched, 2, 1)
    b = frozen_block_derivative(BPR, tup, t, sched, 2)
    m = frozen_block_derivative(MRL, tup, t, sched, 2)
    assert abs(m.analytic / b.analytic - 0.8) < 1e-12
    assert abs(b.difference) < 1e-10 and abs(m.difference) < 1e-10
    np.testing.assert_allclose(m.user_block, 0.8 * b.user_block, atol=1e-12)
    assert oracles.rel_err(b.user_block, b.fd_user_block) < 1e-6


def test_frozen_block_mns_closed_form():
    rng = np.random.default_rng(4)
    sched = schedule_for_levels(3)
    for level in (1, 2, 3):
        t, tup = frozen_instance(rng, sched, level, 3)
        r = frozen_block_derivative(MRL_MNS, tup, t, sched, level)
        assert abs(r.difference) < 1e-10
        assert oracles.rel_err(r.positive_block, r.fd_positive_block) < 1e-6


def test_frozen_block_rejects_context():
    rng = np.random.default_rng(5)
    sched = schedule_for_levels(2)
    t, tup = frozen_instance(rng, sched, 1, 1)
    t.items.data[0, -1] = 0.5
    with pytest.raises(NonZeroFrozenBlocks):
        frozen_block_derivative(BPR, tup, t, sched, 1)
