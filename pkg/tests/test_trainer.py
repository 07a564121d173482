import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrlrec.data import InteractionDataset
from mrlrec.embeddings import Tables, init_tables
from mrlrec.losses import SparseGrad
from mrlrec.sampling import SamplerConfig
from mrlrec.seeding import make_rng
from mrlrec.trainer import (
    AdamState,
    ConfigError,
    NonFiniteGradient,
    TrainConfig,
    UnknownVariant,
    adam_step,
    build_variant,
    train,
    write_epoch_log,
)

import oracles

FAST = dict(dims=(2, 4, 8), batch_size=256, learning_rate=0.01, max_epochs=8, eval_every=2, patience=5)


def _scalar_tables(value=0.0):
    return Tables.from_arrays(np.array([[value]]), np.array([[0.0]]))


def _grad(value):
    return {"user": SparseGrad(np.array([0]), np.array([[value]]))}


def test_first_adam_step_moves_by_lr():
    t = _scalar_tables(1.0)
    state = AdamState.for_tables(t)
    adam_step(t, _grad(1.0), state, 0.001)
    assert abs((1.0 - t.users.data[0, 0]) - 0.001 / (1 + 1e-8)) < 1e-15
    assert t.items.data[0, 0] == 0.0 and state.m["item"][0, 0] == 0.0


def test_zero_gradient_decays_touched_moments_only():
    t = Tables.from_arrays(np.array([[1.0], [2.0]]), np.array([[0.0]]))
    state = AdamState.for_tables(t)
    adam_step(t, {"user": SparseGrad(np.array([0, 1]), np.array([[1.0], [1.0]]))}, state, 0.01)
    before = t.users.data.copy()
    m1 = state.m["user"].copy()
    adam_step(t, {"user": SparseGrad(np.array([0]), np.array([[0.0]]))}, state, 0.01)
    assert state.m["user"][0, 0] == pytest.approx(0.9 * m1[0, 0])
    assert state.m["user"][1, 0] == m1[1, 0]
    assert t.users.data[1, 0] == before[1, 0]


def test_opposite_gradients_return_near_start():
    t = _scalar_tables(0.5)
    state = AdamState.for_tables(t)
    adam_step(t, _grad(1.0), state, 0.001)
    adam_step(t, _grad(-1.0), state, 0.001)
    assert abs(t.users.data[0, 0] - 0.5) < 0.001


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(1e-4, 0.1))
def test_adam_matches_scalar_reference(grads, lr):
    t = _scalar_tables(0.3)
    state = AdamState.for_tables(t)
    ref = oracles.ScalarAdam(lr)
    x = 0.3
    for g in grads:
        adam_step(t, _grad(g), state, lr)
        x = ref.step(x, g)
    assert t.users.data[0, 0] == pytest.approx(x, rel=1e-12, abs=1e-15)


def test_non_finite_gradient():
    t = _scalar_tables()
    with pytest.raises(NonFiniteGradient):
        adam_step(t, _grad(float("nan")), AdamState.for_tables(t), 0.1)


def test_variant_composition():
    v = build_variant("mrl-m", TrainConfig())
    assert (v.loss_name, v.sampler_name) == ("mrl-mns", "mns")
    v = build_variant("bpr-d", TrainConfig(variant="bpr-d", dims=(64,)))
    assert (v.loss_name, v.sampler_name) == ("bpr", "dns")
    assert build_variant("mrl-d", TrainConfig()).loss_name == "mrl"
    assert build_variant("bpr-m", TrainConfig()).sampler_name == "mns"
    with pytest.raises(UnknownVariant):
        build_variant("xyz", TrainConfig())
    with pytest.raises(UnknownVariant):
        TrainConfig(variant="xyz")


def test_sampler_must_fit_variant():
    with pytest.raises(ConfigError):
        build_variant("mrl-m", TrainConfig(sampler=SamplerConfig(strategy="dns")))
    with pytest.raises(ConfigError):
        build_variant("mrl-d", TrainConfig(sampler=SamplerConfig(strategy="mns")))
    assert build_variant("mrl-d", TrainConfig(sampler=SamplerConfig(strategy="uniform"))).sampler_name == "uniform"


def test_config_roundtrip():
    cfg = TrainConfig(variant="bpr-m", dims=(8, 16), weights=(0.25, 0.75), sampler=SamplerConfig(dns_pool_size=4))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert TrainConfig.from_dict({"sampler.dns_pool_size": 3}).sampler.dns_pool_size == 3
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rat": 0.1})
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    assert TrainConfig().override(dns_pool_size=2, seed=4).sampler.dns_pool_size == 2


def test_injected_evaluator_early_stop(small_split):
    ds, _ = small_split
    scores = iter([0.5, 0.3, 0.9])
    cfg = TrainConfig(**{**FAST, "eval_every": 1, "patience": 1})
    result = train(ds, cfg, evaluator=lambda tables: next(scores))
    assert result.stopped_epoch == 2 and result.best_epoch == 1
    assert [r.val_recall_at_20 for r in result.log] == [0.5, 0.3]
    one = train(ds, cfg.override(max_epochs=1), evaluator=lambda tables: 0.0)
    assert result.tables == one.tables


def test_training_is_deterministic(small_split, tmp_path):
    ds, _ = small_split
    cfg = TrainConfig(**FAST, seed=3)
    a, b = train(ds, cfg), train(ds, cfg)
    assert a.tables == b.tables
    strip = lambda log: [(r.epoch, r.train_loss, r.val_recall_at_20) for r in log]
    assert strip(a.log) == strip(b.log)
    a.save(tmp_path / "a.ckpt")
    b.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_best_checkpoint_contract(small_split):
    ds, _ = small_split
    from mrlrec.evaluation import evaluate

    result = train(ds, TrainConfig(**FAST))
    logged = [r.val_recall_at_20 for r in result.log if r.val_recall_at_20 is not None]
    final = evaluate(result.tables, ds, "validation", ks=(20,)).recall(20)
    assert final == result.best_val_recall
    assert all(final >= x for x in logged)


@pytest.mark.parametrize("variant", ["bpr-d", "bpr-m", "mrl-d", "mrl-m"])
def test_train_loss_decreases(small_split, variant):
    ds, _ = small_split
    for seed in range(3):
        cfg = TrainConfig(**{**FAST, "max_epochs": 15, "eval_every": 100}, variant=variant, seed=seed)
        losses = [r.train_loss for r in train(ds, cfg).log]
        assert np.median(losses[-5:]) < np.median(losses[:5])


def test_training_improves_over_first_epoch(small_split):
    ds, _ = small_split
    cfg = TrainConfig(dims=(4, 8, 16), batch_size=256, learning_rate=0.01, max_epochs=50, eval_every=1, patience=50)
    result = train(ds, cfg)
    assert result.best_val_recall > result.log[0].val_recall_at_20


def test_untouched_rows_keep_initialisation():
    arr = lambda x: np.array(x, dtype=np.int64).reshape(-1, 2)
    train_pairs = arr([(0, 0), (0, 1), (1, 1), (1, 2), (2, 0)])
    test_pairs = arr([(3, 2), (0, 2)])
    ds = InteractionDataset(
        [f"u{k}" for k in range(4)], ["a", "b", "c"], np.concatenate([train_pairs, test_pairs]), train_pairs, arr([]), test_pairs
    )
    cfg = TrainConfig(dims=(2, 4), batch_size=2, max_epochs=3, learning_rate=0.05)
    result = train(ds, cfg)
    init = init_tables(4, 3, 4, make_rng(cfg.seed, "init"))
    np.testing.assert_array_equal(result.tables.users.data[3], init.users.data[3])
    assert not np.array_equal(result.tables.users.data[0], init.users.data[0])


def test_monitor_only_trains_on_validation(small_split):
    ds, _ = small_split
    cfg = TrainConfig(**FAST, validation_mode="monitor-only")
    result = train(ds, cfg)
    assert result.best_val_recall is not None


def test_bpr_m_modes(small_split):
    ds, _ = small_split
    for mode in ("expand", "last"):
        result = train(ds, TrainConfig(**{**FAST, "max_epochs": 2}, variant="bpr-m", bpr_m_mode=mode))
        assert math.isfinite(result.log[-1].train_loss)


def test_epoch_log_file(small_split, tmp_path):
    ds, _ = small_split
    result = train(ds, TrainConfig(**{**FAST, "max_epochs": 3}))
    write_epoch_log(tmp_path / "log.csv", result.log)
    lines = (tmp_path / "log.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "epoch,train_loss,val_recall_at_20,elapsed_ms"
    assert len(lines) == 4
    assert lines[1].split(",")[2] == ""  # no evaluation at epoch 1
