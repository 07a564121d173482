"""Mini-batch training of matrix-factorization embeddings with lazy Adam.

Four variants combine a sampler with a loss:

========  ====================  ==========================
variant   negatives             loss
========  ====================  ==========================
bpr-d     DNS on full vectors   BPR
bpr-m     MNS, one per level    BPR on each ``(u, i, j_l)``
mrl-d     DNS on full vectors   MRL, negative shared
mrl-m     MNS, one per level    MRL, level ``l`` uses ``j_l``
========  ====================  ==========================
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import losses, sampling
from .data import InteractionDataset, PositiveIndex
from .embeddings import Tables, init_tables, save_checkpoint
from .evaluation import evaluate
from .losses import LossBatchResult, SparseGrad
from .seeding import make_rng
from .types import DimensionSchedule, MRLRecError, TupleBatch, validate_schedule

logger = logging.getLogger(__name__)

VARIANTS = ("bpr-d", "bpr-m", "mrl-d", "mrl-m")
VALIDATION_MODES = ("holdout", "monitor-only")
BPR_M_MODES = ("expand", "last")


class UnknownVariant(MRLRecError, ValueError):
    pass


class NonFiniteGradient(MRLRecError, FloatingPointError):
    pass


class ConfigError(MRLRecError, ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "mrl-m"
    learning_rate: float = 0.001
    batch_size: int = 2048
    max_epochs: int = 300
    patience: int = 10
    eval_every: int = 5
    seed: int = 0
    dims: tuple[int, ...] = (4, 8, 16, 32, 64)
    weights: tuple[float, ...] | None = None
    sampler: sampling.SamplerConfig = field(default_factory=sampling.SamplerConfig)
    weight_decay: float = 0.0
    reduction: str = "sum"
    validation_mode: str = "holdout"
    bpr_m_mode: str = "expand"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.variant not in VARIANTS:
            raise UnknownVariant(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.reduction not in losses.REDUCTIONS:
            raise ConfigError(f"reduction must be one of {losses.REDUCTIONS}")
        if self.validation_mode not in VALIDATION_MODES:
            raise ConfigError(f"validation_mode must be one of {VALIDATION_MODES}")
        if self.bpr_m_mode not in BPR_M_MODES:
            raise ConfigError(f"bpr_m_mode must be one of {BPR_M_MODES}")
        self.schedule  # validates dims/weights

    @property
    def schedule(self) -> DimensionSchedule:
        return validate_schedule(self.dims, self.dims[-1] if self.dims else 0, self.weights)

    @property
    def dim(self) -> int:
        return self.dims[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["weights"] = list(self.schedule.weights)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        sampler = dict(raw.pop("sampler", None) or {})
        for key in list(raw):
            if key.startswith("sampler."):
                sampler[key.split(".", 1)[1]] = raw.pop(key)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if raw.get("weights") is not None:
            raw["weights"] = tuple(raw["weights"])
        if "dims" in raw:
            raw["dims"] = tuple(raw["dims"])
        return cls(**raw, sampler=sampling.SamplerConfig(**sampler))

    def override(self, **changes) -> "TrainConfig":
        sampler_changes = {k: changes.pop(k) for k in ("strategy", "dns_pool_size") if k in changes}
        cfg = replace(self, **changes)
        if sampler_changes:
            cfg = replace(cfg, sampler=replace(cfg.sampler, **sampler_changes))
        return cfg


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_tables(cls, tables: Tables, beta1=0.9, beta2=0.999, epsilon=1e-8) -> "AdamState":
        shapes = {"user": tables.users.data.shape, "item": tables.items.data.shape}
        return cls(
            {k: np.zeros(s) for k, s in shapes.items()},
            {k: np.zeros(s) for k, s in shapes.items()},
            0,
            beta1,
            beta2,
            epsilon,
        )


def adam_step(tables: Tables, gradients: dict[str, SparseGrad], state: AdamState, lr: float):
    """One bias-corrected Adam update restricted to the rows present in ``gradients``.

    Rows absent from the map keep both their values and their moments.
    Updates ``tables`` and ``state`` in place and returns them.
    """
    for kind, g in gradients.items():
        if not np.all(np.isfinite(g.values)):
            raise NonFiniteGradient(f"non-finite gradient in {kind} table")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for kind, (rows, values) in gradients.items():
        if len(rows) == 0:
            continue
        data = tables.table(kind).data
        m = state.m[kind]
        v = state.v[kind]
        m_rows = b1 * m[rows] + (1.0 - b1) * values
        v_rows = b2 * v[rows] + (1.0 - b2) * values * values
        m[rows] = m_rows
        v[rows] = v_rows
        data[rows] -= lr * (m_rows / bc1) / (np.sqrt(v_rows / bc2) + state.epsilon)
    return tables, state


# ---------------------------------------------------------------------------
# variants


SampleFn = Callable[[np.ndarray, np.ndarray, PositiveIndex, Tables, np.random.Generator], TupleBatch]
LossFn = Callable[[TupleBatch, Tables], LossBatchResult]


@dataclass(frozen=True)
class Variant:
    name: str
    loss_name: str
    sampler_name: str
    loss: LossFn
    sample: SampleFn


def _bpr_over_levels(batch: TupleBatch, tables: Tables, reduction: str) -> LossBatchResult:
    """BPR on every ``(u, i, j_l)`` of a matryoshka tuple, averaged over levels."""
    L = batch.n_negatives
    expanded = TupleBatch(
        np.repeat(batch.users, L), np.repeat(batch.positives, L), batch.negatives.reshape(-1, 1)
    )
    res = losses.bpr_loss(expanded, tables, "sum")
    scale = 1.0 / L
    if reduction == "mean":
        scale /= len(batch)
    grads = {k: SparseGrad(g.rows, g.values * scale) for k, g in res.gradients.items()}
    per_tuple = res.per_tuple.reshape(-1, L).sum(axis=1) / L
    return LossBatchResult(res.loss * scale, grads, per_tuple)


def build_variant(variant: str, config: TrainConfig) -> Variant:
    if variant not in VARIANTS:
        raise UnknownVariant(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    schedule = config.schedule
    pool = config.sampler.dns_pool_size
    reduction = config.reduction
    uses_mns = variant.endswith("-m")
    strategy = config.sampler.strategy or (sampling.MNS if uses_mns else sampling.DNS)
    if uses_mns and strategy != sampling.MNS:
        raise ConfigError(f"variant {variant} requires the mns sampler, got {strategy}")
    if not uses_mns and strategy == sampling.MNS:
        raise ConfigError(f"variant {variant} cannot use the mns sampler")
    if strategy == sampling.UNIFORM:
        pool = 1

    if uses_mns:
        def sample(users, pos, index, tables, rng):
            negs = sampling.mns_batch(users, pos, index, tables, schedule, pool, rng)
            return TupleBatch(users, pos, negs)
    else:
        def sample(users, pos, index, tables, rng):
            negs = sampling.dns_batch(users, pos, index, tables, schedule.full_dim, pool, rng)
            return TupleBatch(users, pos, negs[:, None])

    if variant == "bpr-d":
        loss_name = losses.BPR
        def loss(batch, tables):
            return losses.bpr_loss(batch, tables, reduction)
    elif variant == "mrl-d":
        loss_name = losses.MRL
        def loss(batch, tables):
            return losses.mrl_loss(batch, tables, schedule, reduction)
    elif variant == "mrl-m":
        loss_name = losses.MRL_MNS
        def loss(batch, tables):
            return losses.mrl_mns_loss(batch, tables, schedule, reduction)
    elif config.bpr_m_mode == "last":
        loss_name = losses.BPR
        def loss(batch, tables):
            last = TupleBatch(batch.users, batch.positives, batch.negatives[:, -1:])
            return losses.bpr_loss(last, tables, reduction)
    else:
        loss_name = losses.BPR
        def loss(batch, tables):
            return _bpr_over_levels(batch, tables, reduction)

    return Variant(variant, loss_name, strategy, loss, sample)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_recall_at_20: float | None
    elapsed_ms: float


@dataclass
class TrainResult:
    tables: Tables
    schedule: DimensionSchedule
    config: TrainConfig
    log: list[EpochRecord]
    best_epoch: int
    best_val_recall: float | None
    stopped_epoch: int
    repeat_rate: float = 0.0

    def save(self, path) -> None:
        save_checkpoint(path, self.tables, self.schedule)
        with open(f"{path}.json", "w", encoding="utf-8") as fh:
            json.dump(self.config.to_dict(), fh, sort_keys=True, indent=2)

    def write_log(self, path) -> None:
        write_epoch_log(path, self.log)


def write_epoch_log(path, log: list[EpochRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_recall_at_20", "elapsed_ms"])
        for rec in log:
            val = "" if rec.val_recall_at_20 is None else repr(rec.val_recall_at_20)
            w.writerow([rec.epoch, repr(rec.train_loss), val, f"{rec.elapsed_ms:.1f}"])


def _add_weight_decay(grads: dict[str, SparseGrad], tables: Tables, decay: float) -> dict[str, SparseGrad]:
    if decay == 0.0:
        return grads
    return {
        k: SparseGrad(g.rows, g.values + decay * tables.table(k).data[g.rows]) for k, g in grads.items()
    }


def _validation_recall(dataset: InteractionDataset):
    def score(tables: Tables) -> float:
        return evaluate(tables, dataset, "validation", ks=(20,)).recall(20)

    return score


def train(
    dataset: InteractionDataset,
    config: TrainConfig,
    evaluator: Callable[[Tables], float] | None = None,
) -> TrainResult:
    """Train one variant and return the best-validation tables with the epoch log.

    ``evaluator`` maps the current tables to the monitored score; it
    defaults to validation Recall@20. Training stops after ``patience``
    consecutive evaluations without strict improvement.
    """
    schedule = config.schedule
    variant = build_variant(config.variant, config)
    monitor_only = config.validation_mode == "monitor-only"
    pairs = dataset.partition("train")
    if monitor_only:
        pairs = np.concatenate([pairs, dataset.partition("validation")])
    if len(pairs) == 0:
        raise ConfigError("no training interactions")
    index = dataset.positives(include_validation=monitor_only)
    has_validation = len(dataset.partition("validation")) > 0
    if evaluator is None and has_validation:
        evaluator = _validation_recall(dataset)

    tables = init_tables(dataset.n_users, dataset.n_items, config.dim, make_rng(config.seed, "init"))
    state = AdamState.for_tables(tables, config.beta1, config.beta2, config.epsilon)
    shuffle_rng = make_rng(config.seed, "shuffle")
    sampler_seed = config.seed if config.sampler.seed is None else config.sampler.seed
    sampler_rng = make_rng(sampler_seed, "sampler")

    best_score = -math.inf
    best_tables = tables.copy()
    best_epoch = 0
    bad_evals = 0
    log: list[EpochRecord] = []
    repeats = []
    start = time.perf_counter()
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        perm = shuffle_rng.permutation(len(pairs))
        total = 0.0
        for lo in range(0, len(perm), config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            users, pos = pairs[idx, 0], pairs[idx, 1]
            batch = variant.sample(users, pos, index, tables, sampler_rng)
            if batch.n_negatives > 1:
                repeats.append(sampling.repeat_rate(batch.negatives))
            result = variant.loss(batch, tables)
            total += float(result.per_tuple.sum())
            grads = _add_weight_decay(result.gradients, tables, config.weight_decay)
            adam_step(tables, grads, state, config.learning_rate)

        score = None
        last = epoch == config.max_epochs
        if evaluator is not None and (epoch % config.eval_every == 0 or last):
            score = float(evaluator(tables))
            if score > best_score:
                best_score, best_epoch, bad_evals = score, epoch, 0
                best_tables = tables.copy()
            else:
                bad_evals += 1
        elapsed = (time.perf_counter() - start) * 1000.0
        log.append(EpochRecord(epoch, total / len(pairs), score, elapsed))
        logger.debug("epoch %d loss %.5f val %s", epoch, total / len(pairs), score)
        if bad_evals >= config.patience:
            break

    if evaluator is None:
        best_tables, best_epoch = tables.copy(), epoch
    return TrainResult(
        tables=best_tables,
        schedule=schedule,
        config=config,
        log=log,
        best_epoch=best_epoch,
        best_val_recall=None if best_score == -math.inf else best_score,
        stopped_epoch=epoch,
        repeat_rate=float(np.mean(repeats)) if repeats else 0.0,
    )
