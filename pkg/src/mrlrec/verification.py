"""Randomized checks of the frozen-block gradient structure of BPR, MRL and MRL-MNS.

Each trial builds vectors that are zero everywhere except one block
``[d_{l-1}, d_l)``, so the block derivatives have exact closed forms:

* BPR:      ``-(1 - sigmoid(delta))``
* MRL:      ``-((L - l + 1) / L) * (1 - sigmoid(delta))``
* MRL-MNS:  ``-(1 / L) * sum_{k=l..L} (1 - sigmoid(delta_k))``

and the MRL block gradient is the BPR one scaled by ``(L - l + 1) / L``,
while MRL-MNS with distinct negatives points in a different direction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .embeddings import Tables
from .losses import BPR, MRL, MRL_MNS, frozen_block_derivative
from .types import DimensionSchedule, TrainingTuple, validate_schedule

DEFAULT_DIMS = (4, 8, 16, 32, 64)
LEVEL_COUNTS = (2, 3, 5)

CLOSED_FORM_TOL = 1e-10
COEFFICIENT_TOL = 1e-9
COLLINEAR_TOL = 1e-9
DISPARITY_MARGIN = 1e-6
FD_TOL = 1e-4


def schedule_for_levels(levels: int, dims=DEFAULT_DIMS) -> DimensionSchedule:
    """The last ``levels`` sizes of ``dims``, e.g. 2 levels -> ``{32, 64}``."""
    return validate_schedule(dims[-levels:], dims[-1])


def frozen_instance(
    rng: np.random.Generator, schedule: DimensionSchedule, level: int, n_negatives: int
) -> tuple[Tables, TrainingTuple]:
    """One user, one positive and ``n_negatives`` distinct negatives, non-zero only in block ``level``.

    Entries are scaled so block scores have unit variance; larger scores
    saturate the sigmoid and make every loss direction numerically alike.
    """
    lo, hi = schedule.size(level - 1), schedule.size(level)
    d = schedule.full_dim
    scale = (hi - lo) ** -0.25
    users = np.zeros((1, d))
    items = np.zeros((1 + n_negatives, d))
    users[0, lo:hi] = scale * rng.normal(size=hi - lo)
    items[:, lo:hi] = scale * rng.normal(size=(1 + n_negatives, hi - lo))
    tup = TrainingTuple(0, 0, tuple(range(1, 1 + n_negatives)))
    return Tables.from_arrays(users, items), tup


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _rel_err(a, b) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)))
    return 0.0 if scale == 0 else float(np.max(np.abs(a - b)) / scale)


@dataclass
class CheckStats:
    evaluated: int = 0
    failures: int = 0
    worst: float = 0.0

    def record(self, ok: bool, value: float) -> None:
        self.evaluated += 1
        self.failures += not ok
        self.worst = max(self.worst, float(value))


@dataclass
class TheoremReport:
    seed: int
    trials: int
    checks: dict[str, CheckStats] = field(default_factory=dict)

    @property
    def failures(self) -> int:
        return sum(c.failures for c in self.checks.values())

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "trials": self.trials,
            "failures": self.failures,
            "passed": self.passed,
            "checks": {
                name: {"evaluated": c.evaluated, "failures": c.failures, "worst": c.worst}
                for name, c in self.checks.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def verify_theorem(
    seed: int = 7, trials: int = 200, level_counts=LEVEL_COUNTS, fd_trials: int = 5
) -> TheoremReport:
    """Run ``trials`` randomized rounds; each round covers every ``L`` and every level ``l``.

    Finite-difference cross-checks are costly and run only in the first
    ``fd_trials`` rounds.
    """
    rng = np.random.default_rng(seed)
    report = TheoremReport(seed, trials)
    names = (
        "bpr_closed_form",
        "mrl_closed_form",
        "mns_closed_form",
        "mrl_bpr_coefficient",
        "mrl_bpr_collinear",
        "mns_bpr_disparity",
        "finite_difference",
    )
    for name in names:
        report.checks[name] = CheckStats()
    c = report.checks

    for trial in range(trials):
        fd_on = trial < fd_trials
        for L in level_counts:
            schedule = schedule_for_levels(L)
            for level in range(1, L + 1):
                tables, tup = frozen_instance(rng, schedule, level, L)
                shared = TrainingTuple(tup.user, tup.positive, (tup.negatives[-1],))
                bpr = frozen_block_derivative(BPR, shared, tables, schedule, level, fd_on)
                mrl = frozen_block_derivative(MRL, shared, tables, schedule, level, fd_on)
                mns = frozen_block_derivative(MRL_MNS, tup, tables, schedule, level, fd_on)

                for stats, rep in ((c["bpr_closed_form"], bpr), (c["mrl_closed_form"], mrl), (c["mns_closed_form"], mns)):
                    err = abs(rep.difference)
                    stats.record(err <= CLOSED_FORM_TOL, err)

                coef = (L - level + 1) / L
                scaled = [coef * g for g in (bpr.user_block, bpr.positive_block, bpr.negative_blocks)]
                actual = [mrl.user_block, mrl.positive_block, mrl.negative_blocks]
                err = max(float(np.max(np.abs(a - s))) for a, s in zip(actual, scaled))
                c["mrl_bpr_coefficient"].record(err <= COEFFICIENT_TOL, err)

                cos = cosine(mrl.user_block, bpr.user_block)
                c["mrl_bpr_collinear"].record(cos >= 1 - COLLINEAR_TOL, 1 - cos)

                if level < L:
                    # several distinct negatives act on this block
                    cos = cosine(mns.user_block, bpr.user_block)
                    c["mns_bpr_disparity"].record(cos < 1 - DISPARITY_MARGIN, cos)

                if fd_on:
                    fd = max(
                        max(_rel_err(r.user_block, r.fd_user_block), _rel_err(r.positive_block, r.fd_positive_block))
                        for r in (bpr, mrl, mns)
                    )
                    c["finite_difference"].record(fd <= FD_TOL, fd)
    return report


@dataclass
class CoefficientReport:
    seeds: int
    cases: int
    worst: float
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def coefficient_check(seeds=range(200), level_counts=LEVEL_COUNTS, tol: float = COEFFICIENT_TOL) -> CoefficientReport:
    """Elementwise check that the MRL block gradient is ``(L - l + 1) / L`` times the BPR one.

    One generator per seed; every ``(L, l)`` pair is covered for each seed.
    """
    seeds = list(seeds)
    worst, cases, failures = 0.0, 0, []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for L in level_counts:
            schedule = schedule_for_levels(L)
            for level in range(1, L + 1):
                tables, tup = frozen_instance(rng, schedule, level, 1)
                bpr = frozen_block_derivative(BPR, tup, tables, schedule, level, finite_differences=False)
                mrl = frozen_block_derivative(MRL, tup, tables, schedule, level, finite_differences=False)
                coef = (L - level + 1) / L
                err = max(
                    float(np.max(np.abs(a - coef * b)))
                    for a, b in (
                        (mrl.user_block, bpr.user_block),
                        (mrl.positive_block, bpr.positive_block),
                        (mrl.negative_blocks, bpr.negative_blocks),
                    )
                )
                cases += 1
                worst = max(worst, err)
                if err > tol:
                    failures.append((seed, L, level, err))
    return CoefficientReport(len(seeds), cases, worst, failures)
