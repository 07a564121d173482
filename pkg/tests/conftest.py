import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mrlrec.data import SyntheticSpec, generate_synthetic, split

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("MRLREC_SEED", raising=False)


@pytest.fixture(scope="session")
def small_split():
    ds, hierarchy = generate_synthetic(
        SyntheticSpec(n_users=80, n_items=90, tree_depth=2, branching=3, interactions_per_user=10, seed=1)
    )
    return split(ds, 0.8, 0.1, seed=1), hierarchy


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion lines printed by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
