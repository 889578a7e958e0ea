import numpy as np
import pytest

from vmtl import MCConfig, RunConfig
from vmtl.data import FeatureDataset, SyntheticSpec, generate

# filled by test_acceptance, echoed after the run regardless of output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_config(method="vmtl", **kw) -> RunConfig:
    base = dict(
        method=method,
        synthetic="default",
        iters=20,
        hidden=8,
        z_dim=4,
        mc=MCConfig(2, 2),
        dropout=0.2,
        lr=1e-3,
        batch_per_class=2,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config


@pytest.fixture
def small_dataset() -> FeatureDataset:
    spec = SyntheticSpec(T=3, C=3, d=6, samples_per_class=10, seed=3)
    return generate(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
