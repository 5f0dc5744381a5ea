import numpy as np
import pytest

from pivotseg import autograd as ag
from pivotseg.data import SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from pivotseg.model import PivotConfig

GRAD_TOL = 1e-4


def tiny_config(**kw) -> PivotConfig:
    base = dict(d=8, heads=2, B=2, layers_per_stage=1, dropout=0.0, semantic_dim=8, n_mels=4,
                n_speakers=4, max_conv_width=5, seed=0)
    base.update(kw)
    return PivotConfig(**base)


def param(rng, *shape, name="x"):
    return ag.Param(rng.normal(size=shape), name=name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Twelve short synthetic records on disk, with low-dimensional views."""
    out = tmp_path_factory.mktemp("data")
    syn = SyntheticConfig(n_records=12, scale=0.1, seed=3, semantic_dim=16, n_mels=8,
                          latent_dim=4, n_speakers=4)
    save_dataset(generate_synthetic(syn), out, split_seed=3, fractions=(0.5, 0.25, 0.25))
    groups, info = load_dataset(out)
    return out, groups, info


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
