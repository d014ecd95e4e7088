import numpy as np
import pytest

from mrcmv.data import SyntheticSpec, generate_synthetic, load_dataset
from mrcmv.model import ModelConfig

TINY = ModelConfig(
    d_fast=3, d_slow=4, d_vo=5, d_bgm=6, d_model=8, n_heads=2, d_k=3, d_v=4, seq_len=5, d_embed=6, n_labels=4
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Twelve synthetic videos with the default stream depths."""
    root = tmp_path_factory.mktemp("corpus")
    ds = generate_synthetic(SyntheticSpec(n_videos=12, seed=7), root)
    return ds, load_dataset(root)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
