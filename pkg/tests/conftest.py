import numpy as np
import pytest
import torch

from hdn.config import HdnConfig
from hdn.model import build_model


@pytest.fixture
def tiny_config():
    return HdnConfig(n_layers=1, latent_channels=2, initial_filters=4, blocks_per_layer=1,
                     dropout_p=0.0, input_patch_size=(8, 8))


@pytest.fixture
def small_model():
    cfg = HdnConfig(n_layers=3, latent_channels=2, initial_filters=8, blocks_per_layer=1,
                    dropout_p=0.0, input_patch_size=(16, 16))
    model = build_model(cfg, seed=1)
    model.eval()
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    torch.set_num_threads(1)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
