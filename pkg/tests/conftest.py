import numpy as np
import pytest
import torch

from tres_iqa.backbone import BackboneConfig
from tres_iqa.data import SyntheticSpec, synth_generate
from tres_iqa.encoder import EncoderConfig
from tres_iqa.model import ModelConfig


def tiny_config(seed=0, use_transformer=True, use_pe=True, pool_kernel=3):
    return ModelConfig(
        backbone=BackboneConfig(channels=(4, 4, 8, 8), units_per_block=1, pool_kernel=pool_kernel, seed=seed),
        encoder=EncoderConfig(n_layers=1, width=8, heads=2, use_pe=use_pe),
        head_hidden=8,
        use_transformer=use_transformer,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """5 references x 2 families x 3 levels of 32x32 images."""
    out = tmp_path_factory.mktemp("synth_small")
    spec = SyntheticSpec(n_refs=5, image_size=(32, 32), families=("gaussian_blur", "white_noise"), levels=3, seed=7)
    return synth_generate(spec, out), out


# --- acceptance report ----------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, name: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {name}: {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
