import numpy as np
import pytest
import torch

from sonate.mmdit import ModelConfig, init_params

CRITERIA = {}


def record_criterion(number, title, passed, detail=""):
    CRITERIA[number] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title}  {detail}")


@pytest.fixture
def toy_cfg():
    # d=8, 2 heads, one joint + one single layer
    return ModelConfig(d_text=8, d_audio=8, n_heads=2, head_dim=4, n_joint=1, n_single=1,
                       ff_dim=16, time_freqs=4)


def randomised(params, seed=0, scale=0.3):
    """Copy of ``params`` with every tensor redrawn, so no gradient path is trivially zero."""
    g = torch.Generator().manual_seed(seed)
    return {k: scale * torch.randn(v.shape, generator=g, dtype=v.dtype) + (1.0 if "norm_" in k else 0.0)
            for k, v in params.items()}


@pytest.fixture
def toy_params(toy_cfg):
    return randomised(init_params(toy_cfg, 0))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
