from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from famh.model import ModelConfig  # noqa: E402

TINY = ModelConfig(n_blocks=2, embed_dim=8, n_heads=2, patch_len=32, n_classes=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    import report

    if report.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(report.LINES):
            terminalreporter.write_line(report.LINES[n])
