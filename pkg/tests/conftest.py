from __future__ import annotations

import numpy as np
import pytest

from mtvg.features import SyntheticSpec, generate_synthetic_dataset


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = SyntheticSpec(n_videos=6, dims=(6, 5, 4), embed_dim=8,
                         min_duration_s=40, max_duration_s=60)
    bundles, anns = generate_synthetic_dataset(7, spec)
    return list(zip(bundles, anns))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
