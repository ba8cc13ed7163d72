import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)


@pytest.fixture
def tiny_data(tmp_path_factory):
    """Small 32x32 source/target corpus for fast pipeline tests."""
    from sfda.dataset import build_domain_pair

    root = tmp_path_factory.mktemp("tiny")
    manifests = build_domain_pair(root, num_classes=4, size=32, n_train=16, n_test=8, seed=5)
    return root, manifests


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
