import re
import sys

import numpy as np
import pytest

from mixcast.model import ModelConfig, ModelParams, WindowSample


def pytest_runtest_logreport(report):
    """One visible PASS/FAIL line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    match = re.search(r"test_criterion_(\d+)", report.nodeid)
    if match:
        status = "PASS" if report.passed else "FAIL"
        sys.stderr.write(f"ACCEPTANCE CRITERION {match.group(1)}: {status}\n")


def make_window(t_enc=4, t_pred=2, seed=0, d_t=0, subject=0):
    rng = np.random.default_rng(seed)
    return WindowSample(
        window_id=f"w{seed}",
        x=rng.normal(size=t_enc),
        timefeat=rng.uniform(-0.5, 0.5, size=(t_enc, d_t)),
        timefeat_future=rng.uniform(-0.5, 0.5, size=(t_pred, d_t)),
        subject=subject,
        y=rng.normal(size=t_pred),
    )


@pytest.fixture
def tiny_config():
    return ModelConfig(d=8, heads=2, d_k=4, d_v=4, ff=16, enc_blocks=2,
                       dec_blocks=1, t_enc=4, t_pred=2, dropout_p=0.3)


@pytest.fixture
def tiny_params(tiny_config):
    return ModelParams(tiny_config, seed=11)


@pytest.fixture
def tiny_window(tiny_config):
    return make_window(tiny_config.t_enc, tiny_config.t_pred, seed=5)
