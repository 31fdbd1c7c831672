import re

import numpy as np
import pytest

from dit_lab import data, numkit, trainer

_ACCEPTANCE = {}
_CRITERION = re.compile(r"test_criterion_(\d+)_")


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[int(m.group(1))] = (report.outcome, detail, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        outcome, detail, dur = _ACCEPTANCE[k]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {k:2d}: {status}  ({dur:.1f}s)  {detail}")


@pytest.fixture
def small_lr():
    """Tiny logistic-regression run: 12 samples, 4 features, 30 steps of batch 3."""
    ds = data.make_synthetic(3, 12, 4, 2.0)
    model = numkit.ModelSpec("logistic", 4)
    cfg = trainer.TrainConfig(steps=30, batch_size=3, lr=0.2, seed=5)
    store = trainer.train(ds, model, cfg)
    return ds, model, cfg, store


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
