import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from heartlora import tensor as T  # noqa: E402
from heartlora.data import SyntheticTaskSpec, generate, pretrain_spec  # noqa: E402
from heartlora.model import ModelConfig  # noqa: E402
from heartlora.training import pretrain_backbone  # noqa: E402


@pytest.fixture(autouse=True)
def _debug_checks():
    T.set_debug(True)
    yield
    T.set_debug(False)


SMALL_TASK = SyntheticTaskSpec(train_size=80, val_size=40, test_size=40, image_size=16, num_classes=4, seed=3)
SMALL_MODEL = ModelConfig(image_size=16, patch_size=4, embed_dim=32, num_heads=4, num_layers=2, mlp_ratio=2,
                          num_classes=4)


@pytest.fixture(scope="session")
def small_task():
    return SMALL_TASK, generate(SMALL_TASK)


@pytest.fixture(scope="session")
def small_backbone():
    """Briefly pretrained small backbone shared by training/CLI tests."""
    weights, _ = pretrain_backbone(SMALL_MODEL, pretrain_spec(SMALL_TASK, train_size=120), epochs=2, seed=1)
    return weights


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[name] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        outcome, detail = _ACCEPTANCE[name]
        number = int(name.split("_")[2])
        label = " ".join(name.split("_")[3:])
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number:2d} {label}: {detail}")
