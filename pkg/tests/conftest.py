"""Shared fixtures and the acceptance tally.

The acceptance tests in test_acceptance.py each carry a criterion tag in
their name; a terminal-summary hook prints one PASS/FAIL line per criterion
at the end of the run so the gate is readable straight off the log.
"""

from __future__ import annotations

import re
from types import SimpleNamespace

import pytest

from p3s.backbone import build_backbone
from p3s.backbone.toy import ToyBackboneConfig
from p3s.synthetic import make_two_blob_scene
from p3s.training import TrainConfig, TrainState, prepare_training_set, save_checkpoint, train_step


@pytest.fixture(scope="session")
def toy8():
    """Small toy backbone shared by read-only tests."""
    return build_backbone("toy", ToyBackboneConfig(grid_size=8))


@pytest.fixture(scope="session")
def scene0():
    return make_two_blob_scene(seed=0)


@pytest.fixture(scope="session")
def trained(toy8, scene0, tmp_path_factory):
    """One scene trained for 200 steps, with its checkpoint on disk.

    Expensive enough to share: the training, sampling, and service tests all
    reuse this state read-only.
    """
    samples = prepare_training_set([scene0.image], [scene0.annotation],
                                   "sks", "subject", toy8)
    config = TrainConfig(learning_rate=1e-2, epochs=5, seed=0)
    state = TrainState(config, toy8, samples)
    ldms = [train_step(state).l_ldm for _ in range(200)]
    path = tmp_path_factory.mktemp("trained") / "trained.pt"
    checkpoint = save_checkpoint(state, path)
    return SimpleNamespace(state=state, ldms=ldms, checkpoint=checkpoint,
                           samples=samples, config=config)


_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_results: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    num, label = int(m.group(1)), m.group(2)
    if report.when == "call":
        _results[num] = (label, "PASS" if report.passed else "FAIL")
    elif report.when == "setup" and report.failed:
        _results[num] = (label, "FAIL")
    elif report.when == "setup" and report.skipped:
        _results[num] = (label, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(_results):
        label, outcome = _results[num]
        terminalreporter.write_line(
            f"ACCEPTANCE {num} {label.replace('_', '-')}: {outcome}")
