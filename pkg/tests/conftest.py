"""Shared fixtures: the default synthetic world with a trained ranker and duration branches."""

from dataclasses import dataclass

import numpy as np
import pytest

from mbdlab.mbd import DURATION_DEBIAS, BranchConfig, MbdBranch, build_branch, train_branch
from mbdlab.ranker import RankerModel, build_ranker, train
from mbdlab.synthenv import Dataset, GeneratorConfig, World, generate_world


@dataclass
class DefaultWorld:
    config: GeneratorConfig
    world: World
    train: Dataset
    test: Dataset
    ranker: RankerModel
    branches: dict[str, MbdBranch]

    def signal(self, task: str) -> tuple[np.ndarray, np.ndarray]:
        """(p, observed mask) on the held-out split, p in the branch's space."""
        branch = self.branches[task]
        keep = self.ranker.task(task).observed(self.test.columns, self.test.X)
        return branch.signal_from_prediction(self.ranker.predict(self.test.X)), keep


@pytest.fixture(scope="session")
def default_world() -> DefaultWorld:
    cfg = GeneratorConfig()
    world = generate_world(cfg)
    train_set, test_set = world.data.split(0.2, 0)
    ranker = build_ranker(train_set)
    train(ranker, train_set)
    branches = {}
    for task in ("watch_time", "like", "loop"):
        branch = build_branch(BranchConfig(task, DURATION_DEBIAS, quantiles=(0.1, 0.5, 0.9)), ranker)
        train_branch(branch, ranker, train_set)
        branches[task] = branch
    return DefaultWorld(cfg, world, train_set, test_set, ranker, branches)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def record():
    """Log one PASS/FAIL line for an acceptance criterion, then assert it."""

    def _record(criterion: int, ok: bool, detail: str) -> None:
        line = f"criterion {criterion:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
