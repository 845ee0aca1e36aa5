"""Shared desk-scale fixtures and the acceptance summary printed at the end of a run."""

import copy
import dataclasses
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from bvsviz.classifier import DESK_TRAIN, train
from bvsviz.labels import ClassLabel
from bvsviz.model import build_model
from bvsviz.phantom import DESK, generate_dataset, split_by_pullback, trim_pullbacks

DESK_PULLBACKS = 18
TRAIN_SEEDS = (0, 1, 2)

ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@dataclasses.dataclass
class DeskSplit:
    seed: int
    train: list
    test: list


def desk_split(seed: int) -> DeskSplit:
    pullbacks = trim_pullbacks(generate_dataset(DESK, DESK_PULLBACKS, seed), DESK.depth_trim)
    train_set, test_set = split_by_pullback(pullbacks, 0.7, seed, stratify=True)
    return DeskSplit(seed, train_set, test_set)


@dataclasses.dataclass
class TrainedRun:
    split: DeskSplit
    result: object
    seconds: float

    @property
    def model(self):
        return self.result.checkpoint.model


def _fit(split: DeskSplit, config, train_set=None, select_on_test=True) -> TrainedRun:
    model = build_model(config.crop_size, config.channels_base, config.seed)
    start = time.perf_counter()
    with threadpool_limits(1):
        result = train(model, train_set if train_set is not None else split.train, config,
                       split.test if select_on_test else None)
    return TrainedRun(split, result, time.perf_counter() - start)


@pytest.fixture(scope="session")
def desk_runs() -> dict:
    """One patch-trained desk model per seed, each on its own phantom draw and split."""
    return {s: _fit(desk_split(s), dataclasses.replace(DESK_TRAIN, seed=s)) for s in TRAIN_SEEDS}


@pytest.fixture(scope="session")
def full_image_run(desk_runs) -> TrainedRun:
    """Whole-image baseline on the seed-0 split: one 4x block-downsampled slice per sample."""
    split = desk_runs[0].split
    return _fit(split, dataclasses.replace(DESK_TRAIN, seed=0, input_mode="full", downsample=4))


@pytest.fixture(scope="session")
def control_run(desk_runs) -> TrainedRun:
    """Same recipe as the seed-0 model, with training labels shuffled across slices."""
    split = desk_runs[0].split
    shuffled = copy.deepcopy(split.train)
    slices = [s for pb in shuffled for s in pb.slices]
    labels = np.random.default_rng(12345).permutation([int(s.label) for s in slices])
    for s, lab in zip(slices, labels):
        s.label = ClassLabel(int(lab))
    # no checkpoint selection on true held-out labels: the control keeps its last epoch
    return _fit(split, dataclasses.replace(DESK_TRAIN, seed=0), train_set=shuffled, select_on_test=False)
