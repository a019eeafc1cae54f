"""Shared trained models for the acceptance suite.

Training happens once per session and only when an acceptance test asks for
it, so the unit tests stay fast when run on their own.
"""

import time

import pytest

from headprune.data import generate_task
from headprune.training import TrainConfig, default_lambdas, lambda_sweep, model_for, train

# desk-scale model for the trained-model experiments (one CPU core)
DESK = {"d_model": 32, "d_ff": 64}

_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture(scope="session")
def criterion():
    """Record one line per acceptance criterion for the terminal summary."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        _RESULTS.append((name, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


class Setup:
    def __init__(self, corpus, heldout, model, seconds):
        self.corpus = corpus
        self.heldout = heldout
        self.model = model
        self.seconds = seconds


def _setup(kind, steps, scale):
    corpus = generate_task(kind, 4000, seed=0)
    heldout = generate_task(kind, 300, seed=1)
    heldout.ranks = dict(corpus.ranks)
    model = model_for(corpus, seed=0, **DESK)
    t = time.time()
    train(model, corpus, TrainConfig(max_steps=steps, batch_tokens=512, scale=scale))
    return Setup(corpus, heldout, model, time.time() - t)


@pytest.fixture(scope="session")
def copy_setup():
    return _setup("copy", 1500, 0.5)


@pytest.fixture(scope="session")
def dep_setup():
    # clause-reversed grammar task; a smaller step size trains it far better at this width
    return _setup("dep-grammar", 8000, 0.15)


def _sweep(setup, scale):
    cfg = TrainConfig(max_steps=600, batch_tokens=512, scale=scale, freeze_decoder=True)
    t = time.time()
    report = lambda_sweep(setup.model, setup.corpus, default_lambdas(), cfg, setup.heldout)
    return report, time.time() - t


@pytest.fixture(scope="session")
def copy_sweep(copy_setup):
    return _sweep(copy_setup, 0.5)


@pytest.fixture(scope="session")
def dep_sweep(dep_setup):
    return _sweep(dep_setup, 0.15)
