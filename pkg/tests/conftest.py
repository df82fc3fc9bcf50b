"""Shared fixtures plus the acceptance-summary hook.

Acceptance tests wrap their body in the `criterion` context manager; each
records one entry (number, name, pass/fail, notes, wall time) and the
terminal summary prints one line per entry at the end of the run, so the
verdict on every numbered criterion is visible without scrolling through
pytest output.
"""
from __future__ import annotations

import time
from contextlib import contextmanager

import numpy as np
import pytest

from jointdiff.datasets import JointDataset, encode_labels, make_gaussian_mixture
from jointdiff.oracle import OracleDenoiser
from jointdiff.schedules import Schedule

ACCEPTANCE_RESULTS: list[dict] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for e in sorted(ACCEPTANCE_RESULTS, key=lambda r: r["number"]):
        status = "PASS" if e["passed"] else "FAIL"
        notes = f" ({e['notes']})" if e["notes"] else ""
        terminalreporter.write_line(
            f"ACCEPTANCE {e['number']} {e['name']}: {status}{notes}"
            f" [{e['elapsed']:.1f}s]")


@pytest.fixture
def criterion():
    """Record one acceptance entry; re-raises so pytest still sees failures."""

    @contextmanager
    def record(number: int, name: str):
        entry = {"number": number, "name": name, "passed": False, "notes": "",
                 "elapsed": 0.0}
        start = time.perf_counter()
        try:
            yield entry
            entry["passed"] = True
        finally:
            entry["elapsed"] = time.perf_counter() - start
            ACCEPTANCE_RESULTS.append(entry)

    return record


# -- reference datasets -----------------------------------------------------------
#
# The two-atom set is the smallest dataset with a nontrivial posterior: atoms
# at +-1 in one dimension, labeled by sign. The single-atom set makes every
# posterior mean constant, which turns the samplers into exactly solvable
# linear ODEs/SDEs.


def two_atom_dataset() -> JointDataset:
    x = np.array([[-1.0], [1.0]])

    def mu(q):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        return encode_labels((q[:, :1] > 0).astype(int), 2)

    return JointDataset("two-atom", x, mu(x), K=2, P=1, mu=mu)


def single_atom_dataset(point=(0.3, -0.4)) -> JointDataset:
    x = np.array([list(point)], dtype=float)

    def mu(q):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        return encode_labels(np.zeros((len(q), 1), dtype=int), 2)

    return JointDataset("one-atom", x, mu(x), K=2, P=1, mu=mu)


@pytest.fixture(scope="session")
def schedule() -> Schedule:
    return Schedule()


@pytest.fixture(scope="session")
def two_atom() -> JointDataset:
    return two_atom_dataset()


@pytest.fixture(scope="session")
def two_atom_oracle(schedule, two_atom) -> OracleDenoiser:
    return OracleDenoiser(two_atom, schedule)


@pytest.fixture(scope="session")
def single_atom() -> JointDataset:
    return single_atom_dataset()


@pytest.fixture(scope="session")
def single_atom_oracle(schedule, single_atom) -> OracleDenoiser:
    return OracleDenoiser(single_atom, schedule)


@pytest.fixture(scope="session")
def mixture8() -> JointDataset:
    """8 components, 8 classes, well separated at scale 0.08."""
    return make_gaussian_mixture(8, 512, d_x=2, K=8, seed=5, scale=0.08)


@pytest.fixture(scope="session")
def mixture8_oracle(schedule, mixture8) -> OracleDenoiser:
    return OracleDenoiser(mixture8, schedule)
