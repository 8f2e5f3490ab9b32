from pathlib import Path

import numpy as np
import pytest

from kestenlab import ModelSpec, load_model

MODELS = Path(__file__).resolve().parent.parent / "models"

A0 = np.array([[1.0, 1.0], [1.0, 0.0]])
PHI = (1 + 5**0.5) / 2
PERRON = np.array([PHI, 1.0]) / (PHI + 1.0)


def scalar2() -> ModelSpec:
    return ModelSpec.from_arrays([0.4, 0.6], [2.0, 1 / 3], [1.0, 1.0])


def scalar1() -> ModelSpec:
    return ModelSpec.from_arrays([1 / 3, 2 / 3], [2.0, 0.5], [1.0, 1.0])


def scaled_fib(q: float = 0.5) -> ModelSpec:
    return ModelSpec.from_arrays([q, 1 - q], [A0, 0.25 * A0], [[1.0, 1.0], [1.0, 1.0]])


def lowvar2() -> ModelSpec:
    spec, _, _ = load_model(MODELS / "lowvar2.json")
    return spec


@pytest.fixture
def models_dir():
    return MODELS


def mixed2() -> ModelSpec:
    """Two non-commuting positive matrices; the angular law is spread out."""
    return ModelSpec.from_arrays(
        [0.5, 0.5], [[[1.3, 0.1], [0.4, 0.3]], [[0.3, 0.5], [0.1, 0.9]]], [[1.0, 0.0], [0.0, 1.0]]
    )


VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
