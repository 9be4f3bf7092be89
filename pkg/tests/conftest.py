"""Shared fixtures: desk-scale trained models built once per session."""

from __future__ import annotations

import numpy as np
import pytest

from prunekit.engine import BuiltinEvaluator
from prunekit.fixtures import FixtureSpec, load_fixture, make_fixture

TINY_SPEC = FixtureSpec(classes=5, image_size=12, samples=1200, seed=3, arch="tiny3",
                        epochs=40, learning_rate=0.1)
DESK_SPEC = FixtureSpec(classes=10, image_size=16, samples=2400, seed=7, arch="desk4",
                        epochs=15, learning_rate=0.08)


@pytest.fixture(scope="session")
def tiny_fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture-tiny")
    make_fixture(TINY_SPEC, out)
    return out


@pytest.fixture(scope="session")
def desk_fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture-desk")
    make_fixture(DESK_SPEC, out)
    return out


@pytest.fixture
def tiny_fixture(tiny_fixture_dir):
    """Fresh snapshot per test so mask mutations never leak."""
    return load_fixture(tiny_fixture_dir)


@pytest.fixture
def desk_fixture(desk_fixture_dir):
    return load_fixture(desk_fixture_dir)


@pytest.fixture
def tiny_evaluator(tiny_fixture):
    model, data, meta = tiny_fixture
    return model, data, meta, BuiltinEvaluator(model, data)


def random_layer_weights(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.normal(0.0, 1.0, n).astype(np.float32)
