import sys
from pathlib import Path

import numpy as np
import pytest

from prunekit.errors import CapabilityError, HandshakeError, ProtocolError
from prunekit.external import external_session
from prunekit.model_store import PruneMask

HELPER = Path(__file__).parent / "helpers" / "mock_server.py"


def server_cmd(model_dir, *flags):
    return [sys.executable, str(HELPER), "--manifest", str(model_dir / "manifest.json"),
            *flags]


@pytest.fixture
def tiny_model_dir(tiny_fixture_dir):
    return tiny_fixture_dir / "model"


def test_evaluate_transport_fidelity(tiny_fixture, tiny_model_dir):
    model, _, _ = tiny_fixture
    with external_session(server_cmd(tiny_model_dir, "--top1", "73.5"), model) as session:
        result = session.evaluate()
        assert result.top1 == 73.5
        assert result.samples == 100
        assert session.capabilities.supports_retrain


def test_describe_shape_mismatch(tiny_fixture, tiny_model_dir):
    model, _, _ = tiny_fixture
    with pytest.raises(HandshakeError):
        external_session(server_cmd(tiny_model_dir, "--wrong-shapes"), model)


def test_garbage_describe(tiny_fixture, tiny_model_dir):
    model, _, _ = tiny_fixture
    with pytest.raises((HandshakeError, ProtocolError)):
        external_session(server_cmd(tiny_model_dir, "--garbage-describe"), model,
                         timeout=2.0)


def test_capability_guard_no_send(tiny_fixture, tiny_model_dir):
    model, _, _ = tiny_fixture
    with external_session(server_cmd(tiny_model_dir, "--no-gradients"), model) as session:
        with pytest.raises(CapabilityError):
            session.gradient_stats("fc1")


def test_gradients_round_trip(tiny_fixture, tiny_model_dir):
    model, _, _ = tiny_fixture
    with external_session(server_cmd(tiny_model_dir), model) as session:
        importance = session.gradient_stats("fc1")
        assert importance.shape == (model.layer("fc1").parameter_count,)
        assert np.all(importance == 0.5)


def test_retrain_and_activations(tiny_fixture, tiny_model_dir):
    model, _, _ = tiny_fixture
    with external_session(server_cmd(tiny_model_dir, "--top1", "90.0"), model) as session:
        retrained = session.train_epochs(2, masking=True)
        assert retrained.top1 == 90.5
        means = session.activation_means("conv1")
        assert means.shape == (model.layer("conv1").shape[0],)
        by_class = session.activation_means("conv1", class_id=1)
        assert by_class[0] == 2.0
        assert session.present_classes() == [0, 1, 2]


def test_timeout_one_retry_succeeds(tiny_fixture, tiny_model_dir):
    model, _, _ = tiny_fixture
    with external_session(server_cmd(tiny_model_dir, "--swallow-first-evaluate"),
                          model, timeout=1.0) as session:
        result = session.evaluate()  # first send times out, retry answers
        assert result.top1 == 73.5


def test_timeout_twice_aborts(tiny_fixture, tiny_model_dir):
    model, _, _ = tiny_fixture
    session = external_session(server_cmd(tiny_model_dir, "--swallow-all-evaluate"),
                               model, timeout=0.5)
    with pytest.raises(ProtocolError):
        session.evaluate()


def test_error_response_mapping(tiny_fixture, tiny_model_dir):
    model, _, _ = tiny_fixture
    with external_session(
        server_cmd(tiny_model_dir, "--error-op", "retrain", "capability"), model
    ) as session:
        with pytest.raises(CapabilityError):
            session.train_epochs(1, masking=False)
    with external_session(
        server_cmd(tiny_model_dir, "--error-op", "evaluate", "internal"), model
    ) as session:
        with pytest.raises(ProtocolError):
            session.evaluate()


def test_masks_uri_sent_for_structural_masks(tiny_fixture, tiny_model_dir):
    model, _, _ = tiny_fixture
    kept = model.masks["conv1"].kept.copy()
    kept[:9] = False
    model.masks["conv1"] = PruneMask("conv1", kept, from_magnitude=False)
    with external_session(server_cmd(tiny_model_dir), model) as session:
        assert session.evaluate().top1 == 73.5  # mock verified masks file existed
        raw = session._call("evaluate",
                            sparsities={n: 0.0 for n in model.layer_names()},
                            masks_uri=None)
        assert raw["top1"] == 73.5


def test_stale_response_discarded_after_timeout(tiny_fixture, tiny_model_dir):
    # the first reply lands after the client's timeout; the retry must skip
    # the stale id and pair with its own response
    model, _, _ = tiny_fixture
    with external_session(
        server_cmd(tiny_model_dir, "--delay-first-evaluate", "1.0"),
        model, timeout=0.8,
    ) as session:
        result = session.evaluate()
        assert result.top1 == 73.5
        again = session.evaluate()  # session still healthy afterwards
        assert again.top1 == 73.5
