"""Client for external evaluators speaking the line-delimited JSON protocol.

The external process reads one JSON request per line on stdin and writes
one JSON response per line on stdout. Every request carries an ``id`` the
response must echo; errors come back as ``{"id": ..., "error": {"code",
"message"}}``. Request ops: ``describe``, ``evaluate`` (per-layer sparsity
fractions plus an optional mask-file path for non-magnitude masks),
``gradients``, ``retrain``, ``activations``, ``shutdown``. Calls time out,
are retried once, and then abort the session.
"""

from __future__ import annotations

import json
import os
import subprocess
import tempfile
import threading
from pathlib import Path
from queue import Empty, Queue

import numpy as np

from .errors import CapabilityError, HandshakeError, ProtocolError
from .model_store import ModelSnapshot, write_masks
from .engine.types import EvaluationResult, TrainerCapabilities


class ExternalEvaluator:
    """Evaluator/trainer facade over an external protocol process."""

    def __init__(self, command: list[str], model: ModelSnapshot,
                 env: dict[str, str] | None = None, timeout: float = 60.0):
        self.model = model
        self.timeout = timeout
        self._next_id = 1
        full_env = dict(os.environ)
        if env:
            full_env.update(env)
        self._proc = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            stderr=subprocess.PIPE, text=True, bufsize=1, env=full_env,
        )
        self._lines: Queue = Queue()
        self._stderr_tail: list[str] = []
        self._reader = threading.Thread(target=self._read_stdout, daemon=True)
        self._reader.start()
        self._err_reader = threading.Thread(target=self._read_stderr, daemon=True)
        self._err_reader.start()
        self.capabilities = TrainerCapabilities(False, False, False)
        self.described_layers: list[dict] = []
        self.classes: list[int] = []
        self._handshake()

    # --- transport ---

    def _read_stdout(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            line = line.strip()
            if line:
                self._lines.put(line)
        self._lines.put(None)

    def _read_stderr(self) -> None:
        assert self._proc.stderr is not None
        for line in self._proc.stderr:
            self._stderr_tail.append(line.rstrip())
            del self._stderr_tail[:-20]

    def _abort(self, message: str) -> ProtocolError:
        self.close()
        tail = "; ".join(self._stderr_tail[-5:])
        return ProtocolError(f"{message}{f' (stderr: {tail})' if tail else ''}")

    def _send(self, request: dict) -> None:
        if self._proc.poll() is not None:
            raise self._abort("external evaluator exited")
        assert self._proc.stdin is not None
        try:
            self._proc.stdin.write(json.dumps(request) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise self._abort("external evaluator pipe closed") from exc

    def _receive(self, request_id: int, timeout: float) -> dict:
        import time

        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError
            try:
                line = self._lines.get(timeout=min(remaining, 0.2))
            except Empty:
                continue
            if line is None:
                raise self._abort("external evaluator closed its stdout")
            try:
                message = json.loads(line)
            except json.JSONDecodeError as exc:
                raise self._abort(f"unparseable response line: {line[:200]}") from exc
            if message.get("id") != request_id:
                continue  # stale response from a timed-out request
            return message

    def _call(self, op: str, timeout: float | None = None, **fields) -> dict:
        timeout = self.timeout if timeout is None else timeout
        last_exc: Exception | None = None
        for _attempt in range(2):  # one retry on timeout
            request_id = self._next_id
            self._next_id += 1
            self._send({"id": request_id, "op": op, **fields})
            try:
                message = self._receive(request_id, timeout)
            except TimeoutError:
                last_exc = ProtocolError(f"timeout waiting for {op!r} response")
                continue
            error = message.get("error")
            if error is not None:
                code = error.get("code", "")
                text = f"{op!r} failed: {code}: {error.get('message', '')}"
                if code == "capability":
                    raise CapabilityError(text)
                raise ProtocolError(text)
            return message
        raise self._abort(str(last_exc))

    # --- session ---

    def _handshake(self) -> None:
        try:
            reply = self._call("describe")
        except ProtocolError as exc:
            raise HandshakeError(f"describe failed: {exc}") from exc
        layers = reply.get("layers")
        caps = reply.get("capabilities")
        if not isinstance(layers, list) or not isinstance(caps, dict):
            raise HandshakeError("describe reply missing layers or capabilities")
        local = {lt.name: list(lt.shape) for lt in self.model.layers}
        remote = {entry.get("name"): list(entry.get("shape", [])) for entry in layers}
        if local != remote:
            raise HandshakeError(
                f"external model disagrees with local manifest: {remote} != {local}"
            )
        self.described_layers = layers
        self.capabilities = TrainerCapabilities.from_dict(caps)
        self.classes = [int(c) for c in reply.get("classes", [])]

    def evaluate(self, split: str = "test") -> EvaluationResult:
        """Evaluate under the model's current masks (the external side owns data)."""
        fields: dict = {"sparsities": {n: s for n, s in self.model.sparsities().items()}}
        if any(not m.from_magnitude for m in self.model.masks.values()):
            fd, path = tempfile.mkstemp(suffix=".masks", prefix="prunekit-")
            os.close(fd)
            write_masks(self.model.masks, path)
            fields["masks_uri"] = path
            try:
                reply = self._call("evaluate", **fields)
            finally:
                Path(path).unlink(missing_ok=True)
        else:
            reply = self._call("evaluate", **fields)
        return self._parse_result(reply)

    def gradient_stats(self, layer_name: str) -> np.ndarray:
        if not self.capabilities.supports_gradients:
            raise CapabilityError("external evaluator does not report gradients")
        reply = self._call("gradients", layer=layer_name)
        importance = np.asarray(reply.get("importance", []), dtype=np.float64)
        expected = self.model.layer(layer_name).parameter_count
        if importance.size != expected:
            raise ProtocolError(
                f"gradients for {layer_name!r}: got {importance.size} values, "
                f"expected {expected}"
            )
        return importance

    def train_epochs(self, epochs: int, masking: bool | None = None,
                     lr: float | None = None) -> EvaluationResult:
        if not self.capabilities.supports_retrain:
            raise CapabilityError("external evaluator does not support retraining")
        reply = self._call("retrain", epochs=int(epochs), masking=bool(masking))
        return self._parse_result(reply)

    def activation_means(self, layer_name: str, split: str = "test",
                         class_id: int | None = None) -> np.ndarray:
        if not self.capabilities.supports_activations:
            raise CapabilityError("external evaluator does not expose activations")
        fields: dict = {"layer": layer_name}
        if class_id is not None:
            fields["class_id"] = int(class_id)
        reply = self._call("activations", **fields)
        return np.asarray(reply.get("means", []), dtype=np.float64)

    def present_classes(self, split: str = "test") -> list[int]:
        return list(self.classes)

    def _parse_result(self, reply: dict) -> EvaluationResult:
        if "top1" not in reply:
            raise ProtocolError(f"evaluation reply missing top1: {reply}")
        return EvaluationResult(
            top1=float(reply["top1"]),
            top5=float(reply["top5"]) if reply.get("top5") is not None else None,
            samples=int(reply.get("samples", 0)),
        )

    def shutdown(self) -> None:
        if self._proc.poll() is None:
            try:
                self._send({"id": self._next_id, "op": "shutdown"})
                self._next_id += 1
            except ProtocolError:
                pass
        self.close()

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                if self._proc.stdin:
                    self._proc.stdin.close()
            except OSError:
                pass
            self._proc.terminate()
            try:
                self._proc.wait(timeout=3)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self) -> "ExternalEvaluator":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def external_session(command: list[str], model: ModelSnapshot,
                     env: dict[str, str] | None = None,
                     timeout: float = 60.0) -> ExternalEvaluator:
    """Spawn an external evaluator process and complete the handshake."""
    return ExternalEvaluator(command, model, env=env, timeout=timeout)
