"""Sequential network execution over an arch-graph op list.

The op list references weight tensors by layer name; masks are applied on
the fly (effective weight = value * mask bit), so the same graph serves
pristine evaluation, masked evaluation, and training with working weights.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractViolationError
from . import ops

SUPPORTED_OPS = ("conv2d", "dense", "relu", "maxpool2", "flatten")


class Network:
    def __init__(self, arch_graph: list[dict], weights: dict[str, np.ndarray],
                 biases: dict[str, np.ndarray | None],
                 masks: dict[str, np.ndarray] | None = None):
        for op in arch_graph:
            if op.get("op") not in SUPPORTED_OPS:
                raise ContractViolationError(f"unsupported op {op.get('op')!r} in arch graph")
            if op["op"] in ("conv2d", "dense") and op.get("layer") not in weights:
                raise ContractViolationError(f"arch graph references unknown layer {op.get('layer')!r}")
        self.arch_graph = arch_graph
        self.weights = weights
        self.biases = biases
        self.masks = masks or {}

    def _effective(self, name: str) -> np.ndarray:
        w = self.weights[name]
        kept = self.masks.get(name)
        if kept is None:
            return w
        out = w.reshape(-1).copy()
        out[~kept] = 0.0
        return out.reshape(w.shape)

    def _effective_bias(self, name: str) -> np.ndarray | None:
        """Bias with fully-masked output channels silenced (the filter is gone)."""
        b = self.biases.get(name)
        kept = self.masks.get(name)
        if b is None or kept is None:
            return b
        w = self.weights[name]
        alive = kept.reshape(w.shape[0], -1).any(axis=1)
        if alive.all():
            return b
        out = b.copy()
        out[~alive] = 0.0
        return out

    def forward(self, x: np.ndarray, capture: bool = False):
        """Run the graph; optionally capture per-layer post-activation outputs.

        A layer's captured activation is the output of the relu immediately
        following it when there is one, else the raw layer output.
        """
        captures: dict[str, np.ndarray] = {}
        tape = []
        pending: str | None = None
        for op in self.arch_graph:
            kind = op["op"]
            if kind == "conv2d":
                name = op["layer"]
                w = self._effective(name)
                y, cache = ops.conv2d_forward(x, w, self._effective_bias(name),
                                              int(op.get("stride", 1)), int(op.get("padding", 0)))
                tape.append((kind, name, w, cache))
                if capture:
                    captures[name] = y
                    pending = name
            elif kind == "dense":
                name = op["layer"]
                w = self._effective(name)
                y, cache = ops.dense_forward(x, w, self._effective_bias(name))
                tape.append((kind, name, w, cache))
                if capture:
                    captures[name] = y
                    pending = name
            elif kind == "relu":
                y, cache = ops.relu_forward(x)
                tape.append((kind, None, None, cache))
                if capture and pending is not None:
                    captures[pending] = y
                    pending = None
            elif kind == "maxpool2":
                y, cache = ops.maxpool2_forward(x)
                tape.append((kind, None, None, cache))
                pending = None
            else:  # flatten
                y, cache = ops.flatten_forward(x)
                tape.append((kind, None, None, cache))
                pending = None
            x = y
        return (x, tape, captures) if capture else (x, tape, None)

    def backward(self, dlogits: np.ndarray, tape) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Backpropagate to every weight tensor; returns name -> (dw, db)."""
        grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        dy = dlogits
        for kind, name, w, cache in reversed(tape):
            if kind == "conv2d":
                dy, dw, db = ops.conv2d_backward(dy, w, cache)
                grads[name] = (dw, db)
            elif kind == "dense":
                dy, dw, db = ops.dense_backward(dy, w, cache)
                grads[name] = (dw, db)
            elif kind == "relu":
                dy = ops.relu_backward(dy, cache)
            elif kind == "maxpool2":
                dy = ops.maxpool2_backward(dy, cache)
            else:
                dy = ops.flatten_backward(dy, cache)
        return grads

    def logits(self, x: np.ndarray) -> np.ndarray:
        out, _, _ = self.forward(x)
        return out
