"""Built-in desk-scale evaluator and trainer over the numpy engine.

The evaluator runs masked forward passes on the pristine snapshot weights.
The trainer keeps its own working copy of weights and masks so retraining
schedules can update coefficients without touching the loaded snapshot;
with gradient masking on, pruned positions receive zero updates and rank
as zero magnitude, so the pruned pool only grows as sparsity rises.
"""

from __future__ import annotations

import numpy as np

from ..errors import CapabilityError, ContractViolationError, DivergenceError
from ..model_store import (
    ModelSnapshot,
    PruneMask,
    magnitude_kept,
    sparsity_to_count,
)
from ..pruning_ops import gradient_informed_kept
from ..retrain import apply_gradient_mask
from .data import DataBundle, Dataset
from .network import Network
from .ops import softmax_cross_entropy
from .types import EvaluationResult, TrainerCapabilities

BUILTIN_CAPABILITIES = TrainerCapabilities(
    supports_gradients=True, supports_retrain=True, supports_activations=True
)


def _topk(logits: np.ndarray, labels: np.ndarray, num_classes: int):
    """Counts of top-1 and top-5 hits; argmax ties go to the lowest class index."""
    top1 = int((np.argmax(logits, axis=1) == labels).sum())
    top5 = None
    if num_classes >= 6:
        order = np.argsort(-logits, axis=1, kind="stable")[:, :5]
        top5 = int((order == labels[:, None]).any(axis=1).sum())
    return top1, top5


def _evaluate_network(net: Network, dataset: Dataset, batch_size: int) -> EvaluationResult:
    n = len(dataset)
    hits1 = 0
    hits5 = 0
    for start in range(0, n, batch_size):
        xb = dataset.inputs[start : start + batch_size]
        yb = dataset.labels[start : start + batch_size]
        logits = net.logits(xb)
        t1, t5 = _topk(logits, yb, dataset.num_classes)
        hits1 += t1
        if t5 is not None:
            hits5 += t5
    top1 = 100.0 * hits1 / n
    top5 = 100.0 * hits5 / n if dataset.num_classes >= 6 else None
    return EvaluationResult(top1=top1, top5=top5, samples=n)


def _activation_means(net: Network, dataset: Dataset, layer_name: str,
                      batch_size: int, class_id: int | None) -> np.ndarray:
    """Mean |post-activation| per output channel, float64 accumulation in index order."""
    total: np.ndarray | None = None
    positions = 0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.inputs[start : start + batch_size]
        yb = dataset.labels[start : start + batch_size]
        if class_id is not None:
            pick = yb == class_id
            if not pick.any():
                continue
            xb = xb[pick]
        _, _, captures = net.forward(xb, capture=True)
        act = np.abs(captures[layer_name].astype(np.float64))
        if act.ndim == 4:
            total = act.sum(axis=(0, 2, 3)) if total is None else total + act.sum(axis=(0, 2, 3))
            positions += act.shape[0] * act.shape[2] * act.shape[3]
        else:
            total = act.sum(axis=0) if total is None else total + act.sum(axis=0)
            positions += act.shape[0]
    if total is None or positions == 0:
        raise ContractViolationError(f"no samples for class {class_id!r}")
    return total / positions


class BuiltinEvaluator:
    """Deterministic accuracy/activation oracle over the snapshot's pristine weights."""

    def __init__(self, model: ModelSnapshot, data: DataBundle, batch_size: int = 512):
        self.model = model
        self.data = data
        self.batch_size = batch_size
        self.capabilities = BUILTIN_CAPABILITIES

    def _dataset(self, split: str) -> Dataset:
        if split == "train":
            return self.data.train
        if split == "test":
            return self.data.test
        if split == "validation":
            return self.data.validation_split()
        raise ContractViolationError(f"unknown split {split!r}")

    def _network(self) -> Network:
        return Network(
            self.model.arch_graph,
            {lt.name: lt.pristine_weights for lt in self.model.layers},
            {lt.name: lt.pristine_bias for lt in self.model.layers},
            {name: m.kept for name, m in self.model.masks.items()},
        )

    def evaluate(self, split: str = "test") -> EvaluationResult:
        return _evaluate_network(self._network(), self._dataset(split), self.batch_size)

    def activation_means(self, layer_name: str, split: str = "test",
                         class_id: int | None = None) -> np.ndarray:
        self.model.layer(layer_name)  # raises on unknown layer
        return _activation_means(self._network(), self._dataset(split), layer_name,
                                 self.batch_size, class_id)

    def present_classes(self, split: str = "test") -> list[int]:
        return sorted(int(c) for c in np.unique(self._dataset(split).labels))


class BuiltinTrainer:
    """SGD trainer with working weights, gradient masking, and gradient statistics."""

    def __init__(self, model: ModelSnapshot, data: DataBundle, lr: float = 0.05,
                 batch_size: int = 32, seed: int = 0, val_fraction: float = 0.2,
                 masking: bool = True):
        self.model = model
        self.data = data
        self.lr = lr
        self.batch_size = batch_size
        self.masking = masking
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E41]))
        self.weights = {lt.name: lt.pristine_weights.copy() for lt in model.layers}
        self.biases = {
            lt.name: (lt.pristine_bias.copy() if lt.pristine_bias is not None else None)
            for lt in model.layers
        }
        self.masks: dict[str, PruneMask] = model.copy_masks()
        self._val = data.validation_split(val_fraction)
        self._grad_sum: dict[str, np.ndarray] = {}
        self._grad_updates = 0
        self.loss_curve: list[float] = []
        self.capabilities = BUILTIN_CAPABILITIES
        self.eval_batch = 512

    # --- evaluation ---

    def _dataset(self, split: str) -> Dataset:
        if split == "train":
            return self.data.train
        if split == "test":
            return self.data.test
        if split == "validation":
            return self._val
        raise ContractViolationError(f"unknown split {split!r}")

    def network(self) -> Network:
        return Network(
            self.model.arch_graph,
            self.weights,
            self.biases,
            {name: m.kept for name, m in self.masks.items()},
        )

    def evaluate(self, split: str = "test") -> EvaluationResult:
        return _evaluate_network(self.network(), self._dataset(split), self.eval_batch)

    def validate(self) -> EvaluationResult:
        return self.evaluate("validation")

    def activation_means(self, layer_name: str, split: str = "test",
                         class_id: int | None = None) -> np.ndarray:
        self.model.layer(layer_name)
        return _activation_means(self.network(), self._dataset(split), layer_name,
                                 self.eval_batch, class_id)

    def present_classes(self, split: str = "test") -> list[int]:
        return sorted(int(c) for c in np.unique(self._dataset(split).labels))

    # --- training ---

    def train_epochs(self, epochs: int, masking: bool | None = None,
                     lr: float | None = None) -> EvaluationResult:
        """SGD over the train split; returns the post-training test evaluation."""
        masking = self.masking if masking is None else masking
        lr = self.lr if lr is None else lr
        train = self.data.train
        if epochs > 0:
            self._grad_sum = {
                name: np.zeros(w.size, dtype=np.float64) for name, w in self.weights.items()
            }
            self._grad_updates = 0
        for _ in range(epochs):
            order = self.rng.permutation(len(train))
            losses = []
            for start in range(0, len(train), self.batch_size):
                idx = order[start : start + self.batch_size]
                xb = train.inputs[idx]
                yb = train.labels[idx]
                net = self.network()
                logits, tape, _ = net.forward(xb)
                loss, dlogits = softmax_cross_entropy(logits, yb)
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite training loss {loss}")
                grads = net.backward(dlogits, tape)
                for name, (dw, db) in grads.items():
                    flat = dw.reshape(-1)
                    if masking:
                        flat = apply_gradient_mask(flat, self.masks[name].kept)
                    self._grad_sum[name] += np.abs(flat.astype(np.float64))
                    self.weights[name].reshape(-1)[...] -= lr * flat
                    if self.biases[name] is not None:
                        self.biases[name] -= lr * db
                losses.append(loss)
                self._grad_updates += 1
            self.loss_curve.append(float(np.mean(losses)))
        return self.evaluate("test")

    def gradient_stats(self, layer_name: str) -> np.ndarray:
        """Mean |applied gradient| per weight over the latest training interval."""
        self.model.layer(layer_name)
        if not self._grad_sum or self._grad_updates == 0:
            return np.zeros(self.model.layer(layer_name).parameter_count, dtype=np.float64)
        return self._grad_sum[layer_name] / self._grad_updates

    # --- mask manipulation over working weights ---

    def rank_values(self, layer_name: str) -> np.ndarray:
        """Weights used for magnitude ranking; masked runs rank pruned slots as zero."""
        flat = self.weights[layer_name].reshape(-1)
        if self.masking:
            flat = flat.copy()
            flat[~self.masks[layer_name].kept] = 0.0
        return flat

    def set_pruned_count(self, layer_name: str, count: int,
                         importance: np.ndarray | None = None, alpha: float = 1.0) -> float:
        values = self.rank_values(layer_name)
        if importance is None:
            kept = magnitude_kept(values, count)
            from_magnitude = True
        else:
            kept = gradient_informed_kept(values, importance, count, alpha)
            from_magnitude = alpha == 1.0
        self.masks[layer_name] = PruneMask(layer_name, kept, from_magnitude=from_magnitude)
        return count / values.size

    def set_sparsity(self, layer_name: str, sparsity: float,
                     importance: np.ndarray | None = None, alpha: float = 1.0) -> float:
        n = self.model.layer(layer_name).parameter_count
        return self.set_pruned_count(layer_name, sparsity_to_count(sparsity, n),
                                     importance, alpha)

    def prune_step(self, layer_name: str, step: float,
                   importance: np.ndarray | None = None, alpha: float = 1.0) -> float:
        n = self.model.layer(layer_name).parameter_count
        delta = sparsity_to_count(min(float(step), 1.0), n)
        count = min(n, self.masks[layer_name].pruned_count + delta)
        return self.set_pruned_count(layer_name, count, importance, alpha)

    def reverse_step(self, layer_name: str, step: float,
                     importance: np.ndarray | None = None, alpha: float = 1.0) -> float:
        n = self.model.layer(layer_name).parameter_count
        delta = sparsity_to_count(min(float(step), 1.0), n)
        count = max(0, self.masks[layer_name].pruned_count - delta)
        return self.set_pruned_count(layer_name, count, importance, alpha)

    def layer_sparsity(self, layer_name: str) -> float:
        return self.masks[layer_name].sparsity

    def pruned_count(self, layer_name: str) -> int:
        return self.masks[layer_name].pruned_count

    def mask_support(self, layer_name: str) -> np.ndarray:
        return self.masks[layer_name].kept.copy()

    def weighted_sparsity(self) -> float:
        total = sum(lt.parameter_count for lt in self.model.layers)
        pruned = sum(self.masks[lt.name].pruned_count for lt in self.model.layers)
        return pruned / total

    def sparsities(self) -> dict[str, float]:
        return {lt.name: self.masks[lt.name].sparsity for lt in self.model.layers}

    # --- state save/restore (structural revert, boosted reversal) ---

    def snapshot_state(self) -> dict:
        return {
            "weights": {n: w.copy() for n, w in self.weights.items()},
            "biases": {n: (b.copy() if b is not None else None) for n, b in self.biases.items()},
            "masks": {n: m.copy() for n, m in self.masks.items()},
        }

    def restore_state(self, state: dict) -> None:
        self.weights = {n: w.copy() for n, w in state["weights"].items()}
        self.biases = {n: (b.copy() if b is not None else None)
                       for n, b in state["biases"].items()}
        self.masks = {n: m.copy() for n, m in state["masks"].items()}

    # --- checkpoint serialization (lossless, JSON-safe) ---

    def state_dict(self) -> dict:
        from ..checkpoint import encode_array, encode_rng_state

        return {
            "weights": {n: encode_array(w) for n, w in self.weights.items()},
            "biases": {n: (encode_array(b) if b is not None else None)
                       for n, b in self.biases.items()},
            "masks": {n: {"kept": encode_array(m.kept.astype(np.uint8)),
                          "from_magnitude": m.from_magnitude}
                      for n, m in self.masks.items()},
            "rng_state": encode_rng_state(self.rng.bit_generator.state),
            "grad_sum": {n: encode_array(g) for n, g in self._grad_sum.items()},
            "grad_updates": self._grad_updates,
            "loss_curve": list(self.loss_curve),
            "masking": self.masking,
        }

    def load_state_dict(self, state: dict) -> None:
        from ..checkpoint import decode_array, decode_rng_state

        self.weights = {n: decode_array(d).astype(np.float32)
                        for n, d in state["weights"].items()}
        self.biases = {n: (decode_array(d).astype(np.float32) if d is not None else None)
                       for n, d in state["biases"].items()}
        self.masks = {
            n: PruneMask(n, decode_array(d["kept"]).astype(bool), d["from_magnitude"])
            for n, d in state["masks"].items()
        }
        self.rng.bit_generator.state = decode_rng_state(state["rng_state"])
        self._grad_sum = {n: decode_array(d) for n, d in state["grad_sum"].items()}
        self._grad_updates = int(state["grad_updates"])
        self.loss_curve = list(state["loss_curve"])
        self.masking = bool(state["masking"])


def require_capability(capabilities: TrainerCapabilities, name: str) -> None:
    if not getattr(capabilities, name):
        raise CapabilityError(f"evaluator does not declare {name}")


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------

def gradient_check(net: Network, x: np.ndarray, labels: np.ndarray | None = None,
                   h: float = 1e-3) -> float:
    """Max relative error of analytic gradients vs central finite differences.

    Run with float64 weights and inputs so the whole pipeline executes at
    64-bit. With ``labels`` the scalar is the cross-entropy loss; without,
    the plain sum of the outputs (exactly linear nets then check exactly).
    """

    def scalar():
        logits, tape, _ = net.forward(x)
        if labels is None:
            return float(logits.sum()), tape, np.ones_like(logits)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        return loss, tape, dlogits

    _, tape, dlogits = scalar()
    analytic = net.backward(dlogits, tape)

    worst = 0.0
    max_mag = 0.0
    for name, w in net.weights.items():
        flat = w.reshape(-1)
        dw = analytic[name][0].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = scalar()[0]
            flat[i] = orig - h
            down = scalar()[0]
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            diff = abs(float(dw[i]) - numeric)
            worst = max(worst, diff)
            max_mag = max(max_mag, abs(float(dw[i])), abs(numeric))
    return worst / max(max_mag, 1e-8)


def random_small_network(seed: int, with_conv: bool = True):
    """Small float64 random net plus an input, margin-checked for kink safety.

    Relu preactivations and max-pool runner-up gaps are kept away from zero
    so central differences with h=1e-3 never cross a kink; seeds that fail
    the margin are skipped deterministically.
    """
    attempt = seed
    while True:
        rng = np.random.default_rng(np.random.SeedSequence([attempt, 0x6AD]))
        if with_conv:
            arch = [
                {"op": "conv2d", "layer": "c1", "stride": 1, "padding": 1},
                {"op": "relu"},
                {"op": "maxpool2"},
                {"op": "flatten"},
                {"op": "dense", "layer": "d1"},
            ]
            weights = {
                "c1": rng.normal(0, 0.6, (3, 2, 3, 3)),
                "d1": rng.normal(0, 0.4, (4, 3 * 3 * 3)),
            }
            biases = {"c1": rng.normal(0, 0.3, 3), "d1": rng.normal(0, 0.3, 4)}
            x = rng.normal(0, 1.0, (2, 2, 6, 6))
        else:
            arch = [{"op": "dense", "layer": "d1"}]
            weights = {"d1": rng.normal(0, 0.5, (3, 8))}
            biases = {"d1": rng.normal(0, 0.3, 3)}
            x = rng.normal(0, 1.0, (2, 8))
        net = Network(arch, weights, biases)
        if _margins_ok(net, x):
            return net, x
        attempt += 1009


def _margins_ok(net: Network, x: np.ndarray, margin: float = 0.05) -> bool:
    out = x
    for op in net.arch_graph:
        kind = op["op"]
        if kind == "conv2d":
            from .ops import conv2d_forward

            out, _ = conv2d_forward(out, net.weights[op["layer"]], net.biases.get(op["layer"]),
                                    int(op.get("stride", 1)), int(op.get("padding", 0)))
        elif kind == "dense":
            from .ops import dense_forward

            out, _ = dense_forward(out, net.weights[op["layer"]], net.biases.get(op["layer"]))
        elif kind == "relu":
            if np.abs(out).min() < margin:
                return False
            out = np.maximum(out, 0)
        elif kind == "maxpool2":
            b, c, hh, ww = out.shape
            win = (out.reshape(b, c, hh // 2, 2, ww // 2, 2)
                   .transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hh // 2, ww // 2, 4))
            top2 = np.sort(win, axis=-1)[..., -2:]
            if (top2[..., 1] - top2[..., 0]).min() < margin:
                return False
            out = win.max(axis=-1)
        else:
            out = out.reshape(out.shape[0], -1)
    return True
