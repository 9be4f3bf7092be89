"""Desk-scale fixture generation: synthetic data plus a trained small CNN.

Everything is seeded, so a fixture regenerated with the same spec is
byte-identical on one platform: the dataset renderer, the weight init, and
the SGD shuffle order all draw from generators derived from the one seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .engine.builtin import BuiltinTrainer
from .engine.data import DataBundle, make_shapes_dataset, save_dataset
from .errors import FixtureBoundsError
from .model_store import LayerTensor, ModelSnapshot, all_ones_mask, save_model

MAX_PARAMETERS = 100_000
MAX_SAMPLES = 10_000

ARCHS = ("desk4", "tiny3")


@dataclass
class FixtureSpec:
    classes: int = 10
    image_size: int = 16
    samples: int = 2400
    seed: int = 7
    arch: str = "desk4"
    epochs: int = 15
    learning_rate: float = 0.08
    batch_size: int = 32


def _arch_layout(spec: FixtureSpec):
    """Layer shapes and op graph for the named architecture."""
    s = spec.image_size
    if spec.arch == "desk4":
        if s % 4:
            raise FixtureBoundsError("desk4 needs an image size divisible by 4")
        pooled = s // 4
        shapes = {
            "conv1": ("conv2d", (12, 1, 3, 3)),
            "conv2": ("conv2d", (24, 12, 3, 3)),
            "fc1": ("dense", (128, 24 * pooled * pooled)),
            "fc2": ("dense", (spec.classes, 128)),
        }
        graph = [
            {"op": "conv2d", "layer": "conv1", "stride": 1, "padding": 1},
            {"op": "relu"},
            {"op": "maxpool2"},
            {"op": "conv2d", "layer": "conv2", "stride": 1, "padding": 1},
            {"op": "relu"},
            {"op": "maxpool2"},
            {"op": "flatten"},
            {"op": "dense", "layer": "fc1"},
            {"op": "relu"},
            {"op": "dense", "layer": "fc2"},
        ]
    elif spec.arch == "tiny3":
        if s % 2:
            raise FixtureBoundsError("tiny3 needs an even image size")
        pooled = s // 2
        shapes = {
            "conv1": ("conv2d", (6, 1, 3, 3)),
            "fc1": ("dense", (24, 6 * pooled * pooled)),
            "fc2": ("dense", (spec.classes, 24)),
        }
        graph = [
            {"op": "conv2d", "layer": "conv1", "stride": 1, "padding": 1},
            {"op": "relu"},
            {"op": "maxpool2"},
            {"op": "flatten"},
            {"op": "dense", "layer": "fc1"},
            {"op": "relu"},
            {"op": "dense", "layer": "fc2"},
        ]
    else:
        raise FixtureBoundsError(f"unknown arch {spec.arch!r}; choose from {ARCHS}")
    return shapes, graph


def _init_model(spec: FixtureSpec) -> ModelSnapshot:
    shapes, graph = _arch_layout(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x11712]))
    layers = []
    for name, (kind, shape) in shapes.items():
        fan_in = int(np.prod(shape[1:]))
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(np.float32)
        b = np.zeros(shape[0], dtype=np.float32)
        layers.append(LayerTensor(name, kind, shape, w, b))
    masks = {lt.name: all_ones_mask(lt) for lt in layers}
    meta = {
        "input_shape": [1, spec.image_size, spec.image_size],
        "num_classes": spec.classes,
    }
    return ModelSnapshot(layers=layers, masks=masks, arch_graph=graph, meta=meta)


def check_bounds(spec: FixtureSpec) -> int:
    if spec.samples <= 0 or spec.samples > MAX_SAMPLES:
        raise FixtureBoundsError(f"samples must lie in 1..{MAX_SAMPLES}, got {spec.samples}")
    if not 2 <= spec.classes <= 10:
        raise FixtureBoundsError(f"classes must lie in 2..10, got {spec.classes}")
    shapes, _ = _arch_layout(spec)
    params = sum(int(np.prod(shape)) for _, shape in shapes.values())
    if params > MAX_PARAMETERS:
        raise FixtureBoundsError(f"{params} parameters exceed the {MAX_PARAMETERS} bound")
    return params


def make_fixture(spec: FixtureSpec, out_dir: str | Path) -> dict:
    """Generate data, train the fixture CNN, and write model + dataset + metadata."""
    params = check_bounds(spec)
    out = Path(out_dir)
    data = make_shapes_dataset(spec.classes, spec.image_size, spec.samples, spec.seed)
    model = _init_model(spec)
    trainer = BuiltinTrainer(model, data, lr=spec.learning_rate,
                             batch_size=spec.batch_size, seed=spec.seed, masking=False)
    final = trainer.train_epochs(spec.epochs, masking=False)

    trained_layers = [
        LayerTensor(lt.name, lt.kind, lt.shape, trainer.weights[lt.name],
                    trainer.biases[lt.name])
        for lt in model.layers
    ]
    trained = ModelSnapshot(
        layers=trained_layers,
        masks={lt.name: all_ones_mask(lt) for lt in trained_layers},
        arch_graph=model.arch_graph,
        meta={
            **model.meta,
            "baseline_top1": final.top1,
            "baseline_top5": final.top5,
            "parameter_count": params,
            "loss_curve": trainer.loss_curve,
            "fixture_spec": asdict(spec),
        },
    )
    save_model(trained, out / "model")
    save_dataset(data, out / "data")
    metadata = {
        "baseline_top1": final.top1,
        "baseline_top5": final.top5,
        "parameter_count": params,
        "loss_curve": trainer.loss_curve,
        "spec": asdict(spec),
    }
    (out / "fixture.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return metadata


def load_fixture(out_dir: str | Path) -> tuple[ModelSnapshot, DataBundle, dict]:
    from .engine.data import load_dataset
    from .model_store import load_model

    out = Path(out_dir)
    model = load_model(out / "model")
    data = load_dataset(out / "data")
    metadata = json.loads((out / "fixture.json").read_text())
    return model, data, metadata
