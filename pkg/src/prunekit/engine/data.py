"""Datasets: on-disk format, splits, and the procedural shapes generator.

A dataset directory holds ``dataset.json`` plus raw little-endian binaries
per split (float32 images as N x C x H x W, int32 labels). The synthetic
generator renders up to ten distinguishable binary shapes with position and
size jitter plus Gaussian noise, which a small CNN learns to near-perfect
accuracy in a few epochs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ManifestError, MissingModelFileError

DATASET_META = "dataset.json"


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    split: str
    num_classes: int

    def __post_init__(self) -> None:
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ManifestError("inputs and labels lengths differ")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ManifestError("label exceeds num_classes")

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def subset(self, idx: np.ndarray, split: str | None = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], split or self.split,
                       self.num_classes)


@dataclass
class DataBundle:
    train: Dataset
    test: Dataset

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    def validation_split(self, fraction: float = 0.2) -> Dataset:
        """Deterministic slice off the front of the test split."""
        n = max(1, int(round(fraction * len(self.test))))
        return self.test.subset(np.arange(n), split="validation")


def save_dataset(bundle: DataBundle, path: str | Path) -> None:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    splits = {}
    for name, ds in (("train", bundle.train), ("test", bundle.test)):
        img_file = f"{name}_images.f32"
        lbl_file = f"{name}_labels.i32"
        (directory / img_file).write_bytes(ds.inputs.astype("<f4").tobytes(order="C"))
        (directory / lbl_file).write_bytes(ds.labels.astype("<i4").tobytes(order="C"))
        splits[name] = {"count": len(ds), "images": img_file, "labels": lbl_file}
    meta = {
        "format": "dataset",
        "version": 1,
        "classes": bundle.num_classes,
        "image": list(bundle.train.inputs.shape[1:]),
        "splits": splits,
    }
    (directory / DATASET_META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> DataBundle:
    directory = Path(path)
    meta_path = directory / DATASET_META
    if not meta_path.is_file():
        raise MissingModelFileError(f"no {DATASET_META} under {directory}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != "dataset":
        raise ManifestError(f"not a dataset directory: {directory}")
    c, h, w = (int(d) for d in meta["image"])
    out = {}
    for name in ("train", "test"):
        info = meta["splits"][name]
        n = int(info["count"])
        imgs = np.frombuffer((directory / info["images"]).read_bytes(), dtype="<f4")
        lbls = np.frombuffer((directory / info["labels"]).read_bytes(), dtype="<i4")
        if imgs.size != n * c * h * w or lbls.size != n:
            raise ManifestError(f"{name} split size disagrees with metadata")
        out[name] = Dataset(imgs.reshape(n, c, h, w).copy(), lbls.astype(np.int64),
                            name, int(meta["classes"]))
    return DataBundle(train=out["train"], test=out["test"])


# --------------------------------------------------------------------------
# synthetic shapes
# --------------------------------------------------------------------------

def _render_shape(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    if size < 8:
        raise ValueError(f"image size {size} too small to render shapes")
    img = np.zeros((size, size), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size]
    margin = 3 if size >= 12 else 2
    cx = int(rng.integers(margin + 1, size - margin - 1))
    cy = int(rng.integers(margin + 1, size - margin - 1))
    r = int(rng.integers(3, max(4, min(cx, cy, size - 1 - cx, size - 1 - cy) + 1)))
    dx = xx - cx
    dy = yy - cy

    if cls == 0:  # filled square
        img[(np.abs(dx) <= r) & (np.abs(dy) <= r)] = 1.0
    elif cls == 1:  # filled circle
        img[dx * dx + dy * dy <= r * r] = 1.0
    elif cls == 2:  # hollow square
        box = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        inner = (np.abs(dx) <= r - 2) & (np.abs(dy) <= r - 2)
        img[box & ~inner] = 1.0
    elif cls == 3:  # ring
        d2 = dx * dx + dy * dy
        img[(d2 <= r * r) & (d2 > (r - 2) * (r - 2))] = 1.0
    elif cls == 4:  # plus
        img[((np.abs(dx) <= 1) | (np.abs(dy) <= 1)) & (np.abs(dx) <= r) & (np.abs(dy) <= r)] = 1.0
    elif cls == 5:  # diagonal cross
        box = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        img[box & ((np.abs(dx - dy) <= 1) | (np.abs(dx + dy) <= 1))] = 1.0
    elif cls == 6:  # horizontal stripes
        phase = int(rng.integers(0, 4))
        img[(yy + phase) % 4 < 2] = 1.0
    elif cls == 7:  # vertical stripes
        phase = int(rng.integers(0, 4))
        img[:, :] = ((xx + phase) % 4 < 2).astype(np.float32)
    elif cls == 8:  # one diagonal line
        img[np.abs(dx - dy) <= 1] = 1.0
    elif cls == 9:  # checkerboard
        phase = int(rng.integers(0, 2))
        img[(xx // 2 + yy // 2 + phase) % 2 == 0] = 1.0
    else:
        raise ValueError(f"no renderer for class {cls}")

    img *= float(rng.uniform(0.7, 1.0))
    img += rng.normal(0.0, 0.08, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def make_shapes_dataset(classes: int, image_size: int, samples: int,
                        seed: int) -> DataBundle:
    """Balanced labeled shape images split 5:1 into train and test."""
    if not 2 <= classes <= 10:
        raise ValueError("classes must be between 2 and 10")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A7E5]))
    inputs = np.empty((samples, 1, image_size, image_size), dtype=np.float32)
    labels = np.empty(samples, dtype=np.int64)
    for i in range(samples):
        cls = i % classes
        inputs[i, 0] = _render_shape(cls, image_size, rng)
        labels[i] = cls
    order = rng.permutation(samples)
    inputs, labels = inputs[order], labels[order]
    n_test = max(classes, samples // 6)
    return DataBundle(
        train=Dataset(inputs[n_test:], labels[n_test:], "train", classes),
        test=Dataset(inputs[:n_test], labels[:n_test], "test", classes),
    )
