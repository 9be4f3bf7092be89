#!/usr/bin/env python3
"""Regenerate the adapter's committed test fixtures.

Writes a small trained model container, its dataset, and magnitude-mask
parity vectors under adapter/testdata/. Deterministic: rerunning produces
byte-identical artifacts on one platform.
"""

import json
import shutil
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from prunekit.fixtures import FixtureSpec, make_fixture  # noqa: E402
from prunekit.model_store import magnitude_kept, sparsity_to_count  # noqa: E402

OUT = ROOT / "adapter" / "testdata"

FIXTURE_SPEC = FixtureSpec(classes=3, image_size=8, samples=240, seed=13, arch="tiny3",
                           epochs=25, learning_rate=0.15)


def build_fixture() -> None:
    staging = OUT / "fixture"
    for stale in (OUT / "tinymodel", OUT / "tinydata", staging):
        shutil.rmtree(stale, ignore_errors=True)
    meta = make_fixture(FIXTURE_SPEC, staging)
    (staging / "model").rename(OUT / "tinymodel")
    (staging / "data").rename(OUT / "tinydata")
    (OUT / "fixture.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    shutil.rmtree(staging)
    print("fixture baseline:", meta["baseline_top1"])


def build_parity_vectors() -> None:
    rng = np.random.default_rng(99)
    cases = []
    # adversarial hand cases: exact ties, banker's-rounding counts, zeros
    hand = [
        ("ties", np.array([0.5, -0.5, 0.5, -0.25, 0.25], dtype=np.float32), 0.4),
        ("banker-even", rng.normal(0, 1, 10).astype(np.float32), 0.25),   # 2.5 -> 2
        ("banker-odd", rng.normal(0, 1, 10).astype(np.float32), 0.35),    # 3.5 -> 4
        ("zeros", np.array([0.0, 0.0, 1.0, -1.0, 0.0, 2.0], dtype=np.float32), 0.5),
        ("all-equal", np.full(8, 0.125, dtype=np.float32), 0.5),
    ]
    for name, w, s in hand:
        count = sparsity_to_count(s, w.size)
        kept = magnitude_kept(w, count)
        cases.append({"name": name, "weights": [float(v) for v in w],
                      "sparsity": s, "kept": [int(k) for k in kept]})
    for i in range(40):
        n = int(rng.integers(3, 200))
        w = rng.normal(0, 1, n).astype(np.float32)
        if i % 3 == 0:  # inject duplicated magnitudes
            src = rng.integers(0, n, max(1, n // 5))
            dst = rng.integers(0, n, max(1, n // 5))
            w[dst] = np.abs(w[src]) * np.where(rng.random(dst.size) < 0.5, -1, 1)
        s = float(rng.uniform(0, 1))
        count = sparsity_to_count(s, n)
        kept = magnitude_kept(w, count)
        cases.append({"name": f"random-{i}", "weights": [float(v) for v in w],
                      "sparsity": s, "kept": [int(k) for k in kept]})
    doc = {"version": 1, "cases": cases}
    (OUT / "mask_parity.json").write_text(json.dumps(doc) + "\n")
    print(f"parity vectors: {len(cases)} cases")


def build_mask_file_sample() -> None:
    """A mask file over the fixture layers plus its expected bit contents."""
    from prunekit.model_store import PruneMask, load_model, write_masks

    model = load_model(OUT / "tinymodel")
    rng = np.random.default_rng(7)
    expected = {}
    masks = {}
    for layer in model.layers:
        kept = rng.random(layer.parameter_count) < 0.7
        masks[layer.name] = PruneMask(layer.name, kept, from_magnitude=False)
        expected[layer.name] = [int(k) for k in kept]
    write_masks(masks, OUT / "masks_sample.bin")
    (OUT / "masks_sample.json").write_text(json.dumps(expected) + "\n")
    print("mask file sample written")


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    build_fixture()
    build_parity_vectors()
    build_mask_file_sample()
