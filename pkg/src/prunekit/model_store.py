"""Model weights, prune masks, and the on-disk container/mask formats.

A model container is a directory holding ``manifest.json`` plus one raw
little-endian float32 binary per tensor (row-major). The manifest lists
every prunable weight tensor (name, kind, shape, file, byte range, optional
bias file) and carries ``arch_graph``, the ordered op list the built-in
evaluator executes.

Pruning state lives exclusively in :class:`PruneMask` objects; the loaded
weights (``pristine_weights``) are never mutated.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ContractViolationError,
    ManifestError,
    MaskFileError,
    MissingModelFileError,
    NonFiniteWeightsError,
    ShapeMismatchError,
    UnknownLayerError,
)

MANIFEST_NAME = "manifest.json"
CONTAINER_FORMAT = "model-container"
CONTAINER_VERSION = 1
LAYER_KINDS = ("conv2d", "dense")

_MASK_MAGIC = b"PKMASK1\n"


@dataclass
class LayerTensor:
    """One named weight tensor with an immutable copy of its trained values.

    ``shape`` is ``(out_channels, in_channels, kh, kw)`` for conv2d and
    ``(out, in)`` for dense. ``pristine_weights`` is the row-major float32
    array as loaded; every pruning decision is expressed through a mask,
    never by editing these values.
    """

    name: str
    kind: str
    shape: tuple[int, ...]
    pristine_weights: np.ndarray
    pristine_bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ManifestError(f"layer {self.name!r}: unsupported kind {self.kind!r}")
        self.shape = tuple(int(d) for d in self.shape)
        w = np.ascontiguousarray(self.pristine_weights, dtype=np.float32).reshape(self.shape)
        w.flags.writeable = False
        self.pristine_weights = w
        if self.pristine_bias is not None:
            b = np.ascontiguousarray(self.pristine_bias, dtype=np.float32)
            b.flags.writeable = False
            self.pristine_bias = b

    @property
    def parameter_count(self) -> int:
        return int(np.prod(self.shape))

    @property
    def flat_pristine(self) -> np.ndarray:
        return self.pristine_weights.reshape(-1)


@dataclass
class PruneMask:
    """Per-layer bitset of kept weights. Bit i covers flat index i.

    ``kept`` is a boolean array of length ``parameter_count``; True means the
    weight is active. ``from_magnitude`` records whether the current mask is
    exactly the magnitude mask at its sparsity (structural and filter-level
    masks are not).
    """

    layer_name: str
    kept: np.ndarray
    from_magnitude: bool = True

    def __post_init__(self) -> None:
        self.kept = np.asarray(self.kept, dtype=bool).reshape(-1)

    @property
    def parameter_count(self) -> int:
        return int(self.kept.size)

    @property
    def pruned_count(self) -> int:
        return int(self.kept.size - np.count_nonzero(self.kept))

    @property
    def sparsity(self) -> float:
        return self.pruned_count / self.kept.size

    def copy(self) -> "PruneMask":
        return PruneMask(self.layer_name, self.kept.copy(), self.from_magnitude)


@dataclass
class ModelSnapshot:
    """Loaded model: ordered layers, one mask per layer, and the op graph."""

    layers: list[LayerTensor]
    masks: dict[str, PruneMask]
    arch_graph: list[dict]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        names = [lt.name for lt in self.layers]
        if len(set(names)) != len(names):
            raise ManifestError("duplicate layer names in model")
        self._by_name = {lt.name: lt for lt in self.layers}
        for name in names:
            if name not in self.masks:
                raise ManifestError(f"no mask for layer {name!r}")
            if self.masks[name].parameter_count != self.layer(name).parameter_count:
                raise ContractViolationError(f"mask length mismatch for layer {name!r}")

    def layer(self, name: str) -> LayerTensor:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownLayerError(f"unknown layer {name!r}") from None

    def layer_names(self) -> list[str]:
        return [lt.name for lt in self.layers]

    def has_layer(self, name: str) -> bool:
        return name in self._by_name

    def sparsities(self) -> dict[str, float]:
        return {lt.name: self.masks[lt.name].sparsity for lt in self.layers}

    def copy_masks(self) -> dict[str, PruneMask]:
        return {name: m.copy() for name, m in self.masks.items()}

    def restore_masks(self, saved: dict[str, PruneMask]) -> None:
        for name, m in saved.items():
            self.masks[name] = m.copy()


def all_ones_mask(layer: LayerTensor) -> PruneMask:
    return PruneMask(layer.name, np.ones(layer.parameter_count, dtype=bool))


def magnitude_order(flat_weights: np.ndarray) -> np.ndarray:
    """Pruning order over a flat weight array: ascending |value|, ties by index.

    The first k entries of the returned index array are the k weights a
    magnitude mask at pruned-count k removes.
    """
    return np.argsort(np.abs(flat_weights), kind="stable")


def magnitude_kept(flat_weights: np.ndarray, pruned_count: int) -> np.ndarray:
    """Boolean kept-array pruning the ``pruned_count`` smallest-|value| weights."""
    n = flat_weights.size
    if not 0 <= pruned_count <= n:
        raise ContractViolationError(f"pruned_count {pruned_count} out of range for {n} weights")
    kept = np.ones(n, dtype=bool)
    if pruned_count:
        kept[magnitude_order(flat_weights)[:pruned_count]] = False
    return kept


def sparsity_to_count(sparsity: float, parameter_count: int) -> int:
    """Convert a sparsity fraction to a pruned-weight count (round half to even)."""
    if not 0.0 <= sparsity <= 1.0:
        raise ContractViolationError(f"sparsity {sparsity} outside [0, 1]")
    return int(round(float(sparsity) * parameter_count))


def effective_weights(layer: LayerTensor, mask: PruneMask) -> np.ndarray:
    """Masked weights: element-wise product of pristine values and mask bits."""
    if mask.parameter_count != layer.parameter_count:
        raise ContractViolationError(
            f"mask length {mask.parameter_count} != parameter count {layer.parameter_count}"
        )
    out = layer.flat_pristine.copy()
    out[~mask.kept] = 0.0
    return out.reshape(layer.shape)


def weighted_sparsity(model: ModelSnapshot) -> float:
    """Model-level sparsity: pruned parameters over total parameters."""
    total = sum(lt.parameter_count for lt in model.layers)
    pruned = sum(model.masks[lt.name].pruned_count for lt in model.layers)
    return pruned / total if total else 0.0


def weighted_sparsity_of(sparsities: dict[str, float], sizes: dict[str, int]) -> float:
    """Weighted sparsity recomputed from a per-layer fraction vector."""
    total = sum(sizes.values())
    pruned = sum(sparsity_to_count(sparsities[name], n) for name, n in sizes.items())
    return pruned / total if total else 0.0


# --------------------------------------------------------------------------
# container I/O
# --------------------------------------------------------------------------

def _read_tensor(directory: Path, entry: dict, shape: tuple[int, ...],
                 file_key: str, offset_key: str, length_key: str) -> np.ndarray:
    fname = entry[file_key]
    path = directory / fname
    if not path.is_file():
        raise MissingModelFileError(f"tensor file missing: {path}")
    offset = int(entry.get(offset_key, 0))
    count = int(np.prod(shape))
    length = int(entry.get(length_key, count * 4))
    if length != count * 4:
        raise ShapeMismatchError(
            f"{fname}: declared byte length {length} != shape {shape} * 4"
        )
    raw = path.read_bytes()
    if offset + length > len(raw):
        raise ShapeMismatchError(
            f"{fname}: file holds {len(raw)} bytes, need {offset + length}"
        )
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    if not np.isfinite(arr).all():
        raise NonFiniteWeightsError(f"{fname}: tensor contains non-finite values")
    return arr.reshape(shape)


def load_model(path: str | Path) -> ModelSnapshot:
    """Load a model container; every layer starts with an all-ones mask."""
    directory = Path(path)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise MissingModelFileError(f"no {MANIFEST_NAME} under {directory}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != CONTAINER_FORMAT:
        raise ManifestError(f"not a model container: format={manifest.get('format')!r}")
    if int(manifest.get("version", 0)) > CONTAINER_VERSION:
        raise ManifestError(f"container version {manifest['version']} is newer than supported")

    layers: list[LayerTensor] = []
    for entry in manifest.get("layers", []):
        for key in ("name", "kind", "shape", "dtype", "file"):
            if key not in entry:
                raise ManifestError(f"layer entry missing {key!r}: {entry}")
        if entry["dtype"] != "f32":
            raise ManifestError(f"layer {entry['name']!r}: unsupported dtype {entry['dtype']!r}")
        shape = tuple(int(d) for d in entry["shape"])
        weights = _read_tensor(directory, entry, shape, "file", "byte_offset", "byte_length")
        bias = None
        if entry.get("bias_file"):
            bias = _read_tensor(
                directory, entry, (shape[0],), "bias_file", "bias_byte_offset", "bias_byte_length"
            )
        layers.append(LayerTensor(entry["name"], entry["kind"], shape, weights, bias))
    if not layers:
        raise ManifestError("manifest declares no layers")

    masks = {lt.name: all_ones_mask(lt) for lt in layers}
    return ModelSnapshot(
        layers=layers,
        masks=masks,
        arch_graph=list(manifest.get("arch_graph", [])),
        meta=dict(manifest.get("meta", {})),
    )


def save_model(model: ModelSnapshot, path: str | Path) -> None:
    """Write a model container. Tensor bytes are exactly the pristine values."""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for lt in model.layers:
        wfile = f"{lt.name}.w.f32"
        (directory / wfile).write_bytes(lt.pristine_weights.astype("<f4").tobytes(order="C"))
        entry = {
            "name": lt.name,
            "kind": lt.kind,
            "shape": list(lt.shape),
            "dtype": "f32",
            "file": wfile,
            "byte_offset": 0,
            "byte_length": lt.parameter_count * 4,
        }
        if lt.pristine_bias is not None:
            bfile = f"{lt.name}.b.f32"
            (directory / bfile).write_bytes(lt.pristine_bias.astype("<f4").tobytes(order="C"))
            entry["bias_file"] = bfile
            entry["bias_byte_offset"] = 0
            entry["bias_byte_length"] = int(lt.pristine_bias.size) * 4
        entries.append(entry)
    manifest = {
        "format": CONTAINER_FORMAT,
        "version": CONTAINER_VERSION,
        "layers": entries,
        "arch_graph": model.arch_graph,
        "meta": model.meta,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# mask file I/O
# --------------------------------------------------------------------------
#
# Binary layout: magic, u32 layer count, then per layer:
#   u16 name length, name bytes (utf-8), u64 bit count,
#   ceil(bits/64) little-endian u64 words where word j bit k (LSB first)
#   covers flat weight index j*64 + k.

def write_masks(masks: dict[str, PruneMask], path: str | Path) -> None:
    out = bytearray(_MASK_MAGIC)
    out += struct.pack("<I", len(masks))
    for name, mask in masks.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw))
        out += raw
        bits = mask.kept
        out += struct.pack("<Q", bits.size)
        n_words = (bits.size + 63) // 64
        padded = np.zeros(n_words * 64, dtype=np.uint64)
        padded[: bits.size] = bits
        words = (padded.reshape(n_words, 64) << np.arange(64, dtype=np.uint64)).sum(
            axis=1, dtype=np.uint64
        )
        out += words.astype("<u8").tobytes()
    Path(path).write_bytes(bytes(out))


def read_masks(path: str | Path) -> dict[str, np.ndarray]:
    """Read a mask file; returns flat kept-arrays keyed by layer name."""
    raw = Path(path).read_bytes()
    if raw[: len(_MASK_MAGIC)] != _MASK_MAGIC:
        raise MaskFileError(f"{path}: not a mask file")
    pos = len(_MASK_MAGIC)
    try:
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        result: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (bits,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            n_words = (bits + 63) // 64
            words = np.frombuffer(raw, dtype="<u8", count=n_words, offset=pos)
            pos += n_words * 8
            unpacked = (words[:, None] >> np.arange(64, dtype=np.uint64)) & np.uint64(1)
            result[name] = unpacked.reshape(-1)[:bits].astype(bool)
    except (struct.error, IndexError) as exc:
        raise MaskFileError(f"{path}: truncated mask file") from exc
    return result


def apply_mask_file(model: ModelSnapshot, path: str | Path) -> None:
    """Replace the model's masks with the contents of a mask file."""
    loaded = read_masks(path)
    for name, kept in loaded.items():
        if not model.has_layer(name):
            raise MaskFileError(f"mask file names unknown layer {name!r}")
        if kept.size != model.layer(name).parameter_count:
            raise MaskFileError(f"mask length mismatch for layer {name!r}")
        model.masks[name] = PruneMask(name, kept, from_magnitude=False)
