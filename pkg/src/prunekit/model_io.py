"""Deterministic persistence: checkpoints, dataset loaders, synthetic data.

Checkpoint container layout (version 1):

    magic  b"CPLI1"
    u32 LE header length, then that many bytes of JSON (spec, metadata,
    tensor manifest with shapes)
    per tensor: u32 LE crc32 of the payload, then the payload as raw
    little-endian float64 bytes in row-major order

Raw 64-bit blocks (rather than text) keep save/load round trips
bit-identical, which the pruning pipeline depends on.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn

MAGIC = b"CPLI1"
FORMAT_VERSION = 1
CIFAR_RECORD_BYTES = 3073


class FormatError(ValueError):
    """A file does not parse as the format it claims to be."""


class ChecksumError(FormatError):
    """Stored checksum does not match the tensor payload."""


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """A network spec, its per-layer weights, and save-time metadata."""

    spec: nn.NetworkSpec
    params: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.params) != len(self.spec.layers):
            raise ValueError(f"params length {len(self.params)} does not match "
                             f"{len(self.spec.layers)} layers")
        dims = self.spec.input_dims
        for i, (layer, p) in enumerate(zip(self.spec.layers, self.params)):
            if layer.kind == nn.CONV2D:
                kh, kw = layer.kernel
                want = (layer.out_channels, layer.in_channels, kh, kw)
                if p.weights.shape != want:
                    raise ValueError(f"layer {i}: weights {p.weights.shape} != {want}")
            elif layer.kind == nn.LINEAR:
                want = (layer.out_features, layer.in_features)
                if p.weights.shape != want:
                    raise ValueError(f"layer {i}: weights {p.weights.shape} != {want}")

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.spec, nn.copy_params(self.params), dict(self.metadata))


def _layer_to_dict(layer: nn.LayerSpec) -> dict:
    d = {"kind": layer.kind}
    if layer.kind == nn.CONV2D:
        d.update(in_channels=layer.in_channels, out_channels=layer.out_channels,
                 kernel=list(layer.kernel), stride=layer.stride, padding=layer.padding)
    elif layer.kind == nn.MAXPOOL2D:
        d.update(window=list(layer.window), stride=layer.stride)
    elif layer.kind == nn.LINEAR:
        d.update(in_features=layer.in_features, out_features=layer.out_features)
    return d


def _layer_from_dict(d: dict) -> nn.LayerSpec:
    kind = d["kind"]
    if kind == nn.CONV2D:
        return nn.conv2d(d["in_channels"], d["out_channels"], tuple(d["kernel"]),
                         d["stride"], d["padding"])
    if kind == nn.MAXPOOL2D:
        return nn.maxpool2d(tuple(d["window"]), d["stride"])
    if kind == nn.LINEAR:
        return nn.linear(d["in_features"], d["out_features"])
    if kind == nn.RELU:
        return nn.relu()
    if kind == nn.FLATTEN:
        return nn.flatten()
    if kind == nn.SOFTMAX_CE_HEAD:
        return nn.softmax_ce_head()
    raise FormatError(f"unknown layer kind {kind!r}")


def spec_to_dict(spec: nn.NetworkSpec) -> dict:
    return {"layers": [_layer_to_dict(l) for l in spec.layers],
            "input_dims": list(spec.input_dims),
            "num_classes": spec.num_classes}


def spec_from_dict(d: dict) -> nn.NetworkSpec:
    return nn.NetworkSpec(tuple(_layer_from_dict(l) for l in d["layers"]),
                          tuple(d["input_dims"]), d["num_classes"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = []
    manifest = []
    for i, p in enumerate(ckpt.params):
        if p is None:
            continue
        for name, arr in (("weights", p.weights), ("bias", p.bias)):
            tensors.append(np.ascontiguousarray(arr, dtype="<f8"))
            manifest.append({"layer": i, "name": name, "shape": list(arr.shape)})
    header = json.dumps({"version": FORMAT_VERSION, "spec": spec_to_dict(ckpt.spec),
                         "metadata": ckpt.metadata, "tensors": manifest},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(4, "little"))
        fh.write(header)
        for arr in tensors:
            payload = arr.tobytes()
            fh.write((zlib.crc32(payload) & 0xFFFFFFFF).to_bytes(4, "little"))
            fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0 (expected {MAGIC!r})")
    off = len(MAGIC)
    if len(data) < off + 4:
        raise FormatError(f"{path}: truncated header length at byte {len(data)}")
    hlen = int.from_bytes(data[off:off + 4], "little")
    off += 4
    if len(data) < off + hlen:
        raise FormatError(f"{path}: truncated header at byte {len(data)}")
    header = json.loads(data[off:off + hlen])
    off += hlen
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')} "
                          f"(expected {FORMAT_VERSION})")
    spec = spec_from_dict(header["spec"])
    params: list = [None] * len(spec.layers)
    staged: dict[int, dict[str, np.ndarray]] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if len(data) < off + 4 + nbytes:
            raise FormatError(f"{path}: truncated tensor data at byte {len(data)}")
        stored_crc = int.from_bytes(data[off:off + 4], "little")
        payload = data[off + 4:off + 4 + nbytes]
        if (zlib.crc32(payload) & 0xFFFFFFFF) != stored_crc:
            raise ChecksumError(f"{path}: checksum mismatch for layer "
                                f"{entry['layer']} {entry['name']}")
        arr = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        staged.setdefault(entry["layer"], {})[entry["name"]] = arr
        off += 4 + nbytes
    for i, parts in staged.items():
        params[i] = nn.LayerParams(parts["weights"], parts["bias"])
    return Checkpoint(spec, params, header["metadata"])


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class DatasetHandle:
    """Images scaled to [0, 1] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = ""

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and self.num_classes > 0:
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "DatasetHandle":
        return DatasetHandle(self.images[indices], self.labels[indices],
                             self.num_classes, self.split)


def _read_idx_array(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated magic at byte {len(data)}")
    magic = int.from_bytes(data[:4], "big")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte 0")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated dimensions at byte {len(data)}")
    dims = [int.from_bytes(data[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    total = int(np.prod(dims, dtype=np.int64)) if dims else 0
    if len(data) != header + total:
        raise FormatError(f"{path}: expected {header + total} bytes, got {len(data)} "
                          f"(payload starts at byte {header})")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "") -> DatasetHandle:
    """Parse an IDX image/label file pair into a dataset."""
    images = _read_idx_array(images_path)
    labels = _read_idx_array(labels_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected 3-d image data, got {images.ndim}-d")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected 1-d label data, got {labels.ndim}-d")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    n, h, w = images.shape
    pixels = images.reshape(n, 1, h, w).astype(np.float64) / 255.0
    classes = int(labels.max()) + 1 if n else 0
    return DatasetHandle(pixels, labels.astype(np.int64), classes, split)


def load_cifar_binary(path, split: str = "") -> DatasetHandle:
    """Parse a CIFAR-10 binary batch (3073-byte records, label byte first)."""
    data = Path(path).read_bytes()
    if len(data) % CIFAR_RECORD_BYTES != 0:
        raise FormatError(f"{path}: length {len(data)} is not a multiple of "
                          f"{CIFAR_RECORD_BYTES}")
    n = len(data) // CIFAR_RECORD_BYTES
    if n == 0:
        return DatasetHandle(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=np.int64),
                             10, split)
    records = np.frombuffer(data, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{path}: label byte {labels[bad]} > 9 in record {bad}")
    images = records[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return DatasetHandle(images, labels, 10, split)


def synth_dataset(seed: int, count: int, classes: int, dims=(1, 16, 16),
                  noise: float = 0.25, amplitude: float = 0.9,
                  jitter: float = 1.5, split: str = "") -> DatasetHandle:
    """Gaussian-blob images, one blob position (and orientation) per class.

    Class k's blob sits at a fixed angle around the image centre and has a
    class-specific elongation and tilt, both jittered per image; pixel noise
    keeps the task from being solvable by a single pixel.  Fixed seed gives
    bit-identical tensors.
    """
    if classes < 1 or count < 0:
        raise ValueError("need classes >= 1 and count >= 0")
    c, h, w = dims
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count, dtype=np.int64) % classes)
    images = rng.normal(0.3, noise, size=(count, c, h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    radius = min(h, w) / 3.3
    sigma = min(h, w) / 7.5
    angles = 2.0 * np.pi * np.arange(classes) / classes
    aspects = 0.5 + 1.2 * (np.arange(classes) % 3) / 2.0  # 0.5, 1.1, 1.7
    tilts = np.pi * np.arange(classes) / max(classes, 1)
    for i in range(count):
        k = labels[i]
        cy = h / 2.0 + radius * np.sin(angles[k]) + rng.uniform(-jitter, jitter)
        cx = w / 2.0 + radius * np.cos(angles[k]) + rng.uniform(-jitter, jitter)
        tilt = tilts[k] + rng.uniform(-0.25, 0.25)
        ct, st = np.cos(tilt), np.sin(tilt)
        u = (yy - cy) * ct + (xx - cx) * st
        v = -(yy - cy) * st + (xx - cx) * ct
        su, sv = sigma * aspects[k], sigma / aspects[k]
        blob = amplitude * np.exp(-0.5 * ((u / su) ** 2 + (v / sv) ** 2))
        images[i, k % c] += blob
    np.clip(images, 0.0, 1.0, out=images)
    return DatasetHandle(images, labels, classes, split)


# ---------------------------------------------------------------------------
# Flat key=value config files
# ---------------------------------------------------------------------------

def load_config(path) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment, blanks are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def save_config(path, values: dict) -> None:
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n")
