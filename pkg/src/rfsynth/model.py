"""Feature extractor, the two classifier heads and frozen snapshots."""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .numerics import Tensor, relu

CHECKPOINT_MAGIC = b"RFSCKPT1"


def he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def head_rows(rng: np.random.Generator, m: int, count: int, gain: float = 1.0) -> np.ndarray:
    """Centred uniform init with std gain/sqrt(m); returned as (m, count)
    columns of the weight matrix (one column per class)."""
    bound = gain * np.sqrt(3.0 / m)
    return rng.uniform(-bound, bound, size=(m, count))


class FeatureExtractor:
    """MLP n^2 -> h -> h -> m with ReLU between layers; the last layer is linear."""

    def __init__(self, in_dim: int, hidden: int = 64, feature_dim: int = 32, depth: int = 2,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [in_dim] + [hidden] * depth + [feature_dim]
        self.weights = [Tensor(he_uniform(rng, a, b), requires_grad=True) for a, b in zip(dims, dims[1:])]
        self.biases = [Tensor(np.zeros(b), requires_grad=True) for b in dims[1:]]
        self.feature_dim = feature_dim

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x).reshape(len(x), -1))
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = relu(h)
        return h

    def named_arrays(self, prefix: str = "extractor") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.layer{i}.weight"] = w.data
            out[f"{prefix}.layer{i}.bias"] = b.data
        return out


class LinearHead:
    """Bias-free (optionally biased) linear map; columns index output classes."""

    def __init__(self, weight: np.ndarray, bias: bool = False):
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.zeros(weight.shape[1]), requires_grad=True) if bias else None

    @property
    def width(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, features: Tensor) -> Tensor:
        out = features @ self.weight
        return out + self.bias if self.bias is not None else out


@dataclass
class DualHead:
    """Unified head over every class seen so far and the per-task rotation head."""

    feature_dim: int
    unified: LinearHead
    augmented: LinearHead
    current_task_classes: list[int] = field(default_factory=list)
    bias: bool = False
    init_gain: float = 1.0

    @property
    def seen_class_count(self) -> int:
        return self.unified.width


class IncrementalModel:
    def __init__(self, in_dim: int, hidden: int = 64, feature_dim: int = 32, depth: int = 2,
                 head_bias: bool = False, init_gain: float = 1.0, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.extractor = FeatureExtractor(in_dim, hidden, feature_dim, depth, self.rng)
        empty = np.zeros((feature_dim, 0))
        self.heads = DualHead(feature_dim, LinearHead(empty, head_bias), LinearHead(empty, head_bias),
                              bias=head_bias, init_gain=init_gain)

    @property
    def feature_dim(self) -> int:
        return self.extractor.feature_dim

    @property
    def unified(self) -> LinearHead:
        return self.heads.unified

    @property
    def augmented(self) -> LinearHead:
        return self.heads.augmented

    def extract(self, images) -> Tensor:
        x = np.asarray(images, dtype=np.float64)
        return self.extractor(Tensor(x.reshape(len(x), -1)))

    def parameters(self) -> list[Tensor]:
        return self.extractor.parameters() + self.unified.parameters() + self.augmented.parameters()

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = self.extractor.named_arrays()
        out["unified.weight"] = self.unified.weight.data
        if self.unified.bias is not None:
            out["unified.bias"] = self.unified.bias.data
        out["augmented.weight"] = self.augmented.weight.data
        if self.augmented.bias is not None:
            out["augmented.bias"] = self.augmented.bias.data
        return out


def expand_unified_head(model: IncrementalModel, new_classes: list[int]) -> None:
    """Grow the unified head by one column per new class (old columns are kept
    bit-exactly) and start a fresh rotation head with 4 columns per new class."""
    heads = model.heads
    m = heads.feature_dim
    count = len(new_classes)
    if count:
        old_w = heads.unified.weight.data
        new_w = np.concatenate([old_w, head_rows(model.rng, m, count, heads.init_gain)], axis=1)
        old_b = heads.unified.bias.data if heads.unified.bias is not None else None
        heads.unified = LinearHead(new_w, heads.bias)
        if old_b is not None:
            heads.unified.bias.data[: len(old_b)] = old_b
    heads.augmented = LinearHead(head_rows(model.rng, m, 4 * count, heads.init_gain), heads.bias)
    heads.current_task_classes = list(new_classes)


class ModelSnapshot:
    """Frozen copy of the extractor and unified head; its outputs never track
    gradients."""

    def __init__(self, model: IncrementalModel):
        self.extractor = copy.deepcopy(model.extractor)
        self.unified = copy.deepcopy(model.unified)
        for p in self.extractor.parameters() + self.unified.parameters():
            p.requires_grad = False
            p.grad = None
            p.data.setflags(write=False)

    def extract(self, images) -> Tensor:
        x = np.asarray(images, dtype=np.float64)
        return Tensor(self.extractor(Tensor(x.reshape(len(x), -1))).data)

    def logits(self, features) -> Tensor:
        f = features.data if isinstance(features, Tensor) else np.asarray(features)
        return Tensor(self.unified(Tensor(f)).data)

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.extractor.parameters() + self.unified.parameters():
            h.update(p.data.tobytes())
        return h.hexdigest()


def snapshot(model: IncrementalModel) -> ModelSnapshot:
    return ModelSnapshot(model)


def save_checkpoint(path, model: IncrementalModel, metadata: dict) -> None:
    """Binary container: magic, u64 header length, JSON header (names, shapes,
    byte offsets, metadata), then little-endian float64 payloads."""
    arrays = model.named_arrays()
    entries, offset = [], 0
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"tensors": entries, "metadata": metadata}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=base + entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return arrays, header["metadata"]


def restore_arrays(model: IncrementalModel, arrays: dict[str, np.ndarray]) -> None:
    """Load checkpoint arrays into a model whose heads already have the right widths."""
    for name, arr in model.named_arrays().items():
        arr[...] = arrays[name]
