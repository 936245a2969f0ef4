"""Synthetic oriented-grating images and the B + C x T class split.

Each class is a sinusoidal grating with its own angle, spatial frequency and
phase, multiplied by a Gaussian envelope that sits off-centre.  The envelope
moves to another quadrant under any quarter turn, so a rotated image never
looks like an upright image of any class; the angle set avoids multiples of
45 degrees for the same reason.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ANGLES_DEG = (10.0, 32.0, 54.0, 76.0)
FREQUENCIES = (0.11, 0.19, 0.27)  # cycles per pixel
PHASES = (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi)

DATASET_MAGIC = b"RFSD"
DATASET_VERSION = 1


class CapacityError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass
class LabeledSet:
    images: np.ndarray  # (N, n, n), float64 in [0, 1]
    labels: np.ndarray  # (N,), int64
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or self.images.shape[1] != self.images.shape[2]:
            raise ValueError(f"images must be (N, n, n), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def side(self) -> int:
        return self.images.shape[1]

    def subset(self, classes) -> "LabeledSet":
        mask = np.isin(self.labels, list(classes))
        return LabeledSet(self.images[mask], self.labels[mask], self.split)


@dataclass
class TaskStream:
    class_order: list[int]
    base_count: int
    per_phase: int
    phase_count: int
    tasks: list[list[int]] = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def seen_classes(self, t: int) -> list[int]:
        return [c for task in self.tasks[: t + 1] for c in task]


def class_parameters(class_count: int) -> list[tuple[float, float, float]]:
    """(angle in radians, frequency, phase) per class, walking the grid so that
    consecutive classes differ in angle first."""
    grid = [(a, f, p) for f, p, a in itertools.product(FREQUENCIES, PHASES, ANGLES_DEG)]
    if class_count > len(grid):
        raise CapacityError(f"{class_count} classes requested, only {len(grid)} distinct patterns")
    return [(np.deg2rad(a), f, p) for a, f, p in grid[:class_count]]


def class_template(angle: float, freq: float, phase: float, n: int = 8) -> np.ndarray:
    coords = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    # envelope centred in the upper-left quadrant
    cy = cx = -(n - 1) / 4.0
    sigma = n / 3.0
    envelope = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return 0.5 + 0.45 * wave * envelope


def generate_dataset(class_count: int = 20, per_class_train: int = 100, per_class_test: int = 50,
                     side: int = 8, seed: int = 0, noise_std: float = 0.15) -> tuple[LabeledSet, LabeledSet]:
    """Deterministic (train, test) pair; images are template + clamped noise."""
    if class_count < 2:
        raise ValueError("need at least two classes")
    if per_class_train < 1 or per_class_test < 1:
        raise ValueError("per-class counts must be positive")
    params = class_parameters(class_count)
    templates = np.stack([class_template(a, f, p, side) for a, f, p in params])
    rng = np.random.default_rng(seed)

    def draw(per_class: int, split: str) -> LabeledSet:
        labels = np.repeat(np.arange(class_count), per_class)
        noise = rng.normal(0.0, noise_std, size=(len(labels), side, side)) if noise_std > 0 else 0.0
        images = np.clip(templates[labels] + noise, 0.0, 1.0)
        return LabeledSet(images, labels, split)

    return draw(per_class_train, "train"), draw(per_class_test, "test")


def rotate90(img: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Counter-clockwise quarter turns: one turn maps out[r][c] = in[c][n-1-r].
    Works on a single image or on a stack whose last two axes are the image."""
    if quarter_turns not in (0, 1, 2, 3):
        raise ValueError(f"quarter_turns must be in 0..3, got {quarter_turns}")
    img = np.asarray(img)
    if img.shape[-1] != img.shape[-2]:
        raise ValueError("image must be square")
    return np.rot90(img, quarter_turns, axes=(-2, -1)).copy()


def rotation_batch(images: np.ndarray) -> np.ndarray:
    """(B, n, n) -> (4B, n, n) with rows 4i..4i+3 the four rotations of image i."""
    stacked = np.stack([rotate90(images, j) for j in range(4)], axis=1)
    return stacked.reshape(-1, *images.shape[1:])


def split_tasks(class_count: int, base_count: int, per_phase: int, phase_count: int,
                order_seed: int = 0) -> TaskStream:
    if base_count < 1 or per_phase < 1 or phase_count < 0:
        raise ProtocolError("B and C must be positive and T non-negative")
    if base_count + per_phase * phase_count != class_count:
        raise ProtocolError(
            f"B + C*T = {base_count} + {per_phase}*{phase_count} does not equal {class_count} classes")
    order = [int(c) for c in np.random.default_rng(order_seed).permutation(class_count)]
    tasks = [order[:base_count]]
    for t in range(phase_count):
        start = base_count + t * per_phase
        tasks.append(order[start:start + per_phase])
    return TaskStream(order, base_count, per_phase, phase_count, tasks)


def save_dataset(path, data: LabeledSet) -> None:
    """Little-endian flat file: magic, version, n, class_count, count, then
    float64 pixels row-major and int32 labels."""
    class_count = int(data.labels.max()) + 1 if len(data) else 0
    header = DATASET_MAGIC + struct.pack("<IIII", DATASET_VERSION, data.side, class_count, len(data))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.images.astype("<f8").tobytes())
        fh.write(data.labels.astype("<i4").tobytes())


def load_dataset(path, split: str = "train") -> LabeledSet:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError("not a dataset file")
    version, n, _class_count, count = struct.unpack_from("<IIII", raw, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    offset = 4 + 16
    pix = np.frombuffer(raw, dtype="<f8", count=count * n * n, offset=offset)
    offset += pix.nbytes
    labels = np.frombuffer(raw, dtype="<i4", count=count, offset=offset)
    return LabeledSet(pix.reshape(count, n, n).astype(np.float64), labels.astype(np.int64), split)
