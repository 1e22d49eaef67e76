# core/services/dataset_service.py
"""
Dataset Service - Synthetic geometric shapes and CIFAR-10 binary subsets.

Both datasets come back as ``(N, 3, H, W)`` float64 images in [0, 1] with
int64 labels. Everything is deterministic under the seed.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw

from core.errors import DataError
from core.services.base_service import BaseService, StatusCallback

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
CIFAR_CLASSES = 10
CIFAR_DIR = "cifar-10-batches-bin"
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

SIZE_DEFAULTS = {
    "synthetic-shapes": (2000, 500),
    "cifar10-subset": (5000, 1000),
}


@dataclass
class Dataset:
    name: str
    images: np.ndarray        # (N, C, H, W) in [0, 1]
    labels: np.ndarray        # (N,) int64
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, count: int) -> "Dataset":
        """The first ``count`` samples."""
        return Dataset(self.name, self.images[:count], self.labels[:count], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# ── Synthetic shapes ────────────────────────────────────────────────────

def _circle(draw: ImageDraw.ImageDraw, cx: float, cy: float, r: float, color: tuple) -> None:
    draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)


def _square(draw, cx, cy, r, color):
    draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=color)


def _triangle(draw, cx, cy, r, color):
    draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)


def _cross(draw, cx, cy, r, color):
    t = max(1.0, r / 3.0)
    draw.rectangle([cx - r, cy - t, cx + r, cy + t], fill=color)
    draw.rectangle([cx - t, cy - r, cx + t, cy + r], fill=color)


def _ring(draw, cx, cy, r, color):
    draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=color, width=max(1, int(r / 3)))


def _diamond(draw, cx, cy, r, color):
    draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=color)


def _hbar(draw, cx, cy, r, color):
    draw.rectangle([cx - r, cy - r / 3.0, cx + r, cy + r / 3.0], fill=color)


def _vbar(draw, cx, cy, r, color):
    draw.rectangle([cx - r / 3.0, cy - r, cx + r / 3.0, cy + r], fill=color)


SHAPES: List[Callable] = [_circle, _square, _triangle, _cross, _ring, _diamond, _hbar, _vbar]


def render_shape(label: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """One ``(3, side, side)`` image of shape class ``label``.

    Center, radius, foreground and background color are drawn from ``rng``;
    the two colors differ by at least 0.3 in mean intensity.
    """
    r = rng.uniform(0.18, 0.32) * side
    cx, cy = rng.uniform(r + 1, side - r - 1, size=2)
    bg = rng.uniform(0.0, 0.45, size=3)
    fg = np.clip(bg + rng.uniform(0.3, 0.55, size=3), 0.0, 1.0)
    if rng.random() < 0.5:
        bg, fg = 1.0 - bg, 1.0 - fg
    img = Image.new("RGB", (side, side), tuple(int(round(v * 255)) for v in bg))
    SHAPES[label](ImageDraw.Draw(img), float(cx), float(cy), float(r), tuple(int(round(v * 255)) for v in fg))
    arr = np.asarray(img, dtype=np.float64) / 255.0
    noise = rng.normal(0.0, 0.02, size=arr.shape)
    return np.clip(arr + noise, 0.0, 1.0).transpose(2, 0, 1)


def synthetic_shapes(count: int, num_classes: int, side: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Class-balanced (±1) shapes in a seeded random order."""
    if not 2 <= num_classes <= len(SHAPES):
        raise DataError(f"synthetic-shapes supports 2 to {len(SHAPES)} classes, got {num_classes}")
    if side < 8:
        raise DataError(f"synthetic-shapes needs images of at least 8×8, got {side}")
    labels = rng.permutation(np.arange(count) % num_classes)
    images = np.stack([render_shape(int(y), side, rng) for y in labels]) if count else np.zeros((0, 3, side, side))
    return images, labels.astype(np.int64)


# ── CIFAR-10 binary format ──────────────────────────────────────────────

def parse_cifar_records(raw: bytes, source: str) -> Tuple[np.ndarray, np.ndarray]:
    """Records of 1 label byte + 3072 channel-major pixel bytes, scaled by 1/255."""
    if len(raw) % CIFAR_RECORD:
        offset = len(raw) // CIFAR_RECORD * CIFAR_RECORD
        raise DataError(f"{source}: truncated record at byte offset {offset} "
                        f"({len(raw) - offset} of {CIFAR_RECORD} bytes)")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise DataError(f"{source}: label byte {labels[bad[0]]} out of range at byte offset {bad[0] * CIFAR_RECORD}")
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float64) / 255.0
    return images, labels


def read_cifar_files(root: Path, names: Tuple[str, ...]) -> Tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for name in names:
        path = root / name
        if not path.exists():
            raise DataError(f"missing CIFAR-10 batch file {path} (offset 0)")
        x, y = parse_cifar_records(path.read_bytes(), str(path))
        images.append(x)
        labels.append(y)
    return np.concatenate(images), np.concatenate(labels)


def stratified_indices(labels: np.ndarray, count: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` indices with per-class counts equal ±1, earlier classes taking the remainder."""
    base, extra = divmod(count, num_classes)
    chosen = []
    for c in range(num_classes):
        want = base + (1 if c < extra else 0)
        pool = np.flatnonzero(labels == c)
        if len(pool) < want:
            raise DataError(f"class {c} has {len(pool)} samples, {want} requested")
        chosen.append(rng.permutation(pool)[:want])
    return rng.permutation(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)


def _cifar_root(data_dir: Path) -> Path:
    nested = data_dir / CIFAR_DIR
    return nested if nested.is_dir() else data_dir


# ── Service ─────────────────────────────────────────────────────────────

class DatasetService(BaseService):
    """Loads the configured dataset; ``status_callback`` receives progress text."""

    def __init__(self, data_dir: Optional[Path] = None, status_callback: Optional[StatusCallback] = None):
        self.data_dir = Path(data_dir) if data_dir is not None else Path("data")
        super().__init__(status_callback)

    def load_dataset(
        self,
        name: str,
        seed: int,
        train_size: int = 0,
        eval_size: int = 0,
        num_classes: int = 4,
        image_size: int = 32,
    ) -> Tuple[Dataset, Dataset]:
        """(train split, eval split); sizes of 0 select the dataset defaults."""
        if name not in SIZE_DEFAULTS:
            raise DataError(f"unknown dataset '{name}'")
        default_train, default_eval = SIZE_DEFAULTS[name]
        train_size = train_size or default_train
        eval_size = eval_size or default_eval
        rng = np.random.default_rng(seed)
        if name == "synthetic-shapes":
            images, labels = synthetic_shapes(train_size + eval_size, num_classes, image_size, rng)
            train = Dataset(name, images[:train_size], labels[:train_size], num_classes)
            held = Dataset(name, images[train_size:], labels[train_size:], num_classes)
        else:
            if num_classes > CIFAR_CLASSES:
                raise DataError(f"cifar10-subset has {CIFAR_CLASSES} classes, {num_classes} requested")
            if image_size != CIFAR_SIDE:
                raise DataError(f"cifar10-subset images are {CIFAR_SIDE}×{CIFAR_SIDE}, {image_size} requested")
            root = _cifar_root(self.data_dir)
            x, y = read_cifar_files(root, CIFAR_TRAIN_FILES)
            idx = stratified_indices(y, train_size, num_classes, rng)
            train = Dataset(name, x[idx], y[idx], num_classes)
            x, y = read_cifar_files(root, (CIFAR_TEST_FILE,))
            idx = stratified_indices(y, eval_size, num_classes, rng)
            held = Dataset(name, x[idx], y[idx], num_classes)
        self._status(f"Loaded {name}: {len(train)} train / {len(held)} eval samples, {num_classes} classes.")
        return train, held


def load_dataset(name: str, seed: int, **kwargs) -> Tuple[Dataset, Dataset]:
    data_dir = kwargs.pop("data_dir", None)
    return DatasetService(data_dir).load_dataset(name, seed, **kwargs)
