"""
Localized adversarial patches: placement, sign-gradient crafting and scoring.

``x_adv = x ⊙ (1 − M) + P ⊙ M`` with a rectangular binary mask ``M``.
Crafting runs projected sign-gradient ascent on the patch pixels against one
bit-width variant; the per-image family optimizes on the given images at a
fixed location, the universal family samples minibatches (and optionally a
random location per image) across the whole set.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from core import ops
from core.autodiff import backward
from core.errors import AttackError
from core.models import VariantHandle, cross_entropy, forward_with_taps, predict
from core.tensor import GradientTape, Node, const, leaf

logger = logging.getLogger(__name__)


class PatchFamily(str, Enum):
    PER_IMAGE = "per-image-targeted"
    UNIVERSAL = "universal"


_FAMILY_CODES = {PatchFamily.PER_IMAGE: "pi", PatchFamily.UNIVERSAL: "uni"}

Signature = Tuple[Tuple[int, int], Tuple[int, int], int]


@dataclass(frozen=True, eq=False)
class PatchSpec:
    pixels: np.ndarray                  # (C, h, w), values in [0, 1]
    location: Tuple[int, int]           # top-left (row, col)
    image_size: Tuple[int, int]         # (H, W) of the images the mask covers
    source_bits: int
    family: PatchFamily = PatchFamily.PER_IMAGE
    target_class: Optional[int] = None
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 3:
            raise AttackError(f"patch pixels must be (C, h, w), got shape {pixels.shape}")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise AttackError("patch pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "location", tuple(int(v) for v in self.location))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "family", PatchFamily(self.family))
        _check_bounds(self.location, self.size, self.image_size)

    @property
    def size(self) -> Tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]

    @property
    def signature(self) -> Signature:
        """What decides seen/unseen: (size, location, source_bits)."""
        return self.size, self.location, self.source_bits

    @property
    def patch_id(self) -> str:
        h, w = self.size
        row, col = self.location
        return f"{_FAMILY_CODES[self.family]}-{h}x{w}-r{row}c{col}-b{self.source_bits}"

    def mask(self) -> np.ndarray:
        m = np.zeros(self.image_size)
        (row, col), (h, w) = self.location, self.size
        m[row:row + h, col:col + w] = 1.0
        return m

    def canvas(self) -> np.ndarray:
        out = np.zeros((self.pixels.shape[0],) + self.image_size)
        (row, col), (h, w) = self.location, self.size
        out[:, row:row + h, col:col + w] = self.pixels
        return out


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = 100
    step_size: float = 0.05
    targeted: bool = True
    random_location: bool = False
    seed: int = 0
    target_class: int = 0
    family: PatchFamily = PatchFamily.PER_IMAGE
    batch_size: int = 32

    def __post_init__(self):
        if self.iterations < 1:
            raise AttackError(f"iterations must be at least 1, got {self.iterations}")
        if not self.step_size > 0:
            raise AttackError(f"step_size must be positive, got {self.step_size}")
        if self.batch_size < 1:
            raise AttackError(f"batch_size must be positive, got {self.batch_size}")
        object.__setattr__(self, "family", PatchFamily(self.family))


def _check_bounds(location: Tuple[int, int], size: Tuple[int, int], image_size: Tuple[int, int]) -> None:
    (row, col), (h, w), (hi, wi) = location, size, image_size
    if row < 0 or col < 0 or row + h > hi or col + w > wi:
        raise AttackError(f"{h}×{w} patch at ({row}, {col}) exceeds {hi}×{wi} image bounds")


def default_patch_size(side: int) -> int:
    return int(np.ceil(0.15 * side))


# ── Placement ───────────────────────────────────────────────────────────

def apply_patch(x: Union[np.ndarray, Node], p: PatchSpec) -> Union[np.ndarray, Node]:
    """Replace the pixels under the mask; everything outside is left untouched."""
    if x.shape[-2:] != p.image_size:
        _check_bounds(p.location, p.size, x.shape[-2:])
        raise AttackError(f"patch mask is {p.image_size} but images are {x.shape[-2:]}")
    if x.shape[-3] != p.pixels.shape[0]:
        raise AttackError(f"patch has {p.pixels.shape[0]} channels, images have {x.shape[-3]}")
    mask = p.mask()
    if isinstance(x, Node):
        return x * const(1.0 - mask) + const(p.canvas() * mask)
    return np.where(mask.astype(bool), p.canvas(), np.asarray(x, dtype=np.float64))


def _compose(x: Node, pixels: Node, locations: Sequence[Tuple[int, int]]) -> Node:
    """Differentiable placement of one pixel node at one location per image."""
    c, h, w = pixels.shape
    hi, wi = x.shape[-2:]
    key = lambda r, q: (slice(None), slice(r, r + h), slice(q, q + w))
    if len(set(locations)) == 1:
        row, col = locations[0]
        mask = np.zeros((hi, wi))
        mask[row:row + h, col:col + w] = 1.0
        return x * const(1.0 - mask) + ops.scatter(pixels, key(row, col), (c, hi, wi))
    masks = np.zeros((len(locations), 1, hi, wi))
    canvases = []
    for i, (row, col) in enumerate(locations):
        masks[i, 0, row:row + h, col:col + w] = 1.0
        canvases.append(ops.reshape(ops.scatter(pixels, key(row, col), (c, hi, wi)), (1, c, hi, wi)))
    return x * const(1.0 - masks) + ops.concat(canvases, axis=0)


# ── Crafting ────────────────────────────────────────────────────────────

def craft_patch(
    variant: VariantHandle,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: AttackConfig,
    size: Union[int, Tuple[int, int]],
    location: Tuple[int, int],
) -> PatchSpec:
    """Projected sign-gradient ascent on the patch pixels of one variant."""
    num_classes = variant.model.num_classes
    if cfg.targeted and not 0 <= cfg.target_class < num_classes:
        raise AttackError(f"target class {cfg.target_class} outside [0, {num_classes})")
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise AttackError("cannot craft a patch without images")
    h, w = (size, size) if isinstance(size, (int, np.integer)) else tuple(size)
    if h < 1 or w < 1:
        raise AttackError(f"patch size must be positive, got {h}×{w}")
    channels, hi, wi = images.shape[1:]
    location = (int(location[0]), int(location[1]))
    _check_bounds(location, (h, w), (hi, wi))

    rng = np.random.default_rng(cfg.seed)
    pixels = rng.uniform(0.0, 1.0, size=(channels, h, w))
    params = {n: const(a) for n, a in variant.weights().items()}
    universal = cfg.family is PatchFamily.UNIVERSAL

    for _ in range(cfg.iterations):
        if universal:
            idx = rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
        else:
            idx = np.arange(len(images))
        if universal and cfg.random_location:
            rows = rng.integers(0, hi - h + 1, size=len(idx))
            cols = rng.integers(0, wi - w + 1, size=len(idx))
            locations = [(int(r), int(q)) for r, q in zip(rows, cols)]
        else:
            locations = [location]
        with GradientTape():
            p = leaf(pixels, name="patch")
            logits, _ = forward_with_taps(variant, _compose(const(images[idx]), p, locations), params)
            if cfg.targeted:
                objective = -cross_entropy(logits, np.full(len(idx), cfg.target_class))
            else:
                objective = cross_entropy(logits, labels[idx])
            grad = backward(objective, wrt=[p])[p]
        pixels = np.clip(pixels + cfg.step_size * np.sign(grad), 0.0, 1.0)

    logger.debug("crafted %s patch %d×%d at %s on %d-bit", cfg.family.value, h, w, location, variant.bits)
    return PatchSpec(
        pixels=pixels,
        location=location,
        image_size=(hi, wi),
        source_bits=variant.bits,
        family=cfg.family,
        target_class=cfg.target_class if cfg.targeted else None,
        metadata={
            "iterations": cfg.iterations,
            "step_size": cfg.step_size,
            "seed": cfg.seed,
            "random_location": cfg.random_location,
            "targeted": cfg.targeted,
        },
    )


# ── Scoring ─────────────────────────────────────────────────────────────

def success_rate(clean_pred: np.ndarray, adv_pred: np.ndarray, labels: np.ndarray,
                 targeted: bool, target_class: Optional[int] = None) -> float:
    """ASR over the clean-correct subset; 0 when that subset is empty."""
    correct = clean_pred == labels
    if not correct.any():
        return 0.0
    if targeted:
        if target_class is None:
            raise AttackError("targeted success rate requires a target class")
        hits = adv_pred[correct] == target_class
    else:
        hits = adv_pred[correct] != labels[correct]
    return float(hits.mean())


def attack_success_rate(variant: VariantHandle, images: np.ndarray, labels: np.ndarray,
                        p: PatchSpec, targeted: bool, clean_pred: Optional[np.ndarray] = None) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if clean_pred is None:
        clean_pred = predict(variant, images)
    adv_pred = predict(variant, apply_patch(images, p))
    return success_rate(clean_pred, adv_pred, labels, targeted, p.target_class)


def robust_accuracy(variant: VariantHandle, images: np.ndarray, labels: np.ndarray, p: PatchSpec) -> float:
    """Top-1 accuracy on patched inputs."""
    return float(np.mean(predict(variant, apply_patch(images, p)) == np.asarray(labels)))


def target_class_rate(variant: VariantHandle, images: np.ndarray, target_class: int,
                      clean_pred: Optional[np.ndarray] = None) -> float:
    """Fraction of clean inputs already predicted as ``target_class``."""
    if clean_pred is None:
        clean_pred = predict(variant, images)
    return float(np.mean(clean_pred == target_class))
