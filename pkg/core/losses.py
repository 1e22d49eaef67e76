"""
Disalignment penalties across bit-width variants and the total training loss.

Both penalties sum, over unordered bit pairs (and, for features, over taps),
``alpha * SoftDice(edges_i, edges_j) + beta * cos(HOG_i, HOG_j)`` averaged over
the batch. Maps are channel-averaged first. Each pair is counted once.
"""

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Mapping, Sequence, Tuple

from core import ops
from core.errors import LossError
from core.perceptual import (
    HogParams,
    SoftBinarizeParams,
    channel_mean,
    cosine_similarity,
    soft_dice,
    soft_edges,
    soft_hog,
)
from core.tensor import Node, const

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 1.0
    lambda_fdp: float = 0.8
    lambda_gpdp: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_fdp", "lambda_gpdp"):
            if getattr(self, name) < 0:
                raise LossError(f"loss weight {name} must be non-negative, got {getattr(self, name)}")


@dataclass(frozen=True)
class LayerTapSet:
    """Ordered, unique tap names."""
    names: Tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise LossError(f"duplicate tap names in {self.names}")

    def __iter__(self):
        return iter(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def resolve(self, taps: Mapping[str, Node]) -> Dict[str, Node]:
        missing = [n for n in self.names if n not in taps]
        if missing:
            raise LossError(f"taps {missing} not produced by the forward pass")
        return {n: taps[n] for n in self.names}


@dataclass(frozen=True)
class PerceptualParams:
    binarize: SoftBinarizeParams = SoftBinarizeParams()
    hog: HogParams = HogParams()


def bit_pairs(bits: Sequence[int]) -> List[Tuple[int, int]]:
    """Unordered pairs in canonical (descending-bits) order."""
    return list(combinations(sorted(bits, reverse=True), 2))


def _summaries(maps: Mapping[int, Node], params: PerceptualParams) -> Dict[int, Tuple[Node, Node]]:
    out = {}
    for bits in sorted(maps, reverse=True):
        m = maps[bits]
        if m.ndim == 4:
            m = channel_mean(m)
        out[bits] = (soft_edges(m, params.binarize), soft_hog(m, params.hog))
    return out


def _pair_term(a: Tuple[Node, Node], b: Tuple[Node, Node], w: LossWeights) -> Node:
    dice = soft_dice(a[0], b[0])
    cos = cosine_similarity(a[1], b[1])
    return ops.reduce_mean(dice * w.alpha + cos * w.beta)


def disalignment(maps: Mapping[int, Node], w: LossWeights, params: PerceptualParams = PerceptualParams()) -> Node:
    """Sum of per-pair terms over all unordered pairs of ``maps``."""
    if len(maps) < 2:
        raise LossError(f"disalignment needs at least two bit-widths, got {sorted(maps)}")
    shapes = {m.shape for m in maps.values()}
    if len(shapes) != 1:
        raise LossError(f"maps for different bit-widths differ in shape: {sorted(shapes)}")
    summaries = _summaries(maps, params)
    total = None
    for bi, bj in bit_pairs(maps):
        term = _pair_term(summaries[bi], summaries[bj], w)
        total = term if total is None else total + term
    return total


def fdp_loss(features: Mapping[Tuple[int, str], Node], w: LossWeights,
             params: PerceptualParams = PerceptualParams()) -> Node:
    """Feature disalignment over taps and bit pairs; features keyed by (bits, tap)."""
    bits = sorted({b for b, _ in features}, reverse=True)
    if len(bits) < 2:
        raise LossError(f"fdp_loss needs at least two bit-widths, got {bits}")
    taps = sorted({t for _, t in features})
    total = None
    for tap in taps:
        missing = [b for b in bits if (b, tap) not in features]
        if missing:
            raise LossError(f"tap '{tap}' missing for bit-widths {missing}")
        term = disalignment({b: features[(b, tap)] for b in bits}, w, params)
        total = term if total is None else total + term
    return total


def gpdp_loss(grads: Mapping[int, Node], w: LossWeights,
              params: PerceptualParams = PerceptualParams()) -> Node:
    """Gradient disalignment; every gradient must live on an active tape."""
    for bits, g in grads.items():
        if g.tape is None or not g.tape.active:
            raise LossError(f"input gradient for {bits}-bit is not on an active tape")
    return disalignment(grads, w, params)


def fdp_term_count(num_bits: int, num_taps: int) -> int:
    return num_bits * (num_bits - 1) // 2 * num_taps


def gpdp_pair_count(num_bits: int) -> int:
    return num_bits * (num_bits - 1) // 2


def total_loss(clean_ce: Mapping[int, Node], fdp: Node, gpdp: Node, w: LossWeights) -> Node:
    """Σ_b CE_b + λ_fdp · fdp + λ_gpdp · gpdp."""
    if not clean_ce:
        raise LossError("total_loss needs at least one clean CE term")
    clean = None
    for bits in sorted(clean_ce, reverse=True):
        clean = clean_ce[bits] if clean is None else clean + clean_ce[bits]
    fdp = fdp if fdp is not None else const(0.0)
    gpdp = gpdp if gpdp is not None else const(0.0)
    if w.lambda_fdp == 0 and w.lambda_gpdp == 0:
        return clean
    return clean + fdp * w.lambda_fdp + gpdp * w.lambda_gpdp
