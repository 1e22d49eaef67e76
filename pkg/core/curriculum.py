"""
Bit-width-aware curriculum: staged activation of lower bit-widths.

The highest configured bit-width trains from epoch 0; lower ones join at
stage boundaries. A joining variant is calibrated from the current master
weights, which is its warm start under shared weights. With
``ensemble = independent`` each bit-width owns a weight copy, initialized from
the nearest higher active variant.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.errors import CurriculumError
from core.models import ModelDef, VariantHandle, calibrate_variant
from core.quant import QuantSpec, calibrate, weight_key

logger = logging.getLogger(__name__)


class ScheduleMode(str, Enum):
    LINEAR = "linear"
    STAIRCASE = "staircase"


class EnsembleMode(str, Enum):
    SHARED = "shared"
    INDEPENDENT = "independent"


@dataclass(frozen=True)
class Stage:
    start_epoch: int
    bits_added: Tuple[int, ...]


@dataclass(frozen=True)
class CurriculumSchedule:
    total_epochs: int
    stages: Tuple[Stage, ...]
    mode: ScheduleMode = ScheduleMode.STAIRCASE

    def __post_init__(self):
        if not self.stages or self.stages[0].start_epoch != 0:
            raise CurriculumError("the first stage must start at epoch 0")
        starts = [s.start_epoch for s in self.stages]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise CurriculumError(f"stage starts must increase strictly, got {starts}")
        if starts[-1] >= self.total_epochs:
            raise CurriculumError(f"stage at epoch {starts[-1]} lies beyond {self.total_epochs} epochs")
        added = [b for s in self.stages for b in s.bits_added]
        if len(set(added)) != len(added):
            raise CurriculumError(f"a bit-width is added twice: {added}")

    @property
    def bits(self) -> Tuple[int, ...]:
        return tuple(sorted((b for s in self.stages for b in s.bits_added), reverse=True))

    def boundaries(self) -> List[int]:
        return [s.start_epoch for s in self.stages]

    def to_dict(self) -> dict:
        return {
            "total_epochs": self.total_epochs,
            "mode": self.mode.value,
            "stages": [{"start_epoch": s.start_epoch, "bits_added": list(s.bits_added)} for s in self.stages],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CurriculumSchedule":
        stages = tuple(Stage(int(s["start_epoch"]), tuple(int(b) for b in s["bits_added"])) for s in data["stages"])
        return cls(int(data["total_epochs"]), stages, ScheduleMode(data["mode"]))


def default_groups(bits: Sequence[int]) -> List[List[int]]:
    """Initial high-precision pair, then one bit-width per stage."""
    bits = list(bits)
    if len(bits) <= 2:
        return [bits]
    return [bits[:2]] + [[b] for b in bits[2:]]


def build_schedule(
    total_epochs: int,
    bits: Sequence[int],
    mode: ScheduleMode = ScheduleMode.STAIRCASE,
    groups: Optional[Sequence[Sequence[int]]] = None,
) -> CurriculumSchedule:
    """Split ``total_epochs`` across stages.

    Staircase splits evenly, giving the remainder to earlier stages, and
    accepts explicit ``groups``. Linear places one bit-width per boundary
    after the initial pair at ``floor(k * T / stages)``.
    """
    mode = ScheduleMode(mode)
    bits = [int(b) for b in bits]
    if not bits:
        raise CurriculumError("no bit-widths configured")
    if bits != sorted(bits, reverse=True) or len(set(bits)) != len(bits):
        raise CurriculumError(f"bit-widths must be distinct and sorted descending, got {bits}")
    if mode is ScheduleMode.LINEAR or groups is None:
        groups = default_groups(bits)
    groups = [[int(b) for b in g] for g in groups]
    if sorted((b for g in groups for b in g), reverse=True) != bits:
        raise CurriculumError(f"stage groups {groups} do not cover bit set {bits}")
    if bits[0] not in groups[0]:
        raise CurriculumError(f"the highest bit-width {bits[0]} must be active from epoch 0")
    n = len(groups)
    if total_epochs < n:
        raise CurriculumError(f"{total_epochs} epochs cannot hold {n} stages")
    if mode is ScheduleMode.STAIRCASE:
        base, extra = divmod(total_epochs, n)
        starts, epoch = [], 0
        for i in range(n):
            starts.append(epoch)
            epoch += base + (1 if i < extra else 0)
    else:
        starts = [k * total_epochs // n for k in range(n)]
    stages = tuple(Stage(s, tuple(g)) for s, g in zip(starts, groups))
    return CurriculumSchedule(total_epochs, stages, mode)


def active_bits(s: CurriculumSchedule, epoch: int) -> FrozenSet[int]:
    if not 0 <= epoch < s.total_epochs:
        raise CurriculumError(f"epoch {epoch} outside [0, {s.total_epochs})")
    return frozenset(b for stage in s.stages if stage.start_epoch <= epoch for b in stage.bits_added)


# ── Ensemble state ──────────────────────────────────────────────────────

@dataclass
class EnsembleState:
    """Master weights, per-bit specs and the active set of one training run."""
    model: ModelDef
    bit_set: Tuple[int, ...]
    weights: Dict[str, np.ndarray]
    ensemble: EnsembleMode = EnsembleMode.SHARED
    specs: Dict[int, Dict[str, QuantSpec]] = field(default_factory=dict)
    active: List[int] = field(default_factory=list)
    epoch: int = 0

    @classmethod
    def initialize(cls, model: ModelDef, bit_set: Sequence[int], rng: np.random.Generator,
                   ensemble: EnsembleMode = EnsembleMode.SHARED) -> "EnsembleState":
        ensemble = EnsembleMode(ensemble)
        bit_set = tuple(sorted((int(b) for b in bit_set), reverse=True))
        params = model.init_params(rng)
        state = cls(model, bit_set, {}, ensemble)
        state.weights = {state.param_key(bit_set[0], n): a for n, a in params.items()}
        return state

    def param_key(self, bits: int, name: str) -> str:
        return name if self.ensemble is EnsembleMode.SHARED else f"b{bits}/{name}"

    def owner(self, bits: int) -> int:
        """Bit-width whose weight copy ``bits`` reads."""
        if self.ensemble is EnsembleMode.SHARED:
            return self.bit_set[0]
        return bits if self.param_key(bits, self.model.weight_names[0]) in self.weights else self.bit_set[0]

    def weights_for(self, bits: int) -> Dict[str, np.ndarray]:
        owner = self.owner(bits)
        return {n: self.weights[self.param_key(owner, n)] for n in self.model.param_shapes()}

    def handle(self, bits: int) -> VariantHandle:
        return VariantHandle(self, bits)

    def variant(self, bits: int, calibration_batch: Optional[np.ndarray] = None) -> VariantHandle:
        """Handle for ``bits``, calibrating a detached copy when it is not yet calibrated."""
        if bits in self.specs:
            return self.handle(bits)
        specs = calibrate_variant(self.model, self.weights_for(bits), bits, calibration_batch)
        return VariantHandle(replace(self, specs={**self.specs, bits: specs}), bits)

    def refresh_weight_specs(self) -> None:
        """Recalibrate weight scales of every calibrated variant from current weights."""
        for bits, specs in self.specs.items():
            weights = self.weights_for(bits)
            for name in self.model.weight_names:
                specs[weight_key(name)] = calibrate(weights[name], bits)

    def recalibrate_activations(self, calibration_batch: np.ndarray) -> None:
        for bits in list(self.specs):
            self.specs[bits] = calibrate_variant(self.model, self.weights_for(bits), bits, calibration_batch)


def activate_bit(state: EnsembleState, bits: int, calibration_batch: Optional[np.ndarray] = None) -> EnsembleState:
    """Add ``bits`` to the active set with specs calibrated from the current weights."""
    if bits not in state.bit_set:
        raise CurriculumError(f"{bits}-bit is not in the configured bit set {state.bit_set}")
    if bits in state.active:
        raise CurriculumError(f"{bits}-bit is already active")
    if state.ensemble is EnsembleMode.INDEPENDENT and bits != state.owner(bits):
        higher = [b for b in state.active if b > bits]
        source = min(higher) if higher else state.bit_set[0]
        for name in state.model.param_shapes():
            state.weights[state.param_key(bits, name)] = np.array(state.weights[state.param_key(source, name)])
        logger.info("%d-bit weights initialized from the %d-bit copy", bits, source)
    state.specs[bits] = calibrate_variant(state.model, state.weights_for(bits), bits, calibration_batch)
    state.active = sorted(state.active + [bits], reverse=True)
    logger.info("activated %d-bit variant at epoch %d; active %s", bits, state.epoch, state.active)
    return state
