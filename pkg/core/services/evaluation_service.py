# core/services/evaluation_service.py
"""
Evaluation Service - Clean accuracy, patch transfer matrices and alignment reports.

All evaluations are read-only over an ensemble state restored from a
checkpoint. Requested bit-widths must have calibrated specs.
"""

from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.attacks import PatchSpec, apply_patch, success_rate, target_class_rate
from core.autodiff import backward
from core.curriculum import EnsembleState
from core.errors import QuantizationError
from core.models import VariantHandle, cross_entropy, forward_with_taps, predict
from core.perceptual import (
    HogParams,
    SoftBinarizeParams,
    cosine,
    cosine_similarity,
    hard_edge_iou,
    hard_hog_cosine,
    soft_dice,
    soft_edges,
    soft_hog,
)
from core.services.base_service import BaseService, StatusCallback
from core.services.patch_pool_service import is_seen
from core.tensor import GradientTape, const, leaf, no_grad

HARD_METRICS = ("cosine", "edge-iou", "hog-cosine")
SOFT_METRICS = ("soft-dice", "soft-hog-cosine")
GRADIENT_TAP = "input"


@dataclass
class TransferCell:
    patch_id: str
    source_bits: int
    target_bits: int
    asr: float
    robust_accuracy: float
    seen: bool


@dataclass
class SimilarityRecord:
    domain: str               # "features" | "gradients"
    tap: str
    bits_a: int
    bits_b: int
    metric: str
    value: float


@dataclass
class TransferReport:
    cells: List[TransferCell] = field(default_factory=list)
    clean_accuracy: Dict[int, float] = field(default_factory=dict)
    target_rate: Dict[int, float] = field(default_factory=dict)
    similarities: List[SimilarityRecord] = field(default_factory=list)
    targeted: bool = True

    def mean_asr(self, split: Optional[str] = None, cross_bit: bool = False) -> Dict[Tuple[int, int], float]:
        """Mean ASR per (source_bits, target_bits), optionally for one split."""
        groups: Dict[Tuple[int, int], List[float]] = {}
        for c in self.cells:
            if split == "seen" and not c.seen or split == "unseen" and c.seen:
                continue
            if cross_bit and c.source_bits == c.target_bits:
                continue
            groups.setdefault((c.source_bits, c.target_bits), []).append(c.asr)
        return {k: float(np.mean(v)) for k, v in sorted(groups.items())}

    def overall_asr(self, split: Optional[str] = None, cross_bit: bool = False) -> float:
        """Mean over cells (not over groups); NaN when no cell matches."""
        values = [c.asr for c in self.cells
                  if not (split == "seen" and not c.seen or split == "unseen" and c.seen)
                  and not (cross_bit and c.source_bits == c.target_bits)]
        return float(np.mean(values)) if values else float("nan")

    def similarity_matrix(self, domain: str, tap: str, metric: str, bits: Sequence[int]) -> np.ndarray:
        """Symmetric matrix over ``bits`` positions with ones on the diagonal."""
        n = len(bits)
        m = np.eye(n)
        index = {}
        for r in self.similarities:
            if (r.domain, r.tap, r.metric) == (domain, tap, metric):
                index[(r.bits_a, r.bits_b)] = r.value
        for i, j in combinations(range(n), 2):
            v = index.get((bits[i], bits[j]), index.get((bits[j], bits[i]), np.nan))
            m[i, j] = m[j, i] = v
        return m


class EvaluationService(BaseService):
    def __init__(self, status_callback: Optional[StatusCallback] = None):
        super().__init__(status_callback)

    @staticmethod
    def _handles(state: EnsembleState, bits: Sequence[int]) -> Dict[int, VariantHandle]:
        missing = [b for b in bits if b not in state.specs]
        if missing:
            raise QuantizationError(f"no quantization specs for bit-widths {missing}")
        return {b: state.handle(b) for b in bits}

    # ── Clean accuracy ──────────────────────────────────────────────────

    def evaluate_clean(self, state: EnsembleState, images: np.ndarray, labels: np.ndarray,
                       bits: Sequence[int]) -> Dict[int, float]:
        handles = self._handles(state, bits)
        labels = np.asarray(labels)
        out = {b: float(np.mean(predict(h, images) == labels)) for b, h in handles.items()}
        self._status("Clean accuracy: " + ", ".join(f"{b}b {a:.3f}" for b, a in out.items()))
        return out

    # ── Transfer ────────────────────────────────────────────────────────

    def transfer_matrix(
        self,
        state: EnsembleState,
        pool: Sequence[Tuple[str, PatchSpec]],
        images: np.ndarray,
        labels: np.ndarray,
        bits: Sequence[int],
        targeted: bool = True,
        training_signatures: Sequence[str] = (),
    ) -> TransferReport:
        """ASR of every (patch, target bit-width) pair, plus clean and target-class rates."""
        handles = self._handles(state, bits)
        labels = np.asarray(labels)
        report = TransferReport(targeted=targeted)
        clean_pred = {b: predict(h, images) for b, h in handles.items()}
        for b, pred in clean_pred.items():
            report.clean_accuracy[b] = float(np.mean(pred == labels))
        targets = sorted({p.target_class for _, p in pool if p.target_class is not None})
        if targets:
            # per target bit-width, rate of the first target class in the pool
            for b, h in handles.items():
                report.target_rate[b] = target_class_rate(h, images, targets[0], clean_pred[b])
        seen_set = set(training_signatures)
        for pid, p in pool:
            seen = is_seen(p, seen_set)
            for b, h in handles.items():
                adv_pred = predict(h, apply_patch(images, p))
                report.cells.append(TransferCell(
                    patch_id=pid,
                    source_bits=p.source_bits,
                    target_bits=b,
                    asr=success_rate(clean_pred[b], adv_pred, labels, targeted, p.target_class),
                    robust_accuracy=float(np.mean(adv_pred == labels)),
                    seen=seen,
                ))
        self._status(f"Transfer matrix: {len(pool)} patches × {len(handles)} bit-widths")
        return report

    # ── Alignment ───────────────────────────────────────────────────────

    def _collect(self, handles: Dict[int, VariantHandle], x: np.ndarray, y: np.ndarray,
                 taps: Sequence[str]) -> Dict[int, Tuple[Dict[str, np.ndarray], np.ndarray]]:
        """Per bit-width: tap features and the input gradient of the CE loss."""
        out = {}
        for b, h in handles.items():
            with GradientTape():
                xin = leaf(x, name="x")
                logits, tap_nodes = forward_with_taps(h, xin)
                grad = backward(cross_entropy(logits, y), wrt=[xin])[xin]
            out[b] = ({t: np.array(tap_nodes[t].value) for t in taps}, grad)
        return out

    @staticmethod
    def _pair_metrics(a: np.ndarray, b: np.ndarray, hog: HogParams, binarize: SoftBinarizeParams,
                      assignment: str) -> Dict[str, float]:
        """Batch means of every metric for ``(N, C, H, W)`` feature or gradient tensors."""
        ma, mb = a.mean(axis=1), b.mean(axis=1)
        raw = [cosine(a[i], b[i]) for i in range(len(a))]
        iou = [hard_edge_iou(ma[i], mb[i], binarize.q) for i in range(len(a))]
        hogc = [hard_hog_cosine(ma[i], mb[i], hog, assignment) for i in range(len(a))]
        with no_grad():
            dice = soft_dice(soft_edges(const(ma), binarize), soft_edges(const(mb), binarize)).value
            shog = cosine_similarity(soft_hog(const(ma), hog), soft_hog(const(mb), hog)).value
        return {
            "cosine": float(np.mean(raw)),
            "edge-iou": float(np.mean(iou)),
            "hog-cosine": float(np.mean(hogc)),
            "soft-dice": float(np.mean(dice)),
            "soft-hog-cosine": float(np.mean(shog)),
        }

    def alignment_report(
        self,
        state: EnsembleState,
        images: np.ndarray,
        labels: np.ndarray,
        bits: Sequence[int],
        taps: Optional[Sequence[str]] = None,
        patch: Optional[PatchSpec] = None,
        hog: HogParams = HogParams(),
        binarize: SoftBinarizeParams = SoftBinarizeParams(),
        assignment: str = "interpolate",
    ) -> TransferReport:
        """Pairwise similarity of tap features and input gradients across bit-widths.

        ``bits`` may repeat a bit-width; every unordered pair of positions is
        scored. Inputs are patched when ``patch`` is given.
        """
        if len(bits) < 2:
            raise QuantizationError(f"alignment needs at least two bit-widths, got {list(bits)}")
        handles = self._handles(state, sorted(set(bits), reverse=True))
        taps = list(taps if taps is not None else state.model.taps)
        x = apply_patch(images, patch) if patch is not None else np.asarray(images, dtype=np.float64)
        collected = self._collect(handles, x, np.asarray(labels), taps)
        report = TransferReport()
        for ba, bb in combinations(bits, 2):
            (fa, ga), (fb, gb) = collected[ba], collected[bb]
            domains = [("features", t, fa[t], fb[t]) for t in taps] + [("gradients", GRADIENT_TAP, ga, gb)]
            for domain, tap, a, b in domains:
                for metric, value in self._pair_metrics(a, b, hog, binarize, assignment).items():
                    report.similarities.append(SimilarityRecord(domain, tap, ba, bb, metric, value))
        self._status(f"Alignment report: {len(report.similarities)} similarity records")
        return report
