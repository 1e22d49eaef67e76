# core/services/training_service.py
"""
Training Service - Joint multi-bit training with feature and gradient disalignment.

One step: sample a batch and a patch from the training pool, build the
patched batch, then per active bit-width compute the clean CE, the tap
features and the input gradient on the patched batch. The total loss

    Σ_b CE_b + λ_fdp · FDP + λ_gpdp · GPDP

is backpropagated (second order through GPDP) into the master weights and
one SGD step is taken. Each epoch consults the curriculum, activates new
bit-widths and recalibrates activation scales.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from core.attacks import PatchSpec, apply_patch
from core.autodiff import backward, grad_as_node
from core.config import RunConfig
from core.curriculum import EnsembleState, active_bits, activate_bit
from core.errors import AttackError, CheckpointError, NumericalError
from core.losses import fdp_loss, fdp_term_count, gpdp_loss, gpdp_pair_count, total_loss
from core.models import ModelDef, build_model, clean_ce, cross_entropy, forward_with_taps
from core.services.base_service import BaseService, StatusCallback
from core.services.checkpoint_service import Checkpoint
from core.services.dataset_service import Dataset
from core.services.patch_pool_service import PatchPoolService, signature_key
from core.tensor import GradientTape, leaf


def build_run_model(cfg: RunConfig) -> ModelDef:
    side = cfg.data["image_size"]
    return build_model(cfg.run["architecture"], cfg.data["num_classes"], (3, side, side))


class SGD:
    """Momentum SGD with coupled weight decay and step decay of the learning rate."""

    def __init__(self, lr: float, momentum: float, weight_decay: float,
                 decay_at: Sequence[float], decay_factor: float, total_epochs: int):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.milestones = sorted(int(f * total_epochs) for f in decay_at)
        self.decay_factor = decay_factor
        self.velocity: Dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "SGD":
        o = cfg.optimizer
        return cls(o["lr"], o["momentum"], o["weight_decay"], o["decay_at"], o["decay_factor"], cfg.run["epochs"])

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** sum(1 for m in self.milestones if epoch >= m)

    def step(self, weights: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], epoch: int) -> None:
        lr = self.lr_at(epoch)
        for key, g in grads.items():
            g = g + self.weight_decay * weights[key]
            v = self.velocity.get(key)
            v = g if v is None else self.momentum * v + g
            self.velocity[key] = v
            weights[key] = weights[key] - lr * v


@dataclass
class StepRecord:
    step: int
    epoch: int
    active_bits: List[int]
    l_clean: float
    l_fdp: float
    l_gpdp: float
    l_total: float
    fdp_terms: int
    gpdp_pairs: int
    l_patch: float = 0.0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class TrainingResult:
    checkpoint: Checkpoint
    state: EnsembleState
    history: List[Dict[str, float]] = field(default_factory=list)


class TrainingService(BaseService):
    """Runs one configured training; ``status_callback`` receives per-epoch summaries."""

    def __init__(self, cfg: RunConfig, status_callback: Optional[StatusCallback] = None,
                 progress: Optional[bool] = None):
        self.cfg = cfg
        super().__init__(status_callback)
        self.progress = progress
        self.weights = cfg.loss_weights()
        self.params = cfg.perceptual_params()
        self.pool_service = PatchPoolService(status_callback)

    # ── Pool ────────────────────────────────────────────────────────────

    def craft_training_pool(self, state: EnsembleState, train: Dataset, calibration: np.ndarray) -> List[PatchSpec]:
        cfg = self.cfg
        triples = cfg.pool_triples("train")
        rng = np.random.default_rng([cfg.seed, 1])
        order = rng.permutation(len(train))
        pool = self.pool_service.craft_pool(
            state, train.images[order], train.labels[order], triples,
            cfg.attack_config(), cfg.attack["craft_samples"], calibration,
        )
        if not pool:
            raise AttackError(f"patch pool is empty in mode {cfg.mode}")
        return pool

    # ── Step ────────────────────────────────────────────────────────────

    def _step_loss(self, state: EnsembleState, xb: np.ndarray, yb: np.ndarray, patch: Optional[PatchSpec]):
        """Total loss node, the leaves it differentiates and the logged components."""
        w, active = self.weights, list(state.active)
        mode = self.cfg.mode
        params = {key: leaf(arr, name=key) for key, arr in state.weights.items()}
        x_adv = apply_patch(xb, patch) if patch is not None else None
        penalized = x_adv is not None and len(active) >= 2 and (w.lambda_fdp > 0 or w.lambda_gpdp > 0)
        adv_leaf = leaf(x_adv, name="x_adv") if penalized else None

        ces, features, grads = {}, {}, {}
        l_clean = 0.0
        l_patch = None
        for bits in active:
            handle = state.handle(bits)
            owner = state.owner(bits)
            bparams = {n: params[state.param_key(owner, n)] for n in state.model.param_shapes()}
            ces[bits] = clean_ce(handle, xb, yb, bparams)
            l_clean += float(ces[bits].value)
            if mode == "patch-augmented" and x_adv is not None:
                ce_adv = clean_ce(handle, x_adv, yb, bparams)
                ces[bits] = ces[bits] + ce_adv
                l_patch = ce_adv if l_patch is None else l_patch + ce_adv
            if adv_leaf is not None:
                logits, taps = forward_with_taps(handle, adv_leaf, bparams)
                for tap, node in taps.items():
                    features[(bits, tap)] = node
                if w.lambda_gpdp > 0:
                    grads[bits] = grad_as_node(cross_entropy(logits, yb), adv_leaf)

        fdp = fdp_loss(features, w, self.params) if features and w.lambda_fdp > 0 else None
        gpdp = gpdp_loss(grads, w, self.params) if len(grads) >= 2 else None
        total = total_loss(ces, fdp, gpdp, w)
        n_taps = len(state.model.taps)
        record = dict(
            l_clean=l_clean,
            l_fdp=float(fdp.value) if fdp is not None else 0.0,
            l_gpdp=float(gpdp.value) if gpdp is not None else 0.0,
            l_total=float(total.value),
            fdp_terms=fdp_term_count(len(active), n_taps) if fdp is not None else 0,
            gpdp_pairs=gpdp_pair_count(len(grads)) if gpdp is not None else 0,
            l_patch=float(l_patch.value) if l_patch is not None else 0.0,
        )
        if fdp is not None and len(features) != len(active) * n_taps:
            raise NumericalError(f"expected {len(active) * n_taps} tap features, got {len(features)}")
        return total, params, record

    # ── Loop ────────────────────────────────────────────────────────────

    def train(
        self,
        train: Dataset,
        out_dir: Optional[Path] = None,
        resume: Optional[Checkpoint] = None,
        stop_after_epoch: Optional[int] = None,
    ) -> TrainingResult:
        cfg = self.cfg
        schedule = cfg.schedule()
        total_epochs = cfg.run["epochs"]
        end_epoch = total_epochs if stop_after_epoch is None else min(stop_after_epoch, total_epochs)
        rng = np.random.default_rng(cfg.seed)
        model = build_run_model(cfg)
        state = EnsembleState.initialize(model, cfg.bits, rng, cfg.run["ensemble"])
        optimizer = SGD.from_config(cfg)
        calibration = train.images[:cfg.data["calibration_samples"]]
        pool: List[PatchSpec] = []
        step = 0

        if resume is not None:
            if resume.config != cfg.to_dict():
                raise CheckpointError("checkpoint was written by a different run configuration")
            state.weights = {k: np.array(v) for k, v in resume.weights.items()}
            state.specs = {b: dict(s) for b, s in resume.specs.items()}
            state.active = list(resume.active)
            state.epoch = resume.epoch
            optimizer.velocity = {k: np.array(v) for k, v in resume.velocity.items()}
            rng.bit_generator.state = resume.rng_state
            pool = list(resume.pool)
            step = resume.step
            self._status(f"Resuming at epoch {resume.epoch}, step {step}")
        start_epoch = state.epoch

        metrics = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            metrics = open(out_dir / "metrics.ndjson", "a" if resume is not None else "w", encoding="utf-8")

        history: List[Dict[str, float]] = []
        craft_epoch = cfg.attack["pool_warmup_epochs"]
        if cfg.uses_patches and not pool and craft_epoch >= total_epochs:
            raise AttackError(f"patch pool would be crafted after the last epoch in mode {cfg.mode}")
        try:
            disable = None if self.progress is None else not self.progress
            for epoch in tqdm(range(start_epoch, end_epoch), desc="epochs", disable=disable,
                              initial=start_epoch, total=total_epochs):
                state.epoch = epoch
                for bits in sorted(active_bits(schedule, epoch) - set(state.active), reverse=True):
                    activate_bit(state, bits, calibration)
                state.recalibrate_activations(calibration)
                if cfg.uses_patches and (not pool and epoch >= craft_epoch or
                                         cfg.attack["refresh_pool"] and epoch > craft_epoch and
                                         epoch in schedule.boundaries()):
                    pool = self.craft_training_pool(state, train, calibration)

                sums: Dict[str, float] = {}
                batches = 0
                perm = rng.permutation(len(train))
                for start in range(0, len(perm), cfg.run["batch_size"]):
                    idx = perm[start:start + cfg.run["batch_size"]]
                    patch = pool[int(rng.integers(len(pool)))] if pool else None
                    state.refresh_weight_specs()
                    with GradientTape():
                        total, params, record = self._step_loss(state, train.images[idx], train.labels[idx], patch)
                        if not np.isfinite(record["l_total"]):
                            raise NumericalError(
                                f"non-finite loss at step {step}, epoch {epoch}, active {state.active}: "
                                + ", ".join(f"{k}={v}" for k, v in record.items())
                            )
                        grads = backward(total, wrt=list(params.values()))
                    optimizer.step(state.weights, {k: grads[n] for k, n in params.items()}, epoch)
                    entry = StepRecord(step=step, epoch=epoch, active_bits=list(state.active), **record)
                    if metrics is not None:
                        metrics.write(entry.to_json() + "\n")
                    for k in ("l_clean", "l_fdp", "l_gpdp", "l_total"):
                        sums[k] = sums.get(k, 0.0) + record[k]
                    batches += 1
                    step += 1
                summary = {k: v / max(batches, 1) for k, v in sums.items()}
                summary["epoch"] = epoch
                history.append(summary)
                self._status(
                    f"Epoch {epoch + 1}/{total_epochs} active {state.active} lr {optimizer.lr_at(epoch):g} "
                    f"clean {summary.get('l_clean', 0.0):.4f} fdp {summary.get('l_fdp', 0.0):.4f} "
                    f"gpdp {summary.get('l_gpdp', 0.0):.4f}"
                )
                state.epoch = epoch + 1
        finally:
            if metrics is not None:
                metrics.close()

        state.refresh_weight_specs()
        ckpt = Checkpoint(
            config=cfg.to_dict(),
            weights={k: np.array(v) for k, v in state.weights.items()},
            specs={b: dict(s) for b, s in state.specs.items()},
            active=list(state.active),
            epoch=state.epoch,
            step=step,
            velocity={k: np.array(v) for k, v in optimizer.velocity.items()},
            rng_state=rng.bit_generator.state,
            schedule=schedule.to_dict(),
            pool=pool,
            train_signatures=sorted({signature_key(p.signature) for p in pool}),
        )
        return TrainingResult(ckpt, state, history)
