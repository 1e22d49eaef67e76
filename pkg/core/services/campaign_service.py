# core/services/campaign_service.py
"""
Campaign Service - Multi-run experiments: ablations and loss-weight sweeps.

Every run of a campaign shares the seed, the data and the evaluation
protocol: train, craft an evaluation pool on the trained model over the
training-pool triples (seen) and the configured unseen triples, then score
the transfer matrix on held-out images.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.attacks import PatchSpec
from core.config import RunConfig
from core.curriculum import EnsembleState
from core.services.base_service import BaseService, StatusCallback
from core.services.checkpoint_service import CheckpointService
from core.services.dataset_service import Dataset
from core.services.evaluation_service import EvaluationService, TransferReport
from core.services.patch_pool_service import PatchPoolService, unique_ids
from core.services.training_service import TrainingResult, TrainingService

ABLATION_VARIANTS = (
    ("full", "triqdef"),
    ("w/o FDP", "triqdef-no-fdp"),
    ("w/o GPDP", "triqdef-no-gpdp"),
)


def craft_evaluation_pool(cfg: RunConfig, state: EnsembleState, train: Dataset,
                          status_callback: Optional[StatusCallback] = None) -> List[Tuple[str, PatchSpec]]:
    """Seen-triple and unseen-triple patches crafted on ``state``, with unique ids."""
    rng = np.random.default_rng([cfg.seed, 2])
    order = rng.permutation(len(train))
    calibration = train.images[:cfg.data["calibration_samples"]]
    triples = cfg.pool_triples("train") + cfg.pool_triples("unseen")
    pool = PatchPoolService(status_callback).craft_pool(
        state, train.images[order], train.labels[order], triples,
        cfg.attack_config(seed=cfg.seed + 1000), cfg.attack["craft_samples"], calibration,
    )
    return list(zip(unique_ids(pool), pool))


@dataclass
class RunOutcome:
    tag: str
    training: TrainingResult
    transfer: TransferReport


class CampaignService(BaseService):
    def __init__(self, cfg: RunConfig, train: Dataset, held: Dataset, out_dir: Path,
                 status_callback: Optional[StatusCallback] = None, progress: Optional[bool] = None):
        self.cfg = cfg
        self.train = train
        self.held = held.subset(cfg.eval["samples"])
        self.out_dir = Path(out_dir)
        super().__init__(status_callback)
        self.progress = progress
        self.checkpoints = CheckpointService()
        self.evaluation = EvaluationService(status_callback)

    def run(self, tag: str, cfg: RunConfig) -> RunOutcome:
        """Train one configuration and score its evaluation pool."""
        self._status(f"Campaign run '{tag}' ({cfg.mode})")
        run_dir = self.out_dir / tag.replace("/", "-").replace(" ", "_")
        result = TrainingService(cfg, self.status_callback, self.progress).train(self.train, run_dir)
        self.checkpoints.save(result.checkpoint, run_dir / "checkpoint.tqc")
        pool = craft_evaluation_pool(cfg, result.state, self.train, self.status_callback)
        report = self.evaluation.transfer_matrix(
            result.state, pool, self.held.images, self.held.labels, cfg.eval_bits,
            targeted=cfg.eval["targeted"], training_signatures=result.checkpoint.train_signatures,
        )
        return RunOutcome(tag, result, report)

    def ablate(self) -> List[Dict]:
        """One row per (variant, split): full / w/o FDP / w/o GPDP × seen / unseen."""
        rows = []
        for label, mode in ABLATION_VARIANTS:
            outcome = self.run(label, self.cfg.copy(run={"mode": mode}))
            clean = float(np.mean(list(outcome.transfer.clean_accuracy.values())))
            for split in ("seen", "unseen"):
                rows.append({
                    "variant": label,
                    "split": split,
                    "cross_bit_asr": outcome.transfer.overall_asr(split, cross_bit=True),
                    "asr": outcome.transfer.overall_asr(split),
                    "mean_clean_accuracy": clean,
                })
        return rows

    def sweep_grid(self) -> List[Tuple[str, Dict[str, float]]]:
        loss, sweep = self.cfg.loss, self.cfg.sweep
        grid = [("alpha-beta", {"alpha": a, "beta": b, "lambda_fdp": loss["lambda_fdp"],
                                "lambda_gpdp": loss["lambda_gpdp"]}) for a, b in sweep["alpha_beta"]]
        grid += [("lambdas", {"alpha": loss["alpha"], "beta": loss["beta"], "lambda_fdp": f,
                              "lambda_gpdp": g}) for f, g in sweep["lambdas"]]
        return grid

    def sweep(self) -> List[Dict]:
        """Clean and patched accuracy per bit-width for every grid point."""
        rows = []
        epochs = self.cfg.sweep["epochs"] or self.cfg.run["epochs"]
        for i, (grid, weights) in enumerate(self.sweep_grid()):
            cfg = self.cfg.copy(run={"mode": "triqdef", "epochs": epochs}, loss=weights)
            outcome = self.run(f"sweep-{i:02d}-{grid}", cfg)
            for bits in cfg.eval_bits:
                adv = [c.robust_accuracy for c in outcome.transfer.cells if c.target_bits == bits]
                rows.append({
                    "grid": grid,
                    **weights,
                    "bits": bits,
                    "clean_accuracy": outcome.transfer.clean_accuracy[bits],
                    "adv_accuracy": float(np.mean(adv)) if adv else float("nan"),
                })
        return rows
