# app/controller.py
"""Experiment Controller - Orchestrates services for each CLI subcommand."""
import logging
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from core.attacks import PatchSpec
from core.config import RunConfig
from core.errors import ConfigError, DataError, TriQDefError
from core.services.campaign_service import CampaignService, craft_evaluation_pool
from core.services.checkpoint_service import Checkpoint, CheckpointService
from core.services.dataset_service import Dataset, DatasetService
from core.services.evaluation_service import HARD_METRICS, SOFT_METRICS, EvaluationService
from core.services.patch_pool_service import PatchPoolService, decode_patch
from core.services.report_service import ReportService
from core.services.training_service import TrainingService
from core.utils import save_heatmap

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.tqc"


class ExperimentController:
    """Runs one subcommand; returns a process exit code and never raises."""

    def __init__(self, seed: Optional[int] = None, progress: Optional[bool] = None,
                 status_callback: Optional[Callable[[str], None]] = None):
        self.seed = seed
        self.progress = progress
        self.status_callback = status_callback
        self.checkpoints = CheckpointService()
        self.pools = PatchPoolService(self.status_callback)
        self.evaluation = EvaluationService(self.status_callback)

    def dispatch(self, command: str, args) -> int:
        handlers: Dict[str, Callable] = {
            "train": self.handle_train,
            "craft-pool": self.handle_craft_pool,
            "eval-clean": self.handle_eval_clean,
            "transfer": self.handle_transfer,
            "align": self.handle_align,
            "ablate": self.handle_ablate,
            "sweep": self.handle_sweep,
        }
        if command not in handlers:
            logger.error("unknown subcommand '%s'", command)
            return 1
        try:
            handlers[command](args)
            return 0
        except TriQDefError as e:
            logger.error("%s: %s", type(e).__name__, e)
            return e.exit_code
        except Exception:
            logger.exception("unexpected failure in '%s'", command)
            return 1

    # --- Loading helpers ---

    def _config(self, path: str) -> RunConfig:
        return RunConfig(path, seed=self.seed)

    def _checkpoint(self, path: str) -> Tuple[Checkpoint, RunConfig]:
        ckpt = self.checkpoints.load(Path(path))
        cfg = ckpt.run_config()
        if self.seed is not None:
            cfg = cfg.copy(run={"seed": self.seed})
        return ckpt, cfg

    def _datasets(self, cfg: RunConfig) -> Tuple[Dataset, Dataset]:
        data = cfg.data
        return DatasetService(cfg.data_dir(), self.status_callback).load_dataset(
            data["dataset"], cfg.seed, data["train_size"], data["eval_size"], data["num_classes"], data["image_size"],
        )

    @staticmethod
    def _patch(path: str) -> PatchSpec:
        if not Path(path).exists():
            raise DataError(f"missing patch container {path}")
        return decode_patch(Path(path).read_bytes(), path)

    @staticmethod
    def _out_dir(args, default: Path) -> Path:
        return Path(args.out) if getattr(args, "out", None) else default

    @staticmethod
    def _bits(args, cfg: RunConfig):
        if getattr(args, "bits", None):
            return sorted((int(b) for b in args.bits.split(",")), reverse=True)
        return cfg.eval_bits

    # --- Handlers ---

    def handle_train(self, args) -> None:
        cfg = self._config(args.config)
        out = self._out_dir(args, Path(cfg.run["out_dir"]) / Path(args.config).stem)
        resume = self.checkpoints.load(Path(args.resume)) if args.resume else None
        train, _ = self._datasets(cfg)
        result = TrainingService(cfg, self.status_callback, self.progress).train(
            train, out, resume=resume, stop_after_epoch=args.stop_after_epoch,
        )
        cfg.save(str(out / "config.cfg"))
        self.checkpoints.save(result.checkpoint, out / CHECKPOINT_NAME)
        if result.checkpoint.pool:
            self.pools.save_pool(result.checkpoint.pool, out / "train_pool",
                                 training_signatures=set(result.checkpoint.train_signatures))

    def handle_craft_pool(self, args) -> None:
        cfg = self._config(args.config)
        source = args.ckpt or cfg.attack["surrogate_checkpoint"]
        if not source:
            raise ConfigError("craft-pool needs --ckpt or [attack] surrogate_checkpoint")
        ckpt = self.checkpoints.load(Path(source))
        train, _ = self._datasets(cfg)
        pool = craft_evaluation_pool(cfg, ckpt.to_state(), train, self.status_callback)
        self.pools.save_pool([p for _, p in pool], Path(args.out), training_signatures=set(ckpt.train_signatures))

    def handle_eval_clean(self, args) -> None:
        ckpt, cfg = self._checkpoint(args.ckpt)
        _, held = self._datasets(cfg)
        held = held.subset(cfg.eval["samples"])
        accuracy = self.evaluation.evaluate_clean(ckpt.to_state(), held.images, held.labels, self._bits(args, cfg))
        ReportService(self._out_dir(args, Path(args.ckpt).parent / "reports"), self.status_callback) \
            .clean_accuracy(accuracy)

    def handle_transfer(self, args) -> None:
        ckpt, cfg = self._checkpoint(args.ckpt)
        _, held = self._datasets(cfg)
        held = held.subset(cfg.eval["samples"])
        pool = self.pools.load_pool(Path(args.pool))
        targeted = cfg.eval["targeted"] and not args.untargeted
        report = self.evaluation.transfer_matrix(
            ckpt.to_state(), pool, held.images, held.labels, self._bits(args, cfg),
            targeted=targeted, training_signatures=ckpt.train_signatures,
        )
        ReportService(self._out_dir(args, Path(args.ckpt).parent / "reports"), self.status_callback).transfer(report)

    def handle_align(self, args) -> None:
        ckpt, cfg = self._checkpoint(args.ckpt)
        _, held = self._datasets(cfg)
        held = held.subset(cfg.eval["align_samples"])
        patch = self._patch(args.patch) if args.patch else None
        bits = self._bits(args, cfg)
        state = ckpt.to_state()
        params = cfg.perceptual_params()
        report = self.evaluation.alignment_report(
            state, held.images, held.labels, bits, patch=patch,
            hog=params.hog, binarize=params.binarize, assignment=cfg.eval["hog_assignment"],
        )
        out = self._out_dir(args, Path(args.ckpt).parent / "reports")
        ReportService(out, self.status_callback).alignment(report)
        if cfg.eval["heatmaps"]:
            keys = sorted({(r.domain, r.tap) for r in report.similarities})
            for domain, tap in keys:
                for metric in HARD_METRICS + SOFT_METRICS:
                    matrix = report.similarity_matrix(domain, tap, metric, bits)
                    save_heatmap(np.clip(matrix, 0.0, 1.0), [f"{b}b" for b in bits],
                                 out / "heatmaps" / f"{domain}-{tap}-{metric}.png")

    def handle_ablate(self, args) -> None:
        cfg = self._config(args.config)
        out = self._out_dir(args, Path(cfg.run["out_dir"]) / f"{Path(args.config).stem}-ablation")
        train, held = self._datasets(cfg)
        rows = CampaignService(cfg, train, held, out, self.status_callback, self.progress).ablate()
        ReportService(out, self.status_callback).ablation(rows)

    def handle_sweep(self, args) -> None:
        cfg = self._config(args.config)
        out = self._out_dir(args, Path(cfg.run["out_dir"]) / f"{Path(args.config).stem}-sweep")
        train, held = self._datasets(cfg)
        rows = CampaignService(cfg, train, held, out, self.status_callback, self.progress).sweep()
        ReportService(out, self.status_callback).sweep(rows)
