"""Run configuration: sectioned defaults, config-file loading and the canonical echo."""
import copy
import configparser
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from core.attacks import AttackConfig, PatchFamily
from core.curriculum import CurriculumSchedule, EnsembleMode, ScheduleMode, build_schedule, default_groups
from core.errors import ConfigError, CurriculumError, LossError, PerceptualError, QuantizationError
from core.losses import LossWeights, PerceptualParams
from core.models import architectures
from core.perceptual import HogParams, SoftBinarizeParams
from core.quant import SUPPORTED_BITS

MODES = ("standard-qat", "patch-augmented", "triqdef", "triqdef-no-fdp", "triqdef-no-gpdp")
DATASETS = ("synthetic-shapes", "cifar10-subset")
DATA_DIR_ENV = "TRIQDEF_DATA_DIR"

_DEFAULTS = {
    "run": {
        "seed": None,
        "mode": "triqdef",
        "architecture": "tinycnn-s",
        "bits": [32, 5, 4, 2],
        "epochs": 30,
        "batch_size": 64,
        "ensemble": "shared",
        "out_dir": "runs",
    },
    "data": {
        "dataset": "synthetic-shapes",
        "data_dir": "",
        "train_size": 0,          # 0 selects the dataset default
        "eval_size": 0,
        "num_classes": 4,
        "image_size": 32,
        "calibration_samples": 256,
    },
    "curriculum": {
        "enabled": True,
        "mode": "staircase",
        "stages": [],             # empty selects the default grouping
    },
    "loss": {
        "alpha": 0.5,
        "beta": 1.0,
        "lambda_fdp": 0.8,
        "lambda_gpdp": 0.5,
        "percentile": 85.0,
        "sharpness": 100.0,
        "hog_cell": 4,
        "hog_block": 2,
        "hog_bins": 9,
        "hog_softness": 1.0,
    },
    "optimizer": {
        "lr": 0.1,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "decay_at": [0.5, 0.75],
        "decay_factor": 0.1,
    },
    "attack": {
        "family": "per-image-targeted",
        "target_class": 0,
        "iterations": 100,
        "step_size": 0.05,
        "random_location": False,
        "craft_samples": 64,
        "craft_batch_size": 32,
        "train_sizes": [5, 6],
        "train_locations": [(2, 2), (24, 24)],
        "train_source_bits": [32, 5],
        "unseen_sizes": [5, 7],
        "unseen_locations": [(13, 13), (2, 24)],
        "unseen_source_bits": [4, 2],
        "pool_warmup_epochs": 1,
        "refresh_pool": False,
        "surrogate_checkpoint": "",
    },
    "eval": {
        "bits": [],               # empty selects [run] bits
        "samples": 256,
        "align_samples": 32,
        "targeted": True,
        "hog_assignment": "interpolate",
        "heatmaps": True,
    },
    "sweep": {
        "alpha_beta": [(1.0, 1.0), (0.5, 1.0), (1.0, 0.5)],
        "lambdas": [(1.0, 1.0), (0.5, 0.8), (0.8, 0.5)],
        "epochs": 0,              # 0 reuses [run] epochs
    },
}

# Non-scalar keys; scalars are parsed by the type of their default.
_LIST_KINDS = {
    ("run", "bits"): "ints",
    ("curriculum", "stages"): "groups",
    ("optimizer", "decay_at"): "floats",
    ("attack", "train_sizes"): "ints",
    ("attack", "train_locations"): "locations",
    ("attack", "train_source_bits"): "ints",
    ("attack", "unseen_sizes"): "ints",
    ("attack", "unseen_locations"): "locations",
    ("attack", "unseen_source_bits"): "ints",
    ("eval", "bits"): "ints",
    ("sweep", "alpha_beta"): "pairs",
    ("sweep", "lambdas"): "pairs",
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


# ── Value grammar ───────────────────────────────────────────────────────

def _split(text: str, sep: str = ",") -> List[str]:
    return [part.strip() for part in text.split(sep) if part.strip()]


def _parse_value(section: str, key: str, text: str) -> Any:
    kind = _LIST_KINDS.get((section, key))
    text = text.strip()
    if kind == "ints":
        return [int(v) for v in _split(text)]
    if kind == "floats":
        return [float(v) for v in _split(text)]
    if kind == "locations":
        return [tuple(int(v) for v in loc.split(":")) for loc in _split(text)]
    if kind == "pairs":
        return [tuple(float(v) for v in pair.split(":")) for pair in _split(text)]
    if kind == "groups":
        return [[int(v) for v in _split(group)] for group in _split(text, "/")]
    default = _DEFAULTS[section][key]
    if default is None or isinstance(default, int) and not isinstance(default, bool):
        return int(text) if text else None
    if isinstance(default, bool):
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got '{text}'")
    if isinstance(default, float):
        return float(text)
    return text


def _format_value(section: str, key: str, value: Any) -> str:
    kind = _LIST_KINDS.get((section, key))
    if kind in ("ints", "floats"):
        return ",".join(str(v) for v in value)
    if kind in ("locations", "pairs"):
        return ",".join(":".join(str(v) for v in item) for item in value)
    if kind == "groups":
        return "/".join(",".join(str(v) for v in group) for group in value)
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _jsonable(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _from_json(section: str, key: str, value: Any) -> Any:
    kind = _LIST_KINDS.get((section, key))
    if kind in ("locations", "pairs"):
        return [tuple(v) for v in value]
    if kind == "groups":
        return [list(g) for g in value]
    if kind is not None:
        return list(value)
    return value


# ── RunConfig ───────────────────────────────────────────────────────────

class RunConfig:
    """Sectioned run configuration; one dict attribute per section."""

    def __init__(self, config_file: Optional[str] = None, seed: Optional[int] = None):
        self.config_file = config_file
        self.__dict__.update(copy.deepcopy(_DEFAULTS))
        if config_file is not None:
            self._load_config()
        if seed is not None:
            self.run["seed"] = int(seed)
        self.validate()

    def _load_config(self) -> None:
        path = Path(self.config_file)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                           inline_comment_prefixes=None, default_section="__none__")
        try:
            parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
        except (configparser.Error, UnicodeDecodeError) as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
        for section in parser.sections():
            if section not in _DEFAULTS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, text in parser.items(section):
                if key not in _DEFAULTS[section]:
                    raise ConfigError(f"{path}: unknown key '{key}' in [{section}]")
                try:
                    getattr(self, section)[key] = _parse_value(section, key, text)
                except ValueError as e:
                    raise ConfigError(f"{path}: [{section}] {key} = {text!r}: {e}") from e

    def save(self, path: Optional[str] = None) -> None:
        """Write the merged configuration in config-file grammar."""
        target = Path(path or self.config_file)
        lines = []
        for section, values in _DEFAULTS.items():
            lines.append(f"[{section}]")
            for key in values:
                lines.append(f"{key} = {_format_value(section, key, getattr(self, section)[key])}")
            lines.append("")
        target.write_text("\n".join(lines), encoding="utf-8")

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {s: {k: _jsonable(getattr(self, s)[k]) for k in _DEFAULTS[s]} for s in _DEFAULTS}

    @classmethod
    def from_dict(cls, data: Dict[str, Dict[str, Any]]) -> "RunConfig":
        cfg = cls.__new__(cls)
        cfg.config_file = None
        cfg.__dict__.update(copy.deepcopy(_DEFAULTS))
        for section, values in data.items():
            if section not in _DEFAULTS:
                raise ConfigError(f"unknown section '{section}' in config echo")
            for key, value in values.items():
                if key not in _DEFAULTS[section]:
                    raise ConfigError(f"unknown key '{key}' in config echo section '{section}'")
                getattr(cfg, section)[key] = _from_json(section, key, value)
        cfg.validate()
        return cfg

    def copy(self, **overrides: Dict[str, Any]) -> "RunConfig":
        """A validated copy with per-section overrides, e.g. ``copy(run={"mode": ...})``."""
        data = self.to_dict()
        for section, values in overrides.items():
            data[section].update(values)
        return RunConfig.from_dict(data)

    # ── Validation ──────────────────────────────────────────────────────

    def validate(self) -> None:
        run, data, attack = self.run, self.data, self.attack
        if run["seed"] is None:
            raise ConfigError("[run] seed is mandatory")
        if run["mode"] not in MODES:
            raise ConfigError(f"[run] mode '{run['mode']}' not one of {', '.join(MODES)}")
        if run["architecture"] not in architectures():
            raise ConfigError(f"[run] architecture '{run['architecture']}' not one of {', '.join(architectures())}")
        if data["dataset"] not in DATASETS:
            raise ConfigError(f"[data] dataset '{data['dataset']}' not one of {', '.join(DATASETS)}")
        bits = run["bits"]
        if not bits or len(set(bits)) != len(bits):
            raise ConfigError(f"[run] bits must be distinct and non-empty, got {bits}")
        unsupported = [b for b in bits + attack["train_source_bits"] + attack["unseen_source_bits"]
                       if b not in SUPPORTED_BITS]
        if unsupported:
            raise ConfigError(f"unsupported bit-widths {unsupported}")
        for key in ("epochs", "batch_size"):
            if run[key] < 1:
                raise ConfigError(f"[run] {key} must be positive, got {run[key]}")
        if data["num_classes"] < 2:
            raise ConfigError("[data] num_classes must be at least 2")
        try:
            EnsembleMode(run["ensemble"])
            ScheduleMode(self.curriculum["mode"])
            PatchFamily(attack["family"])
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if not 0 <= attack["target_class"] < data["num_classes"]:
            raise ConfigError(f"[attack] target_class {attack['target_class']} outside [0, {data['num_classes']})")
        side = data["image_size"]
        for prefix in ("train", "unseen"):
            for size in attack[f"{prefix}_sizes"]:
                for row, col in attack[f"{prefix}_locations"]:
                    if size < 1 or row < 0 or col < 0 or row + size > side or col + size > side:
                        raise ConfigError(f"[attack] {size}×{size} patch at {row}:{col} does not fit {side}×{side}")
        try:
            self.loss_weights()
            self.perceptual_params()
            self.attack_config()
            self.schedule()
        except (LossError, PerceptualError, QuantizationError, CurriculumError) as e:
            raise ConfigError(str(e)) from e

    # ── Typed views ─────────────────────────────────────────────────────

    @property
    def seed(self) -> int:
        return self.run["seed"]

    @property
    def mode(self) -> str:
        return self.run["mode"]

    @property
    def bits(self) -> List[int]:
        """Configured bit set, sorted descending."""
        return sorted(self.run["bits"], reverse=True)

    @property
    def eval_bits(self) -> List[int]:
        return sorted(self.eval["bits"] or self.run["bits"], reverse=True)

    def loss_weights(self) -> LossWeights:
        """Loss weights as configured, with λs zeroed where the mode drops a penalty."""
        loss, mode = self.loss, self.run["mode"]
        lambda_fdp = 0.0 if mode in ("standard-qat", "patch-augmented", "triqdef-no-fdp") else loss["lambda_fdp"]
        lambda_gpdp = 0.0 if mode in ("standard-qat", "patch-augmented", "triqdef-no-gpdp") else loss["lambda_gpdp"]
        return LossWeights(loss["alpha"], loss["beta"], lambda_fdp, lambda_gpdp)

    def perceptual_params(self) -> PerceptualParams:
        loss = self.loss
        return PerceptualParams(
            SoftBinarizeParams(loss["percentile"], loss["sharpness"]),
            HogParams(loss["hog_cell"], loss["hog_block"], loss["hog_bins"], loss["hog_softness"]),
        )

    def attack_config(self, seed: Optional[int] = None) -> AttackConfig:
        attack = self.attack
        return AttackConfig(
            iterations=attack["iterations"],
            step_size=attack["step_size"],
            targeted=True,
            random_location=attack["random_location"],
            seed=self.seed if seed is None else seed,
            target_class=attack["target_class"],
            family=PatchFamily(attack["family"]),
            batch_size=attack["craft_batch_size"],
        )

    @property
    def uses_patches(self) -> bool:
        return self.run["mode"] != "standard-qat"

    def pool_triples(self, split: str = "train") -> List[Tuple[int, Tuple[int, int], int]]:
        """(size, location, source_bits) for every patch of a pool split."""
        attack = self.attack
        return [
            (size, tuple(loc), bits)
            for bits in attack[f"{split}_source_bits"]
            for size in attack[f"{split}_sizes"]
            for loc in attack[f"{split}_locations"]
        ]

    def schedule(self) -> CurriculumSchedule:
        """Curriculum schedule; with the curriculum disabled every bit starts at epoch 0."""
        bits, epochs = self.bits, self.run["epochs"]
        mode = ScheduleMode(self.curriculum["mode"])
        if not self.curriculum["enabled"]:
            return build_schedule(epochs, bits, ScheduleMode.STAIRCASE, [bits])
        groups = self.curriculum["stages"] or default_groups(bits)
        return build_schedule(epochs, bits, mode, groups)

    def data_dir(self) -> Path:
        return Path(self.data["data_dir"] or os.environ.get(DATA_DIR_ENV, "data"))
