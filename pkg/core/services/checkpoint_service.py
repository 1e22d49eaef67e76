# core/services/checkpoint_service.py
"""
Checkpoint Service - TQCKPT01 containers for training state.

Layout, all integers little-endian::

    b"TQCKPT01"  u32 section count
    per section: u16 name length, name (UTF-8), u8 kind, u64 payload length, payload

Kinds: 0 = canonical JSON, 1 = float64 array (u8 ndim, ndim × u64 dims,
``<f8`` data), 2 = raw bytes. Sections are written sorted by name, so loading
then saving reproduces the file byte for byte.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core.attacks import PatchSpec
from core.config import RunConfig
from core.curriculum import CurriculumSchedule, EnsembleMode, EnsembleState
from core.errors import CheckpointError
from core.models import ModelDef, build_model
from core.quant import QuantSpec
from core.services.patch_pool_service import decode_patch, encode_patch
from core.utils import compact_json

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"TQCKPT01"
CKPT_FORMAT_VERSION = 1

KIND_JSON = 0
KIND_ARRAY = 1
KIND_BYTES = 2

META = "meta"
WEIGHTS = "weights/"
OPTIMIZER = "optimizer/"
POOL = "pool/"


@dataclass
class Checkpoint:
    config: Dict[str, Any]                      # RunConfig echo
    weights: Dict[str, np.ndarray]
    specs: Dict[int, Dict[str, QuantSpec]]
    active: List[int]
    epoch: int                                  # next epoch to run
    step: int = 0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: Dict[str, Any] = field(default_factory=dict)
    schedule: Optional[Dict[str, Any]] = None
    pool: List[PatchSpec] = field(default_factory=list)
    train_signatures: List[str] = field(default_factory=list)
    format_version: int = CKPT_FORMAT_VERSION

    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def curriculum(self) -> Optional[CurriculumSchedule]:
        return CurriculumSchedule.from_dict(self.schedule) if self.schedule else None

    def model(self) -> ModelDef:
        cfg = self.config
        side = cfg["data"]["image_size"]
        return build_model(cfg["run"]["architecture"], cfg["data"]["num_classes"], (3, side, side))

    def to_state(self) -> EnsembleState:
        """Ensemble state holding copies of the stored weights and specs."""
        run = self.config["run"]
        bit_set = tuple(sorted(run["bits"], reverse=True))
        return EnsembleState(
            model=self.model(),
            bit_set=bit_set,
            weights={k: np.array(v) for k, v in self.weights.items()},
            ensemble=EnsembleMode(run["ensemble"]),
            specs={b: dict(s) for b, s in self.specs.items()},
            active=list(self.active),
            epoch=self.epoch,
        )


# ── Encoding ────────────────────────────────────────────────────────────

def _encode_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape) + a.tobytes()


def _decode_array(raw: bytes, name: str) -> np.ndarray:
    (ndim,) = struct.unpack_from("<B", raw, 0)
    dims = struct.unpack_from(f"<{ndim}Q", raw, 1)
    offset = 1 + 8 * ndim
    if len(raw) - offset != int(np.prod(dims)) * 8:
        raise CheckpointError(f"section '{name}': array payload does not match shape {dims}")
    return np.frombuffer(raw, dtype="<f8", offset=offset).reshape(dims).astype(np.float64)


def _meta(ckpt: Checkpoint) -> Dict[str, Any]:
    return {
        "format_version": ckpt.format_version,
        "config": ckpt.config,
        "specs": {str(b): {k: s.to_dict() for k, s in specs.items()} for b, specs in ckpt.specs.items()},
        "active": list(ckpt.active),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "schedule": ckpt.schedule,
        "pool_size": len(ckpt.pool),
        "train_signatures": sorted(ckpt.train_signatures),
    }


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    sections: List[Tuple[str, int, bytes]] = [(META, KIND_JSON, compact_json(_meta(ckpt)))]
    sections += [(WEIGHTS + n, KIND_ARRAY, _encode_array(a)) for n, a in ckpt.weights.items()]
    sections += [(OPTIMIZER + n, KIND_ARRAY, _encode_array(a)) for n, a in ckpt.velocity.items()]
    sections += [(f"{POOL}{i:04d}", KIND_BYTES, encode_patch(p)) for i, p in enumerate(ckpt.pool)]
    sections.sort(key=lambda s: s[0])
    out = [CKPT_MAGIC, struct.pack("<I", len(sections))]
    for name, kind, payload in sections:
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)) + encoded + struct.pack("<BQ", kind, len(payload)))
        out.append(payload)
    return b"".join(out)


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{source}: bad magic at offset 0, expected {CKPT_MAGIC!r}")
    offset = len(CKPT_MAGIC)
    try:
        (count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        sections: Dict[str, Tuple[int, bytes]] = {}
        for _ in range(count):
            start = offset
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            kind, length = struct.unpack_from("<BQ", raw, offset)
            offset += 9
            if offset + length > len(raw):
                raise CheckpointError(f"{source}: section '{name}' at offset {start} runs past end of file")
            sections[name] = (kind, raw[offset:offset + length])
            offset += length
    except struct.error as e:
        raise CheckpointError(f"{source}: truncated section table at offset {offset}") from e
    if offset != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - offset} trailing bytes at offset {offset}")
    if META not in sections:
        raise CheckpointError(f"{source}: missing '{META}' section")
    meta = json.loads(sections[META][1].decode("utf-8"))
    if meta.get("format_version") != CKPT_FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {meta.get('format_version')}")

    def arrays(prefix: str) -> Dict[str, np.ndarray]:
        return {n[len(prefix):]: _decode_array(p, n) for n, (k, p) in sections.items()
                if n.startswith(prefix) and k == KIND_ARRAY}

    pool = [decode_patch(p, f"{source}:{n}") for n, (k, p) in sorted(sections.items()) if n.startswith(POOL)]
    if len(pool) != meta["pool_size"]:
        raise CheckpointError(f"{source}: expected {meta['pool_size']} pool sections, found {len(pool)}")
    return Checkpoint(
        config=meta["config"],
        weights=arrays(WEIGHTS),
        specs={int(b): {k: QuantSpec.from_dict(s) for k, s in specs.items()} for b, specs in meta["specs"].items()},
        active=list(meta["active"]),
        epoch=meta["epoch"],
        step=meta["step"],
        velocity=arrays(OPTIMIZER),
        rng_state=meta["rng_state"],
        schedule=meta["schedule"],
        pool=pool,
        train_signatures=list(meta["train_signatures"]),
        format_version=meta["format_version"],
    )


# ── Service ─────────────────────────────────────────────────────────────

class CheckpointService:
    def save(self, ckpt: Checkpoint, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(ckpt))
        logger.info("Checkpoint written to %s (epoch %d, step %d)", path, ckpt.epoch, ckpt.step)
        return path

    def load(self, path: Path) -> Checkpoint:
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path} (offset 0)")
        return decode_checkpoint(path.read_bytes(), str(path))
