# core/services/patch_pool_service.py
"""
Patch Pool Service - Crafts patch pools and stores them as TQPATCH1 containers.

Container layout: ``b"TQPATCH1"``, a little-endian u32 header length, the
header as canonical JSON, then the pixels as little-endian float64 in
``(C, h, w)`` order. A pool directory holds one container per patch, an
optional PNG preview per patch and ``manifest.json`` indexing them.
"""

import json
import struct
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from core.attacks import AttackConfig, PatchFamily, PatchSpec, Signature, craft_patch
from core.curriculum import EnsembleState
from core.errors import AttackError, DataError
from core.services.base_service import BaseService, StatusCallback
from core.utils import compact_json, dump_json, save_patch_preview

PATCH_MAGIC = b"TQPATCH1"
PATCH_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA_VERSION = 1
PATCH_SUFFIX = ".tqp"

Triple = Tuple[int, Tuple[int, int], int]


# ── Container codec ─────────────────────────────────────────────────────

def encode_patch(p: PatchSpec) -> bytes:
    header = {
        "version": PATCH_FORMAT_VERSION,
        "dtype": "<f8",
        "shape": list(p.pixels.shape),
        "location": list(p.location),
        "image_size": list(p.image_size),
        "source_bits": int(p.source_bits),
        "family": p.family.value,
        "target_class": p.target_class,
        "metadata": dict(p.metadata),
    }
    head = compact_json(header)
    payload = np.ascontiguousarray(p.pixels, dtype="<f8").tobytes()
    return PATCH_MAGIC + struct.pack("<I", len(head)) + head + payload


def decode_patch(raw: bytes, source: str = "<bytes>") -> PatchSpec:
    if raw[:len(PATCH_MAGIC)] != PATCH_MAGIC:
        raise DataError(f"{source}: bad magic at offset 0, expected {PATCH_MAGIC!r}")
    offset = len(PATCH_MAGIC)
    if len(raw) < offset + 4:
        raise DataError(f"{source}: truncated header length at offset {offset}")
    (head_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    try:
        header = json.loads(raw[offset:offset + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{source}: corrupt header at offset {offset}: {e}") from e
    if header.get("version") != PATCH_FORMAT_VERSION:
        raise DataError(f"{source}: unsupported patch format version {header.get('version')}")
    offset += head_len
    shape = tuple(header["shape"])
    expected = int(np.prod(shape)) * 8
    if len(raw) - offset != expected:
        raise DataError(f"{source}: payload at offset {offset} holds {len(raw) - offset} bytes, expected {expected}")
    pixels = np.frombuffer(raw, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)
    return PatchSpec(
        pixels=pixels,
        location=tuple(header["location"]),
        image_size=tuple(header["image_size"]),
        source_bits=header["source_bits"],
        family=PatchFamily(header["family"]),
        target_class=header["target_class"],
        metadata=header["metadata"],
    )


# ── Seen / unseen ───────────────────────────────────────────────────────

def signature_key(sig: Signature) -> str:
    """Stable string form, e.g. ``6x6@24:24/b32``."""
    (h, w), (row, col), bits = sig
    return f"{h}x{w}@{row}:{col}/b{bits}"


def is_seen(p: PatchSpec, training_signatures: Iterable[str]) -> bool:
    return signature_key(p.signature) in set(training_signatures)


def unique_ids(patches: Sequence[PatchSpec]) -> List[str]:
    ids, counts = [], {}
    for p in patches:
        base = p.patch_id
        counts[base] = counts.get(base, 0) + 1
        ids.append(base if counts[base] == 1 else f"{base}-{counts[base]}")
    return ids


# ── Service ─────────────────────────────────────────────────────────────

class PatchPoolService(BaseService):
    def __init__(self, status_callback: Optional[StatusCallback] = None):
        super().__init__(status_callback)

    def craft_pool(
        self,
        state: EnsembleState,
        images: np.ndarray,
        labels: np.ndarray,
        triples: Sequence[Triple],
        cfg: AttackConfig,
        craft_samples: int,
        calibration_batch: Optional[np.ndarray] = None,
    ) -> List[PatchSpec]:
        """One patch per (size, location, source_bits) triple.

        Targeted crafting skips images already of the target class. Each patch
        gets its own seed derived from ``cfg.seed`` and its index.
        """
        images = np.asarray(images)
        labels = np.asarray(labels)
        keep = labels != cfg.target_class if cfg.targeted else np.ones(len(labels), dtype=bool)
        images, labels = images[keep][:craft_samples], labels[keep][:craft_samples]
        if len(images) == 0:
            raise AttackError("no images available for patch crafting")
        pool = []
        for i, (size, location, bits) in enumerate(triples):
            variant = state.variant(bits, calibration_batch)
            patch_cfg = AttackConfig(
                iterations=cfg.iterations,
                step_size=cfg.step_size,
                targeted=cfg.targeted,
                random_location=cfg.random_location,
                seed=cfg.seed + i,
                target_class=cfg.target_class,
                family=cfg.family,
                batch_size=cfg.batch_size,
            )
            pool.append(craft_patch(variant, images, labels, patch_cfg, size, location))
            self._status(f"Crafted patch {i + 1}/{len(triples)}: {pool[-1].patch_id}")
        return pool

    def save_pool(self, pool: Sequence[PatchSpec], out_dir: Path, previews: bool = True,
                  training_signatures: Optional[Set[str]] = None) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for pid, p in zip(unique_ids(pool), pool):
            filename = pid + PATCH_SUFFIX
            (out_dir / filename).write_bytes(encode_patch(p))
            entry = {
                "id": pid,
                "file": filename,
                "size": list(p.size),
                "location": list(p.location),
                "source_bits": p.source_bits,
                "family": p.family.value,
                "target_class": p.target_class,
                "signature": signature_key(p.signature),
            }
            if training_signatures is not None:
                entry["seen"] = signature_key(p.signature) in training_signatures
            if previews:
                save_patch_preview(p.pixels, out_dir / f"{pid}.png")
                entry["preview"] = f"{pid}.png"
            entries.append(entry)
        dump_json({"schema_version": MANIFEST_SCHEMA_VERSION, "patches": entries}, out_dir / MANIFEST_NAME)
        self._status(f"Saved {len(entries)} patches to {out_dir}")
        return out_dir

    def load_pool(self, pool_dir: Path) -> List[Tuple[str, PatchSpec]]:
        """(id, patch) pairs in manifest order."""
        pool_dir = Path(pool_dir)
        manifest_path = pool_dir / MANIFEST_NAME
        if not manifest_path.exists():
            raise DataError(f"missing pool manifest {manifest_path}")
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError(f"{manifest_path}: corrupt manifest at offset {e.pos}") from e
        if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise DataError(f"{manifest_path}: unsupported schema version {manifest.get('schema_version')}")
        out = []
        for entry in manifest["patches"]:
            path = pool_dir / entry["file"]
            if not path.exists():
                raise DataError(f"missing patch container {path}")
            out.append((entry["id"], decode_patch(path.read_bytes(), str(path))))
        return out
