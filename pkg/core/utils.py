# core/utils.py
"""Shared utility functions: image export of patches and similarity heatmaps."""

import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image, ImageDraw


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(C, H, W) floats in [0, 1] -> (H, W, C) bytes; one channel stays 2-d."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    arr = np.transpose(arr, (1, 2, 0))
    return arr[..., 0] if arr.shape[-1] == 1 else arr


def save_patch_preview(pixels: np.ndarray, path: Path, scale: int = 8) -> str:
    """Save patch pixels as a nearest-neighbour upscaled PNG.

    Args:
        pixels: Patch pixels ``(C, h, w)`` in [0, 1].
        path:   Output ``.png`` path; parent directories are created.
        scale:  Integer upscaling factor.

    Returns:
        The path written, as a string.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(to_uint8(pixels))
    if img.width and img.height:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(str(path), "PNG")
    return str(path)


def _heat_color(v: float) -> tuple:
    """Dark blue (0) to yellow (1)."""
    v = float(np.clip(v, 0.0, 1.0))
    return int(255 * v), int(64 + 160 * v), int(160 * (1.0 - v))


def save_heatmap(matrix: np.ndarray, labels: Sequence[str], path: Path, cell: int = 48) -> str:
    """Render a square similarity matrix with values in [0, 1] as a PNG grid.

    Non-finite entries are drawn grey. Row and column labels run along the
    top and left margins.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[0]
    margin = cell
    img = Image.new("RGB", (margin + n * cell, margin + n * cell), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    for i, label in enumerate(labels):
        draw.text((margin + i * cell + 4, 4), str(label), fill=(0, 0, 0))
        draw.text((4, margin + i * cell + 4), str(label), fill=(0, 0, 0))
    for i in range(n):
        for j in range(n):
            v = matrix[i, j]
            color = _heat_color(v) if np.isfinite(v) else (160, 160, 160)
            x0, y0 = margin + j * cell, margin + i * cell
            draw.rectangle([x0, y0, x0 + cell - 1, y0 + cell - 1], fill=color)
            if np.isfinite(v):
                draw.text((x0 + 4, y0 + cell // 2 - 5), f"{v:.2f}", fill=(255, 255, 255))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(str(path), "PNG")
    return str(path)


def dump_json(data: Any, path: Path) -> None:
    """Deterministic, human-readable JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def compact_json(data: Any) -> bytes:
    """Canonical JSON bytes for container headers."""
    return json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")
