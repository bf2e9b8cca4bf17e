"""PNG + JSON-sidecar export for grids produced by the toolkit.

Every image written here gets a ``<name>.json`` sidecar next to it recording
pixel pitch and whatever metadata the producer hands over, so exported files
stay self-describing.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["write_png16", "write_png8", "read_png", "read_sidecar"]


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def _write_sidecar(path: Path, pitch: float, meta: dict | None, extra: dict) -> None:
    doc = {"pitch_nm": pitch}
    doc.update(extra)
    if meta:
        doc["meta"] = meta
    _sidecar_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def write_png16(array: np.ndarray, pitch: float, path: str | Path, meta: dict | None = None) -> Path:
    """Write a 2-D array as 16-bit grayscale PNG, linearly scaled to full range.

    The scale anchors (value_min, value_max) go into the sidecar so the
    original values can be recovered.
    """
    path = Path(path)
    arr = np.asarray(array, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo
    if span == 0.0:
        scaled = np.zeros(arr.shape, dtype=np.uint16)
    else:
        scaled = np.round((arr - lo) / span * 65535.0).astype(np.uint16)
    Image.fromarray(scaled).save(path)
    _write_sidecar(path, pitch, meta, {"bit_depth": 16, "value_min": lo, "value_max": hi})
    return path


def write_png8(array: np.ndarray, pitch: float, path: str | Path, meta: dict | None = None) -> Path:
    """Write a 2-D or HxWx3 array as 8-bit PNG, linearly scaled to full range."""
    path = Path(path)
    arr = np.asarray(array, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo
    if span == 0.0:
        scaled = np.zeros(arr.shape, dtype=np.uint8)
    else:
        scaled = np.round((arr - lo) / span * 255.0).astype(np.uint8)
    Image.fromarray(scaled).save(path)
    _write_sidecar(path, pitch, meta, {"bit_depth": 8, "value_min": lo, "value_max": hi})
    return path


def read_png(path: str | Path) -> np.ndarray:
    """Read a PNG back as a numpy array (uint8 or uint16 as stored)."""
    with Image.open(Path(path)) as im:
        arr = np.array(im)
    if arr.dtype == np.int32:  # PIL yields int32 for mode I;16 on some platforms
        arr = arr.astype(np.uint16)
    return arr


def read_sidecar(path: str | Path) -> dict:
    return json.loads(_sidecar_path(Path(path)).read_text())
