"""Training-data pipeline: registration, tiling, pairing and persistence.

Builds registered low-resolution (Source) / high-resolution (Expected) tile
pairs from rendered scenes and stores them in a self-describing binary file:

    magic "PNBD" | version u16 LE | header length u32 LE | header JSON |
    per pair: source bytes, expected bytes, CRC-32 u32 LE

The header records tile size, channel count, pair count, modality, per-pair
origins and the provenance (config hash and seeds) needed to rebuild the file
bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import zoom

from . import optics
from .optics import ImageField, OpticalConfig
from .targets import TargetSpec, ground_truth, rasterize_target, spec_to_dict

__all__ = [
    "Registration",
    "TilePair",
    "TilePairDataset",
    "DatasetFormatError",
    "register_translation",
    "crop_tiles",
    "stitch_tiles",
    "build_dataset",
    "save_dataset",
    "load_dataset",
]

MAGIC = b"PNBD"
VERSION = 1


class DatasetFormatError(ValueError):
    """Raised for malformed, truncated or corrupt dataset files."""


@dataclass(frozen=True)
class Registration:
    """Integer-pixel translation (dx, dy) and its normalized correlation score."""

    shift: tuple[int, int]
    score: float

    def __post_init__(self) -> None:
        if abs(self.score) > 1.0 + 1e-9:
            raise ValueError(f"|score| must be <= 1, got {self.score}")


@dataclass(frozen=True)
class TilePair:
    """One Source/Expected training pair, 8-bit, identical dimensions."""

    source: np.ndarray
    expected: np.ndarray
    origin: tuple[int, int]  # (row, col) in the parent image
    modality: str

    def __post_init__(self) -> None:
        if self.source.shape != self.expected.shape:
            raise ValueError("source and expected tiles must match in shape")
        if self.source.dtype != np.uint8 or self.expected.dtype != np.uint8:
            raise ValueError("tiles must be 8-bit")
        if self.source.ndim != 3:
            raise ValueError("tiles must be HxWxC")
        if self.modality not in ("pcm", "dic"):
            raise ValueError(f"modality must be 'pcm' or 'dic', got {self.modality!r}")


@dataclass(frozen=True)
class TilePairDataset:
    """An ordered set of tile pairs; one training epoch is one pass over it."""

    pairs: tuple[TilePair, ...]
    tile_size: int
    provenance: dict

    def __post_init__(self) -> None:
        if not self.pairs:
            raise ValueError("dataset must contain at least one pair")
        for p in self.pairs:
            if p.source.shape[:2] != (self.tile_size, self.tile_size):
                raise ValueError("all tiles must match the declared tile size")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def channels(self) -> int:
        return self.pairs[0].source.shape[2]

    @property
    def modality(self) -> str:
        return self.pairs[0].modality

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.provenance, sort_keys=True, default=str).encode())
        for p in self.pairs:
            h.update(p.source.tobytes())
            h.update(p.expected.tobytes())
        return h.hexdigest()


# --- registration ----------------------------------------------------------------


def _as_array(img) -> np.ndarray:
    if isinstance(img, ImageField):
        return np.asarray(img.intensity, dtype=np.float64)
    return np.asarray(img, dtype=np.float64)


def register_translation(moving, fixed) -> Registration:
    """Integer-pixel shift maximizing the circular normalized cross-correlation.

    Applying the returned (dx, dy) to ``moving`` with wrap-around (positive dx
    to the right, positive dy downward) best aligns it to ``fixed``.
    """
    m = _as_array(moving)
    f = _as_array(fixed)
    if m.ndim == 3:
        m = m.mean(axis=2)
    if f.ndim == 3:
        f = f.mean(axis=2)
    if m.shape != f.shape:
        raise ValueError(f"shape mismatch: {m.shape} vs {f.shape}")
    m = m - m.mean()
    f = f - f.mean()
    denom = math.sqrt(float((m**2).sum()) * float((f**2).sum()))
    if denom == 0.0:
        raise ValueError("cannot register constant images")
    cc = np.fft.ifft2(np.fft.fft2(f) * np.conj(np.fft.fft2(m))).real / denom
    dy, dx = np.unravel_index(np.argmax(cc), cc.shape)
    h, w = cc.shape
    if dy > h // 2:
        dy -= h
    if dx > w // 2:
        dx -= w
    return Registration(shift=(int(dx), int(dy)), score=float(cc.max()))


def apply_shift(img: np.ndarray, shift: tuple[int, int]) -> np.ndarray:
    """Apply a (dx, dy) registration shift with wrap-around."""
    dx, dy = shift
    return np.roll(img, (dy, dx), axis=(0, 1))


# --- tiling ------------------------------------------------------------------------


def crop_tiles(img, tile: int, stride: int | None = None):
    """Row-major tiles of size tile x tile; partial edge tiles are dropped.

    Returns (tiles, origins) with origins as (row, col) of each tile's
    top-left corner.
    """
    arr = np.asarray(img.intensity if isinstance(img, ImageField) else img)
    if stride is None:
        stride = tile
    if tile <= 0 or stride <= 0:
        raise ValueError("tile and stride must be positive")
    h, w = arr.shape[:2]
    if tile > h or tile > w:
        raise ValueError(f"tile {tile} larger than image {arr.shape[:2]}")
    tiles = []
    origins = []
    for r in range(0, h - tile + 1, stride):
        for c in range(0, w - tile + 1, stride):
            tiles.append(arr[r : r + tile, c : c + tile].copy())
            origins.append((r, c))
    return tiles, origins


def stitch_tiles(tiles, origins, canvas_shape, conflict_atol: float = 0.0) -> np.ndarray:
    """Reassemble tiles onto a canvas; overlapping regions are averaged.

    For stride == tile the crop/stitch round trip is bit-exact. When
    overlapping tiles disagree by more than ``conflict_atol`` a warning
    reports the maximum discrepancy.
    """
    if len(tiles) != len(origins):
        raise ValueError("tiles and origins must have equal length")
    first = np.asarray(tiles[0])
    shape = tuple(canvas_shape) + first.shape[2:]
    acc = np.zeros(shape, dtype=np.float64)
    count = np.zeros(canvas_shape, dtype=np.int64)
    lo = np.full(shape, np.inf)
    hi = np.full(shape, -np.inf)
    for t, (r, c) in zip(tiles, origins):
        t = np.asarray(t)
        th, tw = t.shape[:2]
        if r < 0 or c < 0 or r + th > canvas_shape[0] or c + tw > canvas_shape[1]:
            raise ValueError(f"tile at {(r, c)} falls outside the canvas")
        acc[r : r + th, c : c + tw] += t
        count[r : r + th, c : c + tw] += 1
        lo[r : r + th, c : c + tw] = np.minimum(lo[r : r + th, c : c + tw], t)
        hi[r : r + th, c : c + tw] = np.maximum(hi[r : r + th, c : c + tw], t)
    multi = count > 1
    if multi.any():
        spread = (hi - lo)[multi] if first.ndim == 2 else (hi - lo)[multi].max(axis=-1)
        max_disc = float(np.max(spread))
        if max_disc > conflict_atol:
            warnings.warn(
                f"overlapping tiles disagree; max discrepancy {max_disc:g}",
                stacklevel=2,
            )
    out = np.zeros(shape, dtype=first.dtype if first.dtype != np.uint8 else np.float64)
    covered = count > 0
    norm = np.where(covered, count, 1)
    if first.ndim == 3:
        norm = norm[..., None]
        covered_full = np.broadcast_to(covered[..., None], shape)
    else:
        covered_full = covered
    averaged = acc / norm
    out = np.where(covered_full, averaged, 0.0)
    if first.dtype == np.uint8:
        out = np.round(out).astype(np.uint8)
    else:
        out = out.astype(first.dtype)
    return out


# --- dataset construction ------------------------------------------------------------


def _to_uint8(img: np.ndarray) -> np.ndarray:
    """Full-range 8-bit scaling per image, like an independently exposed frame."""
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo if hi > lo else 1.0
    return np.round((img - lo) / span * 255.0).astype(np.uint8)


def _with_channels(arr: np.ndarray, rgb: bool) -> np.ndarray:
    arr = arr[..., None]
    if rgb:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def coarse_mask(scene: TargetSpec, fine_pitch: float, coarse_pitch: float) -> np.ndarray:
    """Ground-truth bar mask binned onto a camera grid.

    Works below the rasterization sampling limit (bars narrower than the
    camera pixel): a coarse pixel counts as bar when bars cover more than
    half of it.
    """
    fine = ground_truth(scene, fine_pitch).mask.astype(np.float64)
    binned = optics._bin_axis(fine, fine_pitch, coarse_pitch, axis=0)
    binned = optics._bin_axis(binned, fine_pitch, coarse_pitch, axis=1)
    return binned > 0.5


def render_scene_pair(
    scene: TargetSpec,
    lr_cfg: OpticalConfig,
    hr_cfg: OpticalConfig,
    snr_db: float,
    seed: int,
    supersample: int = 2,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Render one scene under both configs and return (lr_on_hr_grid, hr, hr_pitch).

    The LR render is camera-sampled, noised to ``snr_db``, bicubically
    resampled onto the HR grid and registered (integer pixels) against the
    HR render. Outputs are float arrays on the HR grid.
    """
    sim_pitch = hr_cfg.object_pitch / supersample
    pm = rasterize_target(scene, sim_pitch)
    hr_img = optics.camera_sample(optics.render(pm, hr_cfg), hr_cfg)
    lr_img = optics.camera_sample(optics.render(pm, lr_cfg), lr_cfg)

    mask = coarse_mask(scene, sim_pitch, lr_img.pitch)
    mask = mask[: lr_img.shape[0], : lr_img.shape[1]]
    if mask.any() and not mask.all():
        lr_img = optics.add_noise(lr_img, snr_db, seed=seed, signal_mask=mask,
                                  allow_clean_floor=True)
    elif math.isfinite(snr_db):
        raise ValueError("cannot add calibrated noise to a scene with no features")

    # grid-wrap matches the circular topology of the FFT-based renders
    factor = lr_img.pitch / hr_img.pitch
    up = zoom(lr_img.intensity, factor, order=3, mode="grid-wrap", grid_mode=True)
    h = min(up.shape[0], hr_img.shape[0])
    w = min(up.shape[1], hr_img.shape[1])
    up, hr = up[:h, :w], hr_img.intensity[:h, :w]
    up = np.maximum(up, 0.0)

    reg = register_translation(up, hr)
    if reg.shift != (0, 0):
        up = apply_shift(up, reg.shift)
    return up, hr, hr_img.pitch


def build_dataset(
    scenes,
    lr_cfg: OpticalConfig,
    hr_cfg: OpticalConfig,
    snr_db: float,
    tile: int,
    seed: int,
    stride: int | None = None,
    supersample: int = 2,
    rgb: bool = False,
) -> TilePairDataset:
    """Render scenes under both optics, pair up registered tiles.

    Deterministic per seed: scene k uses noise seed ``seed + k``.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("at least one scene is required")
    if lr_cfg.modality != hr_cfg.modality:
        raise ValueError("LR and HR configs must share a modality")
    if optics.rayleigh_limit(lr_cfg) <= optics.rayleigh_limit(hr_cfg):
        raise ValueError("LR config must be strictly lower-resolving than HR config")

    pairs: list[TilePair] = []
    for k, scene in enumerate(scenes):
        up, hr, _ = render_scene_pair(scene, lr_cfg, hr_cfg, snr_db, seed=seed + k,
                                      supersample=supersample)
        src8, exp8 = _to_uint8(up), _to_uint8(hr)
        src_tiles, origins = crop_tiles(src8, tile, stride)
        exp_tiles, _ = crop_tiles(exp8, tile, stride)
        for s, e, o in zip(src_tiles, exp_tiles, origins):
            pairs.append(
                TilePair(
                    source=_with_channels(s, rgb),
                    expected=_with_channels(e, rgb),
                    origin=o,
                    modality=lr_cfg.modality,
                )
            )

    provenance = {
        "seed": int(seed),
        "snr_db": float(snr_db) if math.isfinite(snr_db) else "inf",
        "tile": int(tile),
        "stride": int(stride if stride is not None else tile),
        "supersample": int(supersample),
        "n_scenes": len(scenes),
        "config_hash": hashlib.sha256(
            json.dumps(
                {
                    "lr": lr_cfg.__dict__,
                    "hr": hr_cfg.__dict__,
                    "scenes": [spec_to_dict(s) for s in scenes],
                },
                sort_keys=True,
            ).encode()
        ).hexdigest(),
    }
    return TilePairDataset(pairs=tuple(pairs), tile_size=tile, provenance=provenance)


# --- persistence -----------------------------------------------------------------------


def save_dataset(ds: TilePairDataset, path) -> None:
    header = {
        "tile": ds.tile_size,
        "channels": ds.channels,
        "count": len(ds),
        "modality": ds.modality,
        "origins": [list(p.origin) for p in ds.pairs],
        "provenance": ds.provenance,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in ds.pairs:
            payload = p.source.tobytes() + p.expected.tobytes()
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_dataset(path) -> TilePairDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    (hlen,) = struct.unpack_from("<I", data, 6)
    try:
        header = json.loads(data[10 : 10 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"unreadable header: {exc}") from exc
    tile = header["tile"]
    channels = header["channels"]
    count = header["count"]
    if count < 1:
        raise DatasetFormatError("dataset file declares zero pairs")
    tile_bytes = tile * tile * channels
    record = 2 * tile_bytes + 4
    offset = 10 + hlen
    if len(data) - offset != count * record:
        raise DatasetFormatError(
            f"payload is {len(data) - offset} bytes, expected {count * record} "
            f"(truncated or padded file)"
        )
    pairs = []
    for i in range(count):
        start = offset + i * record
        payload = data[start : start + 2 * tile_bytes]
        (crc,) = struct.unpack_from("<I", data, start + 2 * tile_bytes)
        if zlib.crc32(payload) != crc:
            raise DatasetFormatError(f"CRC mismatch in record {i}")
        src = np.frombuffer(payload[:tile_bytes], dtype=np.uint8).reshape(
            tile, tile, channels
        )
        exp = np.frombuffer(payload[tile_bytes:], dtype=np.uint8).reshape(
            tile, tile, channels
        )
        pairs.append(
            TilePair(
                source=src.copy(),
                expected=exp.copy(),
                origin=tuple(header["origins"][i]),
                modality=header["modality"],
            )
        )
    return TilePairDataset(pairs=tuple(pairs), tile_size=tile,
                           provenance=header["provenance"])
