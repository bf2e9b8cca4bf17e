"""Built-in run profiles: a laptop-scale "desk" setup and the full-scale one.

The desk profile keeps every stage small enough for a CPU: 64 px tiles, ten
jittered copies of a twelve-group target (7x3 = 21 tiles each, 210 pairs per
modality), ten training epochs and a five-step SNR ladder. The "full-scale"
profile mirrors the hardware-scale bookkeeping (256 px tiles, hundred-plus
epochs, thousands of pairs per epoch) and is documented as a long-running
opt-in, not part of any automated gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .optics import OpticalConfig
from .targets import BarGroup, TargetSpec

__all__ = ["Profile", "DESK", "FULL_SCALE", "desk_target", "desk_scenes", "get_profile"]

DESK_BAR_WIDTHS = (800.0, 600.0, 500.0, 400.0, 300.0, 200.0)


def desk_target(jitter: tuple[float, float] = (0.0, 0.0)) -> TargetSpec:
    """Twelve-group benchmark target sized for a 448x192 px high-res grid.

    One row of vertical-bar groups, one of horizontal-bar groups, widths from
    800 nm down to 200 nm, which brackets the low-res system's 884.5 nm
    Rayleigh limit from below.
    """
    canvas = (20720.0, 8880.0)  # 448 x 192 px at 46.25 nm/px
    margin = 250.0
    extents = [5.0 * w for w in DESK_BAR_WIDTHS]
    gap = (canvas[0] - 2 * margin - sum(extents)) / (len(DESK_BAR_WIDTHS) - 1 + 4)
    dx, dy = jitter
    groups: list[BarGroup] = []
    for row, orientation in enumerate(("vertical", "horizontal")):
        x = margin + dx
        y = margin + row * (4000.0 + 300.0) + dy
        for w in DESK_BAR_WIDTHS:
            groups.append(BarGroup(bar_width=w, n_bars=3, duty=0.5,
                                   orientation=orientation, origin=(x, y)))
            x += 5.0 * w + gap
    return TargetSpec(groups=tuple(groups), canvas=canvas, feature_height=100.0)


def desk_scenes(n_scenes: int, seed: int) -> list[TargetSpec]:
    """Jittered variants of the desk target; scene 0 keeps the base layout."""
    rng = np.random.default_rng(seed)
    scenes = []
    for k in range(n_scenes):
        if k == 0:
            scenes.append(desk_target())
        else:
            scenes.append(desk_target(tuple(rng.uniform(10.0, 200.0, size=2))))
    return scenes


@dataclass(frozen=True)
class Profile:
    name: str
    tile: int
    n_scenes: int
    epochs: int
    train_snr_db: float
    snr_ladder: tuple[float, ...]
    base_channels: int
    batch_size: int
    lr: float
    supersample: int = 2
    architectures: tuple[str, ...] = ("unet5", "onet5", "onet7", "thetanet")
    # scene-to-SNR assignment for training; weighting toward clean scenes
    # keeps the deblurring signal strong while covering the whole ladder
    snr_schedule: tuple[float, ...] | None = None
    notes: str = ""

    def lr_cfg(self, modality: str) -> OpticalConfig:
        return OpticalConfig.preset_20x(modality)

    def hr_cfg(self, modality: str) -> OpticalConfig:
        return OpticalConfig.preset_40x(modality)

    def scenes(self, seed: int) -> list[TargetSpec]:
        return desk_scenes(self.n_scenes, seed)

    def eval_target(self) -> TargetSpec:
        return desk_target()

    def training_dataset(self, modality: str, seed: int):
        """Tile pairs with scenes cycled across the SNR ladder.

        Spreading the source SNR over the evaluation ladder trains models
        that stay usable at every rung instead of specializing to one noise
        level.
        """
        from .dataset import TilePairDataset, build_dataset

        scenes = self.scenes(seed)
        schedule = self.snr_schedule or self.snr_ladder
        lr_cfg, hr_cfg = self.lr_cfg(modality), self.hr_cfg(modality)
        pairs = []
        provenances = []
        for k, scene in enumerate(scenes):
            snr = schedule[k % len(schedule)]
            part = build_dataset([scene], lr_cfg, hr_cfg, snr_db=snr,
                                 tile=self.tile, seed=seed + k,
                                 supersample=self.supersample)
            pairs.extend(part.pairs)
            provenances.append(part.provenance)
        return TilePairDataset(
            pairs=tuple(pairs),
            tile_size=self.tile,
            provenance={"profile": self.name, "modality": modality, "seed": seed,
                        "snr_cycle": [str(s) for s in schedule],
                        "parts": provenances},
        )


DESK = Profile(
    name="desk",
    tile=64,
    n_scenes=10,
    epochs=10,
    train_snr_db=20.0,
    snr_ladder=(5.0, 10.0, 20.0, 30.0, math.inf),
    base_channels=4,
    batch_size=8,
    lr=1e-3,
    snr_schedule=(math.inf, 20.0, 5.0, math.inf, 30.0, 10.0, math.inf, 20.0, 5.0,
                  math.inf),
    notes="laptop-scale defaults: 10 scenes x 21 tiles = 210 pairs per modality",
)

FULL_SCALE = Profile(
    name="full-scale",
    tile=256,
    n_scenes=40,
    epochs=101,
    train_snr_db=20.0,
    snr_ladder=(5.0, 10.0, 20.0, 30.0, math.inf),
    base_channels=16,
    batch_size=4,
    lr=1e-3,
    notes="hardware-scale bookkeeping; expect many hours on CPU, not CI-gated",
)

MINI = Profile(
    name="mini",
    tile=64,
    n_scenes=2,
    epochs=2,
    train_snr_db=20.0,
    snr_ladder=(10.0, math.inf),
    base_channels=4,
    batch_size=8,
    lr=1e-3,
    architectures=("unet5",),
    notes="seconds-scale smoke profile for CLI checks and demos",
)

_PROFILES = {p.name: p for p in (DESK, FULL_SCALE, MINI)}


def get_profile(name: str) -> Profile:
    try:
        return _PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(_PROFILES)}")
