"""Tests for registration, tiling and dataset persistence."""

import hashlib
import math
import struct

import numpy as np
import pytest

from phasenano.dataset import (
    DatasetFormatError,
    TilePair,
    TilePairDataset,
    apply_shift,
    build_dataset,
    crop_tiles,
    load_dataset,
    register_translation,
    save_dataset,
    stitch_tiles,
)
from phasenano.optics import OpticalConfig
from phasenano.targets import BarGroup, TargetSpec


def smooth_random_image(seed, shape=(64, 64)):
    rng = np.random.default_rng(seed)
    img = rng.random(shape)
    # low-pass so correlation peaks are unambiguous
    F = np.fft.fft2(img)
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.fftfreq(shape[1])[None, :]
    F[np.hypot(fy, fx) > 0.2] = 0.0
    return np.fft.ifft2(F).real


def small_scene(jitter=0.0):
    g = BarGroup(bar_width=600.0, n_bars=3, bar_length=2000.0,
                 origin=(700.0 + jitter, 480.0 + jitter))
    return TargetSpec(groups=(g,), canvas=(4440.0, 2960.0))


LR = OpticalConfig.preset_20x()
HR = OpticalConfig.preset_40x()


class TestRegistration:
    def test_identical_images(self):
        img = smooth_random_image(0)
        reg = register_translation(img, img)
        assert reg.shift == (0, 0)
        assert reg.score == pytest.approx(1.0, abs=1e-9)

    def test_recovers_known_shift(self):
        img = smooth_random_image(1)
        shifted = np.roll(img, (-3, 5), axis=(0, 1))  # dy=-3, dx=+5 applied
        reg = register_translation(img, shifted)
        assert reg.shift == (5, -3)
        assert np.allclose(apply_shift(img, reg.shift), shifted)

    def test_independent_noise_scores_low(self):
        rng = np.random.default_rng(2)
        a = rng.random((64, 64))
        b = rng.random((64, 64))
        reg = register_translation(a, b)
        assert abs(reg.score) < 0.2

    def test_constant_image_rejected(self):
        with pytest.raises(ValueError, match="constant"):
            register_translation(np.ones((16, 16)), np.zeros((16, 16)))

    def test_self_shift_recovered_on_rendered_target(self):
        # register_translation(x, shift(x, d)) = d for |d| <= tile/4
        from phasenano import optics
        from phasenano.targets import rasterize_target

        scene = small_scene()
        pm = rasterize_target(scene, 23.125)
        img = optics.render_pcm(pm, OpticalConfig.preset_40x()).intensity
        tile = img[:128, :128]
        rng = np.random.default_rng(4)
        for _ in range(6):
            dy, dx = rng.integers(-32, 33, size=2)
            reg = register_translation(tile, np.roll(tile, (dy, dx), axis=(0, 1)))
            assert reg.shift == (dx, dy)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            register_translation(np.ones((16, 16)), np.ones((16, 8)))


class TestCropTiles:
    def test_panorama_seven_by_three(self):
        img = np.arange(2100 * 900, dtype=np.float64).reshape(900, 2100)
        tiles, origins = crop_tiles(img, tile=300, stride=300)
        assert len(tiles) == 21
        rows = {o[0] for o in origins}
        cols = {o[1] for o in origins}
        assert len(rows) == 3 and len(cols) == 7

    def test_exact_fit_single_tile(self):
        img = np.ones((256, 256))
        tiles, origins = crop_tiles(img, tile=256)
        assert len(tiles) == 1 and origins == [(0, 0)]

    def test_partial_edges_dropped(self):
        img = np.ones((300, 300))
        tiles, _ = crop_tiles(img, tile=256, stride=256)
        assert len(tiles) == 1

    def test_tile_larger_than_image_rejected(self):
        with pytest.raises(ValueError, match="larger"):
            crop_tiles(np.ones((100, 100)), tile=128)


class TestStitchTiles:
    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(3)
        img = rng.random((900, 2100))
        tiles, origins = crop_tiles(img, tile=300, stride=300)
        out = stitch_tiles(tiles, origins, (900, 2100))
        assert np.array_equal(out, img)

    def test_single_tile_identity(self):
        img = np.full((64, 64), 2.5)
        out = stitch_tiles([img], [(0, 0)], (64, 64))
        assert np.array_equal(out, img)

    def test_overlap_averages_constant_tiles(self):
        tile = np.full((8, 8), 3.0)
        out = stitch_tiles([tile, tile], [(0, 0), (0, 4)], (8, 12))
        assert np.allclose(out, 3.0)

    def test_conflicting_overlap_reports_discrepancy(self):
        a = np.zeros((8, 8))
        b = np.full((8, 8), 2.0)
        with pytest.warns(UserWarning, match="discrepancy 2"):
            out = stitch_tiles([a, b], [(0, 0), (0, 4)], (8, 12))
        assert np.allclose(out[:, 4:8], 1.0)  # averaged overlap


@pytest.fixture(scope="module")
def tiny_dataset():
    scenes = [small_scene(0.0), small_scene(90.0)]
    return build_dataset(scenes, LR, HR, snr_db=math.inf, tile=32, seed=7)


class TestBuildDataset:
    def test_pair_count_and_epoch_bookkeeping(self, tiny_dataset):
        # 3x2 tiles per 96x64 scene, two scenes
        assert len(tiny_dataset) == 12
        assert tiny_dataset.tile_size == 32
        assert tiny_dataset.channels == 1

    def test_source_blurrier_than_expected(self, tiny_dataset):
        for p in tiny_dataset.pairs:
            gs = np.abs(np.gradient(p.source[..., 0].astype(float))).mean()
            ge = np.abs(np.gradient(p.expected[..., 0].astype(float))).mean()
            assert gs < ge

    @pytest.mark.parametrize("modality", ["pcm", "dic"])
    def test_pairs_register_at_zero(self, modality):
        # Bars span the full canvas so every tile holds interior structure,
        # resolvable under the LR optics and commensurate with the LR pixel
        # grid: the regime where tile-level correlation is well posed.
        g = BarGroup(bar_width=1850.0, n_bars=3, duty=0.5, bar_length=5920.0,
                     origin=(370.0, 0.0))
        scene = TargetSpec(groups=(g,), canvas=(11840.0, 5920.0))
        ds = build_dataset([scene], OpticalConfig.preset_20x(modality),
                           OpticalConfig.preset_40x(modality),
                           snr_db=math.inf, tile=64, seed=1)
        assert len(ds) >= 8
        for p in ds.pairs:
            src = p.source[..., 0].astype(float)
            exp = p.expected[..., 0].astype(float)
            assert register_translation(src, exp).shift == (0, 0)

    def test_empty_scene_list_rejected(self):
        with pytest.raises(ValueError, match="scene"):
            build_dataset([], LR, HR, snr_db=20.0, tile=32, seed=0)

    def test_lr_must_be_lower_resolving(self):
        with pytest.raises(ValueError, match="lower-resolving"):
            build_dataset([small_scene()], HR, HR, snr_db=20.0, tile=32, seed=0)

    def test_rgb_export_replicates_channels(self):
        ds = build_dataset([small_scene()], LR, HR, snr_db=math.inf, tile=32,
                           seed=3, rgb=True)
        assert ds.channels == 3
        p = ds.pairs[0]
        assert np.array_equal(p.source[..., 0], p.source[..., 1])
        assert np.array_equal(p.source[..., 0], p.source[..., 2])


class TestPersistence:
    def test_round_trip(self, tiny_dataset, tmp_path):
        path = tmp_path / "pairs.pnbd"
        save_dataset(tiny_dataset, path)
        loaded = load_dataset(path)
        assert len(loaded) == len(tiny_dataset)
        assert loaded.tile_size == tiny_dataset.tile_size
        assert loaded.provenance == tiny_dataset.provenance
        for a, b in zip(loaded.pairs, tiny_dataset.pairs):
            assert np.array_equal(a.source, b.source)
            assert np.array_equal(a.expected, b.expected)
            assert a.origin == b.origin

    def test_dataset_build_and_file_deterministic(self, tmp_path):
        digests = []
        for run in range(2):
            ds = build_dataset([small_scene()], LR, HR, snr_db=10.0, tile=32, seed=5)
            path = tmp_path / f"run{run}.pnbd"
            save_dataset(ds, path)
            digests.append(hashlib.sha256(path.read_bytes()).hexdigest())
        assert digests[0] == digests[1]

    def test_corrupt_payload_detected(self, tiny_dataset, tmp_path):
        path = tmp_path / "pairs.pnbd"
        save_dataset(tiny_dataset, path)
        raw = bytearray(path.read_bytes())
        raw[-100] ^= 0xFF  # flip one payload byte in the last record
        path.write_bytes(bytes(raw))
        with pytest.raises(DatasetFormatError, match="CRC"):
            load_dataset(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.pnbd"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DatasetFormatError, match="magic"):
            load_dataset(path)

    def test_truncated_file_rejected(self, tiny_dataset, tmp_path):
        path = tmp_path / "pairs.pnbd"
        save_dataset(tiny_dataset, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-7])
        with pytest.raises(DatasetFormatError, match="truncated"):
            load_dataset(path)

    def test_empty_pair_file_rejected(self, tmp_path):
        header = b'{"channels": 1, "count": 0, "modality": "pcm", "origins": [], "provenance": {}, "tile": 8}'
        path = tmp_path / "empty.pnbd"
        path.write_bytes(b"PNBD" + struct.pack("<H", 1) + struct.pack("<I", len(header)) + header)
        with pytest.raises(DatasetFormatError, match="zero pairs"):
            load_dataset(path)

    def test_content_hash_stable(self, tiny_dataset):
        assert tiny_dataset.content_hash() == tiny_dataset.content_hash()


class TestTilePairValidation:
    def test_mismatched_tiles_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            TilePair(source=np.zeros((8, 8, 1), dtype=np.uint8),
                     expected=np.zeros((8, 4, 1), dtype=np.uint8),
                     origin=(0, 0), modality="pcm")

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            TilePairDataset(pairs=(), tile_size=8, provenance={})
