"""Tests for synthetic bar-target generation and its ground truth."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phasenano.pngio import read_png, read_sidecar, write_png16
from phasenano.targets import (
    BarGroup,
    SamplingError,
    TargetSpec,
    TargetSpecError,
    ground_truth,
    group_centerlines,
    load_spec_json,
    rasterize_target,
    save_spec_json,
    spec_from_dict,
    spec_to_dict,
    standard_test_spec,
)


def single_group_spec(bar_width=200.0, n_bars=3, duty=0.5, orientation="vertical",
                      feature_height=100.0, margin=1000.0):
    g = BarGroup(bar_width=bar_width, n_bars=n_bars, duty=duty,
                 orientation=orientation, origin=(margin, margin))
    box = g.bbox
    canvas = (box[2] + margin, box[3] + margin)
    return TargetSpec(groups=(g,), canvas=canvas, feature_height=feature_height)


def reference_pixel_count(spec, pitch):
    """Independent rasterization: per-axis pixel-centre counting."""
    total = 0
    for g in spec.groups:
        x0, y0 = g.origin
        if g.orientation == "vertical":
            along, across0 = x0, y0
            length = g.length
        else:
            along, across0 = y0, x0
            length = g.length
        bar_px = 0
        for k in range(g.n_bars):
            b0 = along + k * g.period
            # pixel centres (j + 0.5) * pitch falling in [b0, b0 + bar_width)
            j_lo = int(np.ceil(b0 / pitch - 0.5))
            j_hi = int(np.ceil((b0 + g.bar_width) / pitch - 0.5))
            bar_px += j_hi - j_lo
        i_lo = int(np.ceil(across0 / pitch - 0.5))
        i_hi = int(np.ceil((across0 + length) / pitch - 0.5))
        total += bar_px * (i_hi - i_lo)
    return total


class TestBarGroup:
    def test_period_exceeds_width(self):
        g = BarGroup(bar_width=200.0, duty=0.5)
        assert g.period == pytest.approx(400.0)
        assert g.period > g.bar_width

    def test_invalid_parameters_rejected(self):
        with pytest.raises(TargetSpecError):
            BarGroup(bar_width=-1.0)
        with pytest.raises(TargetSpecError):
            BarGroup(bar_width=100.0, n_bars=0)
        with pytest.raises(TargetSpecError):
            BarGroup(bar_width=100.0, duty=1.0)
        with pytest.raises(TargetSpecError):
            BarGroup(bar_width=100.0, orientation="diagonal")

    def test_centerlines_spacing(self):
        # 3-bar group, width 200 nm, duty 0.5: centerlines 400 nm apart
        g = BarGroup(bar_width=200.0, n_bars=3, duty=0.5, origin=(1000.0, 500.0))
        lines = group_centerlines(g)
        assert lines == pytest.approx([1100.0, 1500.0, 1900.0])
        assert np.diff(lines) == pytest.approx([400.0, 400.0])


class TestTargetSpec:
    def test_overlapping_groups_rejected(self):
        g1 = BarGroup(bar_width=200.0, origin=(100.0, 100.0))
        g2 = BarGroup(bar_width=200.0, origin=(200.0, 200.0))
        with pytest.raises(TargetSpecError, match="overlap"):
            TargetSpec(groups=(g1, g2), canvas=(5000.0, 5000.0))

    def test_group_outside_canvas_rejected(self):
        g = BarGroup(bar_width=400.0, origin=(100.0, 100.0))
        with pytest.raises(TargetSpecError, match="outside"):
            TargetSpec(groups=(g,), canvas=(1000.0, 1000.0))

    def test_origin_jitter_shifts_all_groups(self):
        spec = single_group_spec()
        moved = spec.with_origin_jitter(50.0, -30.0)
        assert moved.groups[0].origin == (1050.0, 970.0)


class TestRasterize:
    def test_bar_and_period_pixel_widths(self):
        # bar_width=200, duty=0.5, pitch=10: bars 20 px wide, period 40 px
        spec = single_group_spec(bar_width=200.0, duty=0.5)
        pm = rasterize_target(spec, pitch=10.0)
        row = pm.opd[pm.shape[0] // 2]
        on = np.flatnonzero(row != 0.0)
        runs = np.split(on, np.flatnonzero(np.diff(on) > 1) + 1)
        assert [len(r) for r in runs] == [20, 20, 20]
        starts = [r[0] for r in runs]
        assert np.diff(starts).tolist() == [40, 40]

    def test_delta_opd_from_indices(self):
        # n_feature=1.49, n_mount=1.70, height=100 nm: delta = -21 nm on bars
        spec = single_group_spec(feature_height=100.0)
        pm = rasterize_target(spec, pitch=10.0, refractive_indices=(1.49, 1.70))
        levels = np.unique(pm.opd)
        assert levels == pytest.approx([-21.0, 0.0])

    def test_empty_spec_gives_uniform_map(self):
        spec = TargetSpec(groups=(), canvas=(1000.0, 800.0), background_opd=5.0)
        pm = rasterize_target(spec, pitch=10.0)
        assert pm.shape == (80, 100)
        assert np.all(pm.opd == 5.0)

    def test_deterministic_and_idempotent(self):
        spec = single_group_spec()
        a = rasterize_target(spec, pitch=10.0)
        b = rasterize_target(spec, pitch=10.0)
        assert np.array_equal(a.opd, b.opd)

    def test_pitch_too_coarse_rejected(self):
        spec = single_group_spec(bar_width=100.0)
        with pytest.raises(SamplingError):
            rasterize_target(spec, pitch=30.0)

    def test_halving_pitch_doubles_bar_width(self):
        spec = single_group_spec(bar_width=170.0)
        for pitch in (20.0, 10.0):
            pm = rasterize_target(spec, pitch=pitch)
            row = pm.opd[pm.shape[0] // 2] != 0.0
            on = np.flatnonzero(row)
            runs = np.split(on, np.flatnonzero(np.diff(on) > 1) + 1)
            if pitch == 20.0:
                coarse = [len(r) for r in runs]
            else:
                fine = [len(r) for r in runs]
        for c, f in zip(coarse, fine):
            assert abs(f - 2 * c) <= 2  # +-1 px per edge


class TestGroundTruth:
    def test_mask_matches_phase_map(self):
        spec = single_group_spec(bar_width=140.0, orientation="horizontal")
        pm = rasterize_target(spec, pitch=10.0)
        gt = ground_truth(spec, pitch=10.0)
        assert gt.shape == pm.shape
        assert np.array_equal(gt.mask, pm.opd != spec.background_opd)

    def test_pixel_count_against_independent_rasterization(self):
        spec = single_group_spec(bar_width=230.0, n_bars=4, duty=0.4)
        gt = ground_truth(spec, pitch=17.0)
        assert int(gt.mask.sum()) == reference_pixel_count(spec, 17.0)

    def test_no_groups_all_false(self):
        spec = TargetSpec(groups=(), canvas=(500.0, 500.0))
        gt = ground_truth(spec, pitch=10.0)
        assert not gt.mask.any()
        assert gt.groups == ()

    def test_centerline_records(self):
        spec = single_group_spec(bar_width=200.0, n_bars=3)
        gt = ground_truth(spec, pitch=10.0)
        rec = gt.groups[0]
        assert rec.bar_width == 200.0
        assert np.diff(rec.centerlines) == pytest.approx([400.0, 400.0])

    def test_bar_area_converges_to_analytic(self):
        spec = single_group_spec(bar_width=230.0, n_bars=3, duty=0.5)
        g = spec.groups[0]
        analytic = g.n_bars * g.bar_width * g.length
        errs = []
        for pitch in (40.0, 10.0):
            gt = ground_truth(spec, pitch=pitch)
            area = gt.mask.sum() * pitch**2
            errs.append(abs(area - analytic))
        assert errs[1] < errs[0]


class TestStandardSpec:
    def test_contains_required_groups(self):
        spec = standard_test_spec()
        widths = sorted({g.bar_width for g in spec.groups})
        assert 200.0 in widths and 170.0 in widths
        assert min(widths) == 20.0
        assert {g.orientation for g in spec.groups} == {"horizontal", "vertical"}
        for g in spec.groups:
            assert g.n_bars >= 3

    def test_full_width_range(self):
        widths = {g.bar_width for g in standard_test_spec().groups}
        assert widths == {600.0, 500.0, 400.0, 200.0, 170.0, 140.0, 100.0, 60.0, 20.0}


class TestSerialization:
    def test_json_round_trip(self, tmp_path):
        spec = standard_test_spec()
        path = tmp_path / "spec.json"
        save_spec_json(spec, path)
        assert load_spec_json(path) == spec

    def test_dict_round_trip(self):
        spec = single_group_spec()
        assert spec_from_dict(spec_to_dict(spec)) == spec

    def test_malformed_document_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"groups": [{"bar_width_nm": 100.0}]}))
        with pytest.raises(TargetSpecError):
            load_spec_json(path)

    def test_png_export_round_trip(self, tmp_path):
        spec = single_group_spec()
        pm = rasterize_target(spec, pitch=10.0)
        path = tmp_path / "phase.png"
        write_png16(pm.opd, pm.pitch, path, meta={"kind": "phase_map"})
        sidecar = read_sidecar(path)
        assert sidecar["pitch_nm"] == 10.0
        arr = read_png(path)
        # two-level map comes back as exactly two gray levels
        assert set(np.unique(arr)) == {0, 65535}
        lo, hi = sidecar["value_min"], sidecar["value_max"]
        restored = lo + arr.astype(float) / 65535.0 * (hi - lo)
        assert np.allclose(restored, pm.opd)


@settings(max_examples=25, deadline=None)
@given(
    bar_width=st.floats(min_value=60.0, max_value=800.0),
    n_bars=st.integers(min_value=1, max_value=5),
    duty=st.floats(min_value=0.2, max_value=0.8),
    orientation=st.sampled_from(["vertical", "horizontal"]),
)
def test_mask_and_opd_always_agree(bar_width, n_bars, duty, orientation):
    g = BarGroup(bar_width=bar_width, n_bars=n_bars, duty=duty,
                 orientation=orientation, origin=(500.0, 500.0))
    box = g.bbox
    spec = TargetSpec(groups=(g,), canvas=(box[2] + 500.0, box[3] + 500.0))
    pitch = bar_width / 8.0
    pm = rasterize_target(spec, pitch=pitch)
    gt = ground_truth(spec, pitch=pitch)
    assert np.array_equal(gt.mask, pm.opd != spec.background_opd)
    assert gt.mask.sum() == reference_pixel_count(spec, pitch)
