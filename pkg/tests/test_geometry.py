import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fanfill.geometry import (
    APEX_BOTTOM,
    APEX_TOP,
    ConeSpec,
    DetectionError,
    cut_region_mask,
    detect_apex,
    load_mask,
    make_cone_mask,
    save_mask,
    shrink_cone,
    validate_mask,
)


def brute_force_cone(spec: ConeSpec) -> np.ndarray:
    """Independent per-pixel oracle: evaluates the threshold formula directly."""
    m = np.zeros((spec.height, spec.width), dtype=np.uint8)
    half = math.radians(spec.spread_deg) / 2.0
    for i in range(spec.height):
        for j in range(spec.width):
            if spec.orientation == APEX_TOP:
                axial = i - spec.apex_row
            else:
                axial = spec.height - i
            if axial > 0 and math.atan(abs(j - spec.apex_col) / axial) <= half:
                m[i, j] = 1
    if spec.orientation == APEX_TOP:
        m[spec.apex_row, spec.apex_col] = 1
    return m


def mask_from_rows(rows):
    return np.array([[int(ch) for ch in row] for row in rows], dtype=np.uint8)


# Frozen 16x16 fixtures, computed once with brute_force_cone (apex (0, 8), apex-top).
GOLDEN_16_THETA60 = mask_from_rows([
    "0000000010000000",
    "0000000010000000",
    "0000000111000000",
    "0000000111000000",
    "0000001111100000",
    "0000001111100000",
    "0000011111110000",
    "0000111111111000",
    "0000111111111000",
    "0001111111111100",
    "0001111111111100",
    "0011111111111110",
    "0011111111111110",
    "0111111111111111",
    "1111111111111111",
    "1111111111111111",
])

GOLDEN_16_THETA90 = mask_from_rows([
    "0000000010000000",
    "0000000111000000",
    "0000001111100000",
    "0000011111110000",
    "0000111111111000",
    "0001111111111100",
    "0011111111111110",
    "0111111111111111",
    "1111111111111111",
    "1111111111111111",
    "1111111111111111",
    "1111111111111111",
    "1111111111111111",
    "1111111111111111",
    "1111111111111111",
    "1111111111111111",
])


class TestConeSpecValidation:
    def test_spread_out_of_range(self):
        with pytest.raises(ValueError, match="spread_deg"):
            ConeSpec(8, 0, 180.0, APEX_TOP, 16, 16)
        with pytest.raises(ValueError, match="spread_deg"):
            ConeSpec(8, 0, 0.0, APEX_TOP, 16, 16)

    def test_apex_out_of_bounds(self):
        with pytest.raises(ValueError, match="apex_col"):
            ConeSpec(16, 0, 90.0, APEX_TOP, 16, 16)
        with pytest.raises(ValueError, match="apex_row"):
            ConeSpec(8, -1, 90.0, APEX_TOP, 16, 16)

    def test_bad_orientation(self):
        with pytest.raises(ValueError, match="orientation"):
            ConeSpec(8, 0, 90.0, "sideways", 16, 16)


class TestMakeConeMask:
    def test_axis_column_always_inside(self):
        # |j - apex_col| = 0 gives angle 0, inside for any spread.
        spec = ConeSpec(32, 0, 90.0, APEX_TOP, 64, 64)
        mask = make_cone_mask(spec)
        assert (mask[1:, 32] == 1).all()
        assert mask[0, 32] == 1  # the apex pixel itself

    def test_near_180_fills_everything_below_apex(self):
        spec = ConeSpec(32, 0, 179.9, APEX_TOP, 64, 64)
        mask = make_cone_mask(spec)
        assert (mask[1:] == 1).all()

    def test_golden_16x16(self):
        spec = ConeSpec(8, 0, 60.0, APEX_TOP, 16, 16)
        mask = make_cone_mask(spec)
        np.testing.assert_array_equal(mask, GOLDEN_16_THETA60)
        np.testing.assert_array_equal(brute_force_cone(spec), GOLDEN_16_THETA60)

    def test_rows_behind_apex_are_outside(self):
        spec = ConeSpec(8, 5, 90.0, APEX_TOP, 16, 16)
        mask = make_cone_mask(spec)
        assert (mask[:5] == 0).all()
        assert mask[5].sum() == 1 and mask[5, 8] == 1

    @pytest.mark.parametrize("orientation", [APEX_TOP, APEX_BOTTOM])
    @pytest.mark.parametrize("theta", [30.0, 60.0, 90.0])
    @pytest.mark.parametrize("apex_col,apex_row", [(8, 0), (4, 2), (15, 0)])
    def test_matches_bruteforce(self, orientation, theta, apex_col, apex_row):
        spec = ConeSpec(apex_col, apex_row, theta, orientation, 16, 16)
        np.testing.assert_array_equal(make_cone_mask(spec), brute_force_cone(spec))

    def test_apex_bottom_uses_distance_to_bottom_edge(self):
        # The literal bottom-apex form ignores apex_row: every row has
        # positive axial distance H - i.
        spec = ConeSpec(8, 0, 60.0, APEX_BOTTOM, 16, 16)
        mask = make_cone_mask(spec)
        assert mask[15, 8] == 1  # one row above the conceptual apex
        assert mask[15, 0] == 0  # atan(8/1) is far outside a 30 deg half-angle

    @settings(max_examples=40, deadline=None)
    @given(
        theta1=st.floats(min_value=1.0, max_value=179.0),
        theta2=st.floats(min_value=1.0, max_value=179.0),
        apex_col=st.integers(min_value=0, max_value=23),
        orientation=st.sampled_from([APEX_TOP, APEX_BOTTOM]),
    )
    def test_monotone_in_spread(self, theta1, theta2, apex_col, orientation):
        lo, hi = sorted((theta1, theta2))
        narrow = make_cone_mask(ConeSpec(apex_col, 0, lo, orientation, 24, 24))
        wide = make_cone_mask(ConeSpec(apex_col, 0, hi, orientation, 24, 24))
        assert (narrow <= wide).all()

    @settings(max_examples=25, deadline=None)
    @given(theta=st.floats(min_value=5.0, max_value=175.0))
    def test_mirror_symmetry_centered_apex(self, theta):
        # Odd width, apex exactly centered: mask is symmetric about that column.
        spec = ConeSpec(12, 0, theta, APEX_TOP, 25, 25)
        mask = make_cone_mask(spec)
        np.testing.assert_array_equal(mask, mask[:, ::-1])


class TestShrinkCone:
    def test_side_cut_arithmetic(self):
        spec = ConeSpec(8, 0, 90.0, APEX_TOP, 16, 16)
        assert shrink_cone(spec, 15.0).spread_deg == 60.0

    def test_zero_cut_is_identity(self):
        spec = ConeSpec(8, 0, 90.0, APEX_TOP, 16, 16)
        shrunk = shrink_cone(spec, 0.0)
        assert shrunk == spec
        np.testing.assert_array_equal(make_cone_mask(shrunk), make_cone_mask(spec))

    def test_cut_too_large(self):
        spec = ConeSpec(8, 0, 90.0, APEX_TOP, 16, 16)
        with pytest.raises(ValueError, match="too large"):
            shrink_cone(spec, 45.0)

    def test_negative_cut(self):
        spec = ConeSpec(8, 0, 90.0, APEX_TOP, 16, 16)
        with pytest.raises(ValueError, match=">= 0"):
            shrink_cone(spec, -1.0)

    def test_shrunk_mask_equals_direct_oracle(self):
        spec = ConeSpec(8, 0, 90.0, APEX_TOP, 16, 16)
        shrunk = shrink_cone(spec, 15.0)
        np.testing.assert_array_equal(make_cone_mask(shrunk), brute_force_cone(shrunk))
        np.testing.assert_array_equal(make_cone_mask(shrunk), GOLDEN_16_THETA60)


class TestCutRegionMask:
    def test_identical_masks_give_empty_region(self):
        m = GOLDEN_16_THETA90
        assert cut_region_mask(m, m).sum() == 0

    def test_empty_shrunk_returns_full(self):
        m = GOLDEN_16_THETA90
        np.testing.assert_array_equal(cut_region_mask(m, np.zeros_like(m)), m)

    def test_golden_difference(self):
        region = cut_region_mask(GOLDEN_16_THETA90, GOLDEN_16_THETA60)
        np.testing.assert_array_equal(region, GOLDEN_16_THETA90 & ~GOLDEN_16_THETA60)
        assert region.sum() == GOLDEN_16_THETA90.sum() - GOLDEN_16_THETA60.sum()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes differ"):
            cut_region_mask(GOLDEN_16_THETA90, np.zeros((8, 8), dtype=np.uint8))

    def test_not_contained(self):
        with pytest.raises(ValueError, match="not contained"):
            cut_region_mask(GOLDEN_16_THETA60, GOLDEN_16_THETA90)

    def test_rejects_non_binary(self):
        bad = GOLDEN_16_THETA90.astype(np.int64) * 3
        with pytest.raises(ValueError, match="only 0 and 1"):
            validate_mask(bad)


class TestDetectApex:
    @pytest.mark.parametrize("theta", [60.0, 90.0])
    def test_render_then_detect_round_trip(self, theta):
        spec = ConeSpec(64, 0, theta, APEX_TOP, 128, 128)
        frame = make_cone_mask(spec).astype(np.float64) * 0.5
        found = detect_apex(frame)
        assert abs(found.spread_deg - theta) <= 2.0
        assert abs(found.apex_col - spec.apex_col) <= 2
        assert abs(found.apex_row - spec.apex_row) <= 2

    def test_off_center_apex(self):
        spec = ConeSpec(50, 4, 75.0, APEX_TOP, 128, 128)
        frame = make_cone_mask(spec).astype(np.float64) * 0.8
        found = detect_apex(frame)
        assert abs(found.spread_deg - 75.0) <= 2.0
        assert abs(found.apex_col - 50) <= 2
        assert abs(found.apex_row - 4) <= 2

    def test_all_zero_frame_raises(self):
        with pytest.raises(DetectionError, match="background threshold"):
            detect_apex(np.zeros((64, 64)))

    def test_single_column_is_degenerate(self):
        frame = np.zeros((64, 64))
        frame[:, 30] = 0.5
        with pytest.raises(DetectionError):
            detect_apex(frame)


class TestMaskIO:
    def test_png_round_trip_is_bit_exact(self, tmp_path):
        spec = ConeSpec(8, 0, 60.0, APEX_TOP, 16, 16)
        mask = make_cone_mask(spec)
        path = tmp_path / "mask.png"
        save_mask(path, mask, spec)
        loaded, loaded_spec = load_mask(path)
        np.testing.assert_array_equal(loaded, mask)
        assert loaded_spec == spec

    def test_load_rejects_grayscale_non_binary(self, tmp_path):
        from PIL import Image

        img = Image.fromarray(np.full((8, 8), 40, dtype=np.uint8), mode="L")
        img.save(tmp_path / "bad.png")
        (tmp_path / "bad.json").write_text(
            '{"apex_col": 4, "apex_row": 0, "spread_deg": 60,'
            ' "orientation": "apex-top", "height": 8, "width": 8}'
        )
        with pytest.raises(ValueError, match="binary"):
            load_mask(tmp_path / "bad.png")
