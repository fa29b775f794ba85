import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpxscreen.errors import InvalidInputError
from mpxscreen.imaging import (
    BinaryMask,
    DecisionReason,
    ScreeningImage,
    StageDecision,
    apply_mask,
    blackout_fraction,
    resize,
)
from tests.conftest import make_image


def mask_of(bits):
    return BinaryMask(bits=np.asarray(bits, dtype=bool))


class TestScreeningImage:
    def test_rejects_wrong_channel_count(self):
        with pytest.raises(InvalidInputError):
            ScreeningImage(pixels=np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(InvalidInputError):
            ScreeningImage(pixels=np.zeros((4, 4, 4), dtype=np.uint8))

    def test_rejects_zero_dimensions(self):
        with pytest.raises(InvalidInputError):
            ScreeningImage(pixels=np.zeros((0, 4, 3), dtype=np.uint8))

    def test_rejects_non_uint8(self):
        with pytest.raises(InvalidInputError):
            ScreeningImage(pixels=np.zeros((4, 4, 3), dtype=np.float32))

    def test_pixels_are_read_only(self):
        img = make_image(4, 4, value=7)
        with pytest.raises(ValueError):
            img.pixels[0, 0, 0] = 1

    def test_dimensions(self):
        img = make_image(5, 9)
        assert (img.width, img.height) == (9, 5)


class TestBlackoutFraction:
    def test_all_foreground_is_zero(self):
        assert blackout_fraction(mask_of(np.ones((10, 10)))) == 0.0

    def test_all_background_is_one(self):
        assert blackout_fraction(mask_of(np.zeros((10, 10)))) == 1.0

    def test_ninety_of_hundred(self):
        # direct count oracle: 90 false cells out of 100
        bits = np.ones(100, dtype=bool)
        bits[:90] = False
        assert blackout_fraction(mask_of(bits.reshape(10, 10))) == 0.90

    def test_zero_area_mask_rejected(self):
        with pytest.raises(InvalidInputError):
            blackout_fraction(mask_of(np.ones((0, 0))))

    @given(arrays(np.bool_, st.tuples(st.integers(1, 24), st.integers(1, 24))))
    def test_complement_sums_to_one(self, bits):
        m = mask_of(bits)
        foreground = np.count_nonzero(bits) / bits.size
        assert blackout_fraction(m) + foreground == 1.0


class TestApplyMask:
    def test_all_true_is_identity(self):
        img = make_image(6, 8, seed=3)
        out = apply_mask(img, mask_of(np.ones((6, 8))))
        assert np.array_equal(out.pixels, img.pixels)

    def test_all_false_blacks_out(self):
        img = make_image(6, 8, seed=4)
        out = apply_mask(img, mask_of(np.zeros((6, 8))))
        assert np.all(out.pixels == 0)

    def test_single_foreground_pixel(self):
        # per-pixel oracle on a 2x2 image
        img = make_image(2, 2, seed=5)
        bits = np.zeros((2, 2), dtype=bool)
        bits[0, 0] = True
        out = apply_mask(img, mask_of(bits))
        assert np.array_equal(out.pixels[0, 0], img.pixels[0, 0])
        assert np.all(out.pixels[0, 1] == 0)
        assert np.all(out.pixels[1, 0] == 0)
        assert np.all(out.pixels[1, 1] == 0)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            apply_mask(make_image(4, 4), mask_of(np.ones((4, 5))))

    @given(
        arrays(np.uint8, (9, 7, 3)),
        arrays(np.bool_, (9, 7)),
    )
    @settings(max_examples=50)
    def test_idempotent_and_preserves_foreground(self, pixels, bits):
        img = ScreeningImage(pixels=pixels)
        m = mask_of(bits)
        once = apply_mask(img, m)
        twice = apply_mask(once, m)
        assert np.array_equal(once.pixels, twice.pixels)
        assert np.array_equal(once.pixels[bits], img.pixels[bits])


class TestResize:
    def test_same_size_is_exact_noop(self):
        img = make_image(224, 224, seed=6)
        out = resize(img, 224, 224)
        assert np.array_equal(out.pixels, img.pixels)

    def test_constant_image_stays_constant(self):
        img = make_image(448, 448, value=128)
        out = resize(img, 224, 224)
        assert (out.width, out.height) == (224, 224)
        assert np.all(out.pixels == 128)

    def test_upscale_shape(self):
        out = resize(make_image(80, 100), 224, 224)
        assert (out.width, out.height) == (224, 224)

    def test_non_positive_target_rejected(self):
        with pytest.raises(InvalidInputError):
            resize(make_image(4, 4), 0, 10)

    @given(
        st.integers(1, 255),
        st.integers(1, 40),
        st.integers(1, 40),
        st.integers(1, 60),
        st.integers(1, 60),
    )
    @settings(max_examples=40)
    def test_constant_invariance_any_size(self, value, h, w, th, tw):
        out = resize(make_image(h, w, value=value), tw, th)
        assert np.all(out.pixels == value)


class TestStageDecision:
    def test_bypassed_cannot_be_ok(self):
        with pytest.raises(InvalidInputError):
            StageDecision(
                stage_name="restoration",
                applied=False,
                blackout_fraction=0.0,
                reason=DecisionReason.OK,
            )

    def test_fraction_bounds(self):
        with pytest.raises(InvalidInputError):
            StageDecision(
                stage_name="restoration",
                applied=True,
                blackout_fraction=1.5,
                reason=DecisionReason.OK,
            )
