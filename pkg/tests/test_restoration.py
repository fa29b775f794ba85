import numpy as np
import pytest

from mpxscreen.errors import BackendLoadError, InvalidInputError
from mpxscreen.imaging import DecisionReason
from mpxscreen.restoration import (
    FALLBACK_SUFFIX,
    BicubicBackend,
    RestorationBackend,
    RestorationPolicy,
    load_restoration_backend,
    restore,
)
from tests.conftest import make_image


class ExplodingBackend(RestorationBackend):
    name = "exploding"

    def upscale(self, image, scale):
        raise RuntimeError("no weights")


class TestPolicy:
    def test_defaults(self):
        policy = RestorationPolicy()
        assert policy.min_side_trigger == 224
        assert policy.upscale_factor == 2
        assert policy.max_output_side == 2048

    def test_invalid_factor(self):
        with pytest.raises(InvalidInputError):
            RestorationPolicy(upscale_factor=0)


class TestRestore:
    def test_above_trigger_unchanged(self):
        img = make_image(512, 512, seed=1)
        out, decision = restore(img, RestorationPolicy())
        assert not decision.applied
        assert decision.reason == DecisionReason.NOT_REQUESTED
        assert out is img

    def test_small_image_doubles(self):
        img = make_image(150, 100, seed=2)
        out, decision = restore(img, RestorationPolicy())
        assert decision.applied
        assert decision.reason == DecisionReason.OK
        assert (out.width, out.height) == (200, 300)

    def test_never_shrinks(self):
        img = make_image(100, 4000, seed=3)  # min side 100 triggers, max side past cap
        out, decision = restore(img, RestorationPolicy())
        assert decision.applied
        assert out.width >= img.width and out.height >= img.height

    def test_cap_limits_upscale(self):
        img = make_image(100, 1500, seed=4)
        out, decision = restore(img, RestorationPolicy())
        assert max(out.width, out.height) <= 2048
        # scale clamped to 2048/1500 rather than the factor of 2
        assert out.width == round(1500 * 2048 / 1500)

    def test_aspect_ratio_within_one_pixel(self, rng):
        policy = RestorationPolicy()
        for _ in range(50):
            h = int(rng.integers(10, 223))
            w = int(rng.integers(10, 223))
            out, _ = restore(make_image(h, w), policy)
            assert abs(out.width / out.height - w / h) * out.height <= 1.0 + 1e-9

    def test_backend_used_when_present(self):
        calls = []

        class Doubler(RestorationBackend):
            name = "doubler"

            def upscale(self, image, scale):
                calls.append(scale)
                return BicubicBackend().upscale(image, scale)

        img = make_image(100, 100, seed=5)
        out, decision = restore(img, RestorationPolicy(), Doubler())
        assert calls == [2.0]
        assert decision.stage_name == "restoration"
        assert (out.width, out.height) == (200, 200)

    def test_backend_failure_falls_back_to_bicubic(self):
        img = make_image(100, 100, seed=6)
        out, decision = restore(img, RestorationPolicy(), ExplodingBackend())
        assert decision.applied
        assert decision.reason == DecisionReason.OK
        assert decision.stage_name.endswith(FALLBACK_SUFFIX)
        assert (out.width, out.height) == (200, 200)

    def test_backend_wrong_dims_corrected(self):
        class Off(RestorationBackend):
            name = "off-by-some"

            def upscale(self, image, scale):
                return BicubicBackend().upscale(image, scale * 1.5)

        img = make_image(100, 100, seed=7)
        out, _ = restore(img, RestorationPolicy(), Off())
        assert (out.width, out.height) == (200, 200)


class TestLoadRestorationBackend:
    def test_builtin_bicubic(self):
        assert isinstance(load_restoration_backend("builtin:bicubic"), BicubicBackend)

    def test_missing_file(self, tmp_path):
        with pytest.raises(BackendLoadError):
            load_restoration_backend(str(tmp_path / "missing.pt"))

    def test_torchscript_upscaler(self, tmp_path):
        import torch

        class NearestDouble(torch.nn.Module):
            def forward(self, x):
                return torch.nn.functional.interpolate(x, scale_factor=2.0, mode="nearest")

        path = tmp_path / "sr.pt"
        torch.jit.script(NearestDouble()).save(str(path))
        backend = load_restoration_backend(str(path))
        img = make_image(50, 60, seed=8)
        out, decision = restore(img, RestorationPolicy(), backend)
        assert decision.applied
        assert decision.stage_name == "restoration"
        assert (out.width, out.height) == (120, 100)
