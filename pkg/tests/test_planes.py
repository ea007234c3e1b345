import numpy as np
import pytest
import torch

from errors import ConfigError, ShapeError
from planes import (adaptive_scale, cascade_schedule, initial_planes, preset_range,
                    resample_planes, upsample_depth)
from warp import DTYPE


class TestDepthScaling:
    def test_nearest_depth_maps_to_C(self):
        scaling, delta1 = adaptive_scale(0.37, 5.2, C=100.0, M1=48)
        assert scaling.scale(0.37) == 100.0
        assert scaling.f == pytest.approx(100.0 / 0.37)
        assert delta1 == pytest.approx((scaling.f * 5.2 - 100.0) / 48)
        assert scaling.unscale(scaling.scale(3.0)) == pytest.approx(3.0)

    def test_tenfold_range_spans_100_to_1000(self):
        scaling, delta1 = adaptive_scale(1.0, 10.0, C=100.0, M1=48)
        assert scaling.f == 100.0
        assert delta1 == 18.75
        assert scaling.scaled_max == 1000.0

    @pytest.mark.parametrize("d_min, d_max", [(0.0, 1.0), (2.0, 1.0), (-1.0, 3.0)])
    def test_bad_range_rejected(self, d_min, d_max):
        with pytest.raises(ConfigError):
            adaptive_scale(d_min, d_max)

    def test_preset_is_literal(self):
        scaling, delta1 = preset_range(425.0, 10.6, 48)
        assert scaling.f == 1.0
        assert scaling.C == 425.0
        assert delta1 == 10.6
        assert scaling.d_max == pytest.approx(425.0 + 48 * 10.6)


class TestCascadeSchedule:
    def test_dtu_preset_halves_exactly(self):
        schedule = cascade_schedule(48, 10.6, 3)
        assert schedule.M == (48, 24, 12)
        assert schedule.delta == (10.6, 5.3, 2.65)
        assert schedule.res_divisors == (16, 4, 1)
        assert schedule.to_dict()["resolutions"] == ["1/16", "1/4", "1"]

    def test_single_stage(self):
        schedule = cascade_schedule(32, 2.0, 1)
        assert schedule.M == (32,)
        assert schedule.res_divisors == (1,)

    def test_indivisible_plane_count_rejected(self):
        with pytest.raises(ConfigError):
            cascade_schedule(50, 1.0, 3)

    def test_too_few_planes_in_last_stage(self):
        with pytest.raises(ConfigError):
            cascade_schedule(4, 1.0, 3)


class TestPlaneSets:
    def test_initial_planes(self):
        planes = initial_planes(100.0, 2.5, 8)
        np.testing.assert_allclose(planes.uniform.numpy(), 100.0 + 2.5 * np.arange(1, 9))
        assert planes.depth_maps(3, 4).shape == (8, 3, 4)

    def test_resampled_planes_centred_on_estimate(self, rng):
        D = torch.tensor(rng.uniform(150, 200, size=(4, 5)), dtype=DTYPE)
        planes = resample_planes(D, 12, 1.5)
        maps = planes.depth_maps(4, 5)
        np.testing.assert_allclose(maps[5].numpy(), D.numpy(), atol=1e-12)
        np.testing.assert_allclose((maps[1:] - maps[:-1]).numpy(), 1.5, atol=1e-12)

    def test_floor_clamps_near_planes(self):
        D = torch.full((2, 2), 1.0, dtype=DTYPE)
        maps = resample_planes(D, 8, 1.0, floor=0.1).depth_maps(2, 2)
        assert float(maps.min()) == pytest.approx(0.1)

    def test_wrong_resolution_rejected(self):
        planes = resample_planes(torch.ones(4, 4, dtype=DTYPE) * 10, 4, 1.0)
        with pytest.raises(ShapeError):
            planes.depth_maps(8, 8)


class TestUpsampleDepth:
    def test_constant_map(self):
        out = upsample_depth(torch.full((2, 3), 7.0, dtype=DTYPE), 4)
        assert out.shape == (8, 12)
        np.testing.assert_allclose(out.numpy(), 7.0)

    def test_coarse_pixels_are_kept(self, rng):
        D = torch.tensor(rng.uniform(size=(3, 3)), dtype=DTYPE)
        out = upsample_depth(D, 4)
        np.testing.assert_allclose(out[::4, ::4].numpy(), D.numpy(), atol=1e-12)
