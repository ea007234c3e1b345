import numpy as np
import pytest
from skimage.metrics import structural_similarity

from errors import EvaluationError, ShapeError
from evalmetrics import PSNR_CAP, depth_errors, nvs_report, psnr, ssim


class TestPSNR:
    def test_identical_images_hit_the_cap(self, rng):
        image = rng.uniform(size=(8, 8, 3))
        assert psnr(image, image) == PSNR_CAP

    def test_known_error(self):
        assert psnr(np.full((4, 4, 3), 0.5), np.full((4, 4, 3), 0.6)) == pytest.approx(20.0)

    def test_shapes_must_match(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestSSIM:
    def test_identical_images(self, rng):
        image = rng.uniform(size=(16, 16, 3))
        assert ssim(image, image) == pytest.approx(1.0)

    def test_matches_reference_implementation(self, rng):
        a = rng.uniform(size=(24, 20, 3))
        b = np.clip(a + rng.normal(0, 0.1, size=a.shape), 0, 1)
        expected = structural_similarity(a, b, data_range=1.0, channel_axis=2, gaussian_weights=True,
                                         sigma=1.5, use_sample_covariance=False)
        assert ssim(a, b) == pytest.approx(expected, abs=1e-6)

    def test_small_images_rejected(self):
        with pytest.raises(EvaluationError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


class TestDepthErrors:
    def test_statistics(self):
        gt = np.array([[1.0, 2.0], [4.0, 0.0]])
        pred = np.array([[1.5, 2.0], [3.0, 9.0]])
        errors = depth_errors(pred, gt, gt > 0, tolerance=0.5)
        assert errors.mae == pytest.approx(0.5)
        assert errors.rmse == pytest.approx(np.sqrt((0.25 + 1.0) / 3))
        assert errors.abs_rel == pytest.approx((0.5 + 0.25) / 3)
        assert errors.inlier_fraction == pytest.approx(2 / 3)

    def test_empty_mask(self):
        with pytest.raises(EvaluationError):
            depth_errors(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), dtype=bool))


def test_report_declares_lpips_unsupported(rng):
    image = rng.uniform(size=(12, 12, 3))
    depth = rng.uniform(1, 2, size=(12, 12))
    report = nvs_report(image, image, depth, depth, tolerance=0.1)
    assert report["lpips"] == "not supported"
    assert report["psnr_db"] == PSNR_CAP
    assert report["depth_mae"] == 0.0
    assert report["inlier_fraction"] == 1.0
