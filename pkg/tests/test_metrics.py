import numpy as np
import pytest

from skeletal_radiance.errors import RenderError
from skeletal_radiance.metrics import (PSNR_CAP, baseline_scores, body_psnr, gray_baseline, mask_box,
                                       mean_color_baseline, psnr, score, ssim)


@pytest.fixture
def image(rng):
    return rng.random((16, 20, 3))


class TestPsnr:
    def test_identical_is_capped(self, image):
        assert psnr(image, image) == PSNR_CAP == 100.0

    def test_closed_form(self):
        a = np.zeros((4, 4, 3))
        assert psnr(a, a + 0.1) == pytest.approx(20.0)

    def test_symmetric(self, image, rng):
        other = rng.random(image.shape)
        assert psnr(image, other) == psnr(other, image)

    def test_errors(self, image):
        with pytest.raises(RenderError, match="shapes differ"):
            psnr(image, image[:, :10])
        with pytest.raises(RenderError, match="empty"):
            psnr(np.zeros((0, 3)), np.zeros((0, 3)))


class TestSsim:
    def test_identical(self, image):
        assert ssim(image, image) == pytest.approx(1.0)

    def test_constant_images_reduce_to_luminance(self):
        a = np.full((16, 16, 3), 0.25)
        c1 = 0.01 ** 2
        expected = (2.0 * 0.25 * 0.75 + c1) / (0.25 ** 2 + 0.75 ** 2 + c1)
        assert ssim(a, a + 0.5) == pytest.approx(expected, rel=1e-6)

    def test_inverted_binary_image_is_negative(self, rng):
        a = (rng.random((24, 24)) < 0.5).astype(np.float64)
        assert ssim(a, 1.0 - a) < 0.0

    def test_window_larger_than_image(self):
        with pytest.raises(RenderError, match="window"):
            ssim(np.zeros((10, 30, 3)), np.zeros((10, 30, 3)))

    def test_shape_mismatch(self, image):
        with pytest.raises(RenderError):
            ssim(image, image[..., :2])


class TestBody:
    def test_mask_box(self):
        mask = np.zeros((6, 8), dtype=bool)
        mask[2, 3] = mask[4, 5] = True
        assert mask_box(mask) == (slice(2, 5), slice(3, 6))
        assert mask_box(np.zeros((3, 3), dtype=bool)) is None

    def test_scores_inside_the_box_only(self):
        gt = np.zeros((8, 8, 3))
        pred = gt.copy()
        pred[0, 0] = 1.0
        mask = np.zeros((8, 8), dtype=bool)
        mask[3:6, 3:6] = True
        assert body_psnr(pred, gt, mask) == PSNR_CAP
        assert psnr(pred, gt) < PSNR_CAP

    def test_empty_mask_uses_full_frame(self, image, rng):
        other = rng.random(image.shape)
        assert body_psnr(image, other, np.zeros(image.shape[:2])) == psnr(image, other)


class TestBaselines:
    def test_gray(self, image):
        np.testing.assert_array_equal(gray_baseline(image), 0.5)
        assert gray_baseline(image).shape == image.shape

    def test_mean_color(self, image):
        mean = mean_color_baseline(image)
        np.testing.assert_allclose(mean[3, 7], image.reshape(-1, 3).mean(axis=0))
        np.testing.assert_allclose(mean[0, 0], mean[-1, -1])

    def test_score_keys(self, image):
        assert set(score(image, image)) == {"psnr", "ssim"}
        mask = np.ones(image.shape[:2], dtype=bool)
        assert set(score(image, image, mask)) == {"psnr", "ssim", "body_psnr"}
        assert set(baseline_scores(image, mask)) == {
            "gray_psnr", "gray_ssim", "gray_body_psnr", "mean_color_psnr", "mean_color_ssim",
            "mean_color_body_psnr"}

    def test_mean_color_beats_gray_on_dark_images(self, rng):
        gt = rng.random((16, 16, 3)) * 0.2
        scores = baseline_scores(gt)
        assert scores["mean_color_psnr"] > scores["gray_psnr"]
