import math

import numpy as np
import pytest

from modules.dense_crf import (
    MAX_EXACT_PIXELS, CrfError, CrfParams, DenseCrfRefiner, meanfield_iterations, meanfield_refine,
    meanfield_refine_downsampled, pairwise_kernel, unary_from_prob,
)
from modules.image_grid import ImageGrid
from modules.segmentation_metrics import confusion, dice


def _disc(size, radius, center=None):
    center = (size - 1) / 2 if center is None else center
    rows, cols = np.mgrid[0:size, 0:size]
    mask = (rows - center) ** 2 + (cols - center) ** 2 <= radius ** 2
    return np.where(mask, 0.85, 0.15), mask


class TestParams:
    def test_defaults(self):
        p = CrfParams()
        assert (p.w_app, p.w_smooth, p.theta_alpha, p.theta_beta, p.theta_gamma, p.iterations) == (5, 3, 20, 0.1, 3, 5)

    @pytest.mark.parametrize('kwargs', [
        {'w_app': -1.0}, {'w_smooth': -0.1}, {'theta_alpha': 0.0}, {'theta_beta': -1.0}, {'iterations': -1},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(CrfError):
            CrfParams(**kwargs)

    def test_spatial_scaling_keeps_intensity_bandwidth(self):
        scaled = CrfParams().spatially_scaled(2)
        assert scaled.theta_alpha == 10.0 and scaled.theta_gamma == 1.5 and scaled.theta_beta == 0.1


def test_unary_is_clamped_negative_log():
    u = unary_from_prob(np.array([[0.0, 0.25, 1.0]]))
    assert u.shape == (1, 3, 2)
    assert u[0, 1] == pytest.approx([-math.log(0.75), -math.log(0.25)])
    assert u[0, 0, 1] == pytest.approx(-math.log(1e-8))
    assert np.all(np.isfinite(u))


def test_pairwise_kernel_entries():
    params = CrfParams(w_app=2.0, w_smooth=1.0, theta_alpha=1.5, theta_beta=0.5, theta_gamma=2.0)
    kernel = pairwise_kernel(ImageGrid(np.array([[0.2, 0.5], [0.2, 0.2]])), params)
    assert kernel.shape == (4, 4)
    assert np.allclose(kernel, kernel.T)
    assert np.all(np.diag(kernel) == 0)
    # pixels 0 and 3 are diagonal neighbors with equal intensity
    expected = 2.0 * math.exp(-2 / (2 * 1.5 ** 2)) + 1.0 * math.exp(-2 / (2 * 2.0 ** 2))
    assert kernel[0, 3] == pytest.approx(expected)


def test_two_pixel_update_matches_closed_form():
    params = CrfParams(w_app=2.0, w_smooth=1.0, theta_alpha=1.5, theta_beta=0.5, theta_gamma=2.0, iterations=1)
    img = ImageGrid(np.array([[0.2, 0.5]]))
    q, _ = meanfield_refine(img, unary_from_prob(np.array([[0.7, 0.4]])), params)
    k = 2.0 * math.exp(-1 / (2 * 1.5 ** 2) - 0.09 / (2 * 0.5 ** 2)) + math.exp(-1 / (2 * 2.0 ** 2))
    fg0, bg0 = 0.7 * math.exp(-k * 0.6), 0.3 * math.exp(-k * 0.4)
    fg1, bg1 = 0.4 * math.exp(-k * 0.3), 0.6 * math.exp(-k * 0.7)
    assert q[0, 0, 1] == pytest.approx(fg0 / (fg0 + bg0), rel=1e-9)
    assert q[0, 1, 1] == pytest.approx(fg1 / (fg1 + bg1), rel=1e-9)
    assert np.allclose(q.sum(axis=-1), 1.0)


def test_iterations_yield_initial_and_each_update():
    img = ImageGrid(np.zeros((3, 3)))
    prob = np.full((3, 3), 0.6)
    steps = list(meanfield_iterations(img, unary_from_prob(prob), CrfParams(iterations=4)))
    assert len(steps) == 5
    assert np.allclose(steps[0][..., 1], 0.6)


def test_zero_weights_keep_unary_argmax():
    gen = np.random.default_rng(0)
    prob = gen.uniform(size=(8, 8))
    img = ImageGrid(gen.uniform(size=(8, 8)))
    q, mask = meanfield_refine(img, unary_from_prob(prob), CrfParams(w_app=0.0, w_smooth=0.0, iterations=3))
    assert np.allclose(q[..., 1], prob)
    assert np.array_equal(mask.as_bool(), prob > 0.5)


def test_unary_shape_mismatch():
    with pytest.raises(CrfError, match='unary shape'):
        meanfield_refine(ImageGrid(np.zeros((4, 4))), np.zeros((4, 5, 2)), CrfParams())


def test_exact_mode_size_limit():
    size = int(math.isqrt(MAX_EXACT_PIXELS)) + 1
    img = ImageGrid(np.zeros((size, size)))
    with pytest.raises(CrfError, match='exact dense mode supports at most'):
        meanfield_refine(img, unary_from_prob(np.full((size, size), 0.5)), CrfParams())


def test_removes_isolated_false_positives(disc_image):
    image, gt = disc_image
    prob = np.where(gt, 0.9, 0.1)
    for r, c in ((2, 3), (28, 5), (4, 27), (29, 29)):
        prob[r, c] = 0.6
    _, mask = meanfield_refine(ImageGrid(image), unary_from_prob(prob), CrfParams())
    assert (prob > 0.5).sum() == gt.sum() + 4
    assert np.array_equal(mask.as_bool(), gt)


def test_downsampled_refinement_follows_the_lesion():
    image, gt = _disc(96, 20)
    prob = np.where(gt, 0.7, 0.3)
    q, mask = meanfield_refine_downsampled(ImageGrid(image), unary_from_prob(prob), CrfParams(), factor=2)
    assert q.shape == (96, 96, 2)
    assert np.allclose(q.sum(axis=-1), 1.0)
    assert dice(confusion(mask, gt)) > 0.9


def test_downsampled_factor_one_is_exact():
    image, gt = _disc(16, 4)
    unary = unary_from_prob(np.where(gt, 0.8, 0.2))
    exact, _ = meanfield_refine(ImageGrid(image), unary, CrfParams())
    same, _ = meanfield_refine_downsampled(ImageGrid(image), unary, CrfParams(), factor=1)
    assert np.array_equal(exact, same)
    with pytest.raises(CrfError, match='factor must be >= 1'):
        meanfield_refine_downsampled(ImageGrid(image), unary, CrfParams(), factor=0)


class TestRefiner:
    @pytest.mark.parametrize('size, factor', [(32, 1), (64, 1), (65, 2), (100, 2), (128, 2), (200, 4)])
    def test_downsample_factor(self, size, factor):
        assert DenseCrfRefiner(CrfParams()).downsample_factor(size, size) == factor

    def test_refine(self):
        image, gt = _disc(80, 15)
        result = DenseCrfRefiner(CrfParams()).refine(ImageGrid(image), np.where(gt, 0.8, 0.2))
        assert result['success']
        assert result['factor'] == 2
        assert result['mask'].labels.shape == (80, 80)
        assert dice(confusion(result['mask'], gt)) > 0.9

    def test_refine_reports_shape_mismatch(self):
        result = DenseCrfRefiner(CrfParams()).refine(ImageGrid(np.zeros((8, 8))), np.zeros((8, 9)))
        assert not result['success']
        assert 'unary shape' in result['error']
