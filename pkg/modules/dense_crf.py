"""
Dense CRF Module

This module provides fully connected CRF refinement of foreground probability maps:
Potts-compatible mean-field inference with an appearance kernel (position + intensity) and
a smoothness kernel (position only), evaluated exactly as a dense N×N message matrix.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Iterator, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import softmax

from modules.image_grid import BinaryMask, ImageGrid, resize_bilinear

logger = logging.getLogger(__name__)

PROB_EPS = 1e-8
MAX_EXACT_PIXELS = 64 * 64


class CrfError(ValueError):
    """Raised for invalid CRF parameters or problems too large for exact inference."""


@dataclass(frozen=True)
class CrfParams:
    w_app: float = 5.0
    w_smooth: float = 3.0
    theta_alpha: float = 20.0
    theta_beta: float = 0.1
    theta_gamma: float = 3.0
    iterations: int = 5

    def __post_init__(self):
        if self.w_app < 0 or self.w_smooth < 0:
            raise CrfError("kernel weights must be >= 0")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise CrfError("kernel bandwidths must be > 0")
        if self.iterations < 0:
            raise CrfError("iteration count must be >= 0")

    def spatially_scaled(self, factor: float) -> 'CrfParams':
        return CrfParams(self.w_app, self.w_smooth, self.theta_alpha / factor, self.theta_beta,
                         self.theta_gamma / factor, self.iterations)


def unary_from_prob(prob: np.ndarray) -> np.ndarray:
    """
    Negative log probabilities, clamped to [ε, 1−ε].

    Returns:
        (H, W, 2) array; label 0 is background, label 1 foreground
    """
    p = np.clip(np.asarray(prob, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    return np.stack([-np.log1p(-p), -np.log(p)], axis=-1)


def pairwise_kernel(img: ImageGrid, params: CrfParams) -> np.ndarray:
    """
    Combined w_app·k_app + w_smooth·k_smooth over all pixel pairs, with a zero diagonal.

    Returns:
        (N, N) symmetric matrix in row-major pixel order
    """
    rows, cols = np.mgrid[0:img.height, 0:img.width]
    positions = np.column_stack([rows.ravel(), cols.ravel()]).astype(np.float64)
    intensity = img.data.reshape(-1, 1)

    kernel = cdist(positions, positions, 'sqeuclidean')
    smooth = np.exp(kernel * (-0.5 / params.theta_gamma ** 2))
    smooth *= params.w_smooth
    kernel *= -0.5 / params.theta_alpha ** 2
    contrast = cdist(intensity, intensity, 'sqeuclidean')
    contrast *= 0.5 / params.theta_beta ** 2
    kernel -= contrast
    del contrast
    np.exp(kernel, out=kernel)
    kernel *= params.w_app
    kernel += smooth
    np.fill_diagonal(kernel, 0.0)
    return kernel


def meanfield_iterations(img: ImageGrid, unary: np.ndarray, params: CrfParams,
                         max_pixels: int = MAX_EXACT_PIXELS) -> Iterator[np.ndarray]:
    """
    Yield Q before the first update and after each synchronous mean-field update.

    Every update reads only the previous iterate:
    Q_i(l) ∝ exp(−u_i(l) − Σ_{l'≠l} Σ_{j≠i} K_ij Q_j(l')).
    """
    unary = np.asarray(unary, dtype=np.float64)
    if unary.shape != (img.height, img.width, 2):
        raise CrfError(f"unary shape {unary.shape} does not match image {img.height}x{img.width}x2")
    n = img.height * img.width
    if n > max_pixels:
        raise CrfError(f"{img.width}x{img.height} image has {n} pixels; exact dense mode supports at most "
                       f"{max_pixels}, use meanfield_refine_downsampled")
    u = unary.reshape(n, 2)
    q = softmax(-u, axis=1)
    yield q.reshape(img.height, img.width, 2)
    if params.iterations == 0:
        return
    kernel = pairwise_kernel(img, params)
    for step in range(params.iterations):
        message = kernel @ q
        # Potts: each label pays for the mass on the other label
        energy = u + message[:, ::-1]
        q = softmax(-energy, axis=1)
        logger.debug("mean-field step %d: foreground mass %.3f", step + 1, q[:, 1].sum())
        yield q.reshape(img.height, img.width, 2)


def _argmax_mask(q: np.ndarray) -> BinaryMask:
    return BinaryMask((q[..., 1] > q[..., 0]).astype(np.uint8))


def meanfield_refine(img: ImageGrid, unary: np.ndarray, params: CrfParams,
                     max_pixels: int = MAX_EXACT_PIXELS) -> Tuple[np.ndarray, BinaryMask]:
    """
    Exact dense mean-field refinement.

    Args:
        img: Normalized image
        unary: (H, W, 2) negative log probabilities
        params: Kernel weights, bandwidths and iteration count
        max_pixels: Largest image handled exactly

    Returns:
        (Q as (H, W, 2) label distributions, argmax mask; ties go to background)
    """
    q = None
    for q in meanfield_iterations(img, unary, params, max_pixels):
        pass
    return q, _argmax_mask(q)


def meanfield_refine_downsampled(img: ImageGrid, unary: np.ndarray, params: CrfParams,
                                 factor: int, max_pixels: int = MAX_EXACT_PIXELS) -> Tuple[np.ndarray, BinaryMask]:
    """
    Run exact mean-field on a grid shrunk by `factor`, then bring Q back to full size.

    Spatial bandwidths are divided by the factor so kernels keep their extent in original
    pixels.
    """
    if factor < 1:
        raise CrfError(f"downsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return meanfield_refine(img, unary, params, max_pixels)
    small_w = max(1, int(round(img.width / factor)))
    small_h = max(1, int(round(img.height / factor)))
    small_img = resize_bilinear(img, small_w, small_h)
    small_unary = np.stack([resize_bilinear(ImageGrid(unary[..., label]), small_w, small_h).data
                            for label in range(2)], axis=-1)
    small_q, _ = meanfield_refine(small_img, small_unary, params.spatially_scaled(factor), max_pixels)
    q = np.stack([resize_bilinear(ImageGrid(small_q[..., label]), img.width, img.height).data
                  for label in range(2)], axis=-1)
    q /= q.sum(axis=-1, keepdims=True)
    return q, _argmax_mask(q)


class DenseCrfRefiner:
    """
    Refines network probability maps, picking exact or downsampled mode by image size.
    """

    def __init__(self, params: CrfParams, max_pixels: int = MAX_EXACT_PIXELS):
        self.params = params
        self.max_pixels = max_pixels

    def downsample_factor(self, width: int, height: int) -> int:
        return max(1, math.ceil(math.sqrt(width * height / self.max_pixels)))

    def refine(self, img: ImageGrid, prob: np.ndarray) -> Dict[str, Any]:
        """
        Refine one foreground probability map.

        Args:
            img: Normalized image the probabilities belong to
            prob: (H, W) foreground probabilities

        Returns:
            Dictionary with success status, Q, mask and explanation
        """
        try:
            unary = unary_from_prob(prob)
            factor = self.downsample_factor(img.width, img.height)
            q, mask = meanfield_refine_downsampled(img, unary, self.params, factor, self.max_pixels)
        except (CrfError, ValueError) as e:
            return {
                'success': False,
                'error': str(e),
                'explanation': "Dense CRF refinement failed."
            }
        before = int((np.asarray(prob) > 0.5).sum())
        return {
            'success': True,
            'q': q,
            'mask': mask,
            'factor': factor,
            'explanation': (f"Mean-field refinement at 1/{factor} scale: foreground {before} → {mask.area} px "
                            f"after {self.params.iterations} iterations.")
        }
