"""
Image Grid Module

This module provides the raster types shared by every pipeline stage (CT slices, lesion
masks, GrabCut trimaps), the seeded random generator, and the preprocessing transforms
applied before training: pad to square, bilinear resize, min-max normalization.

All rasters are stored row-major as numpy arrays of shape (height, width) and are
read-only after construction.
"""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

# Trimap labels (OpenCV GrabCut numbering)
DEFINITE_BG = 0
DEFINITE_FG = 1
PROBABLE_BG = 2
PROBABLE_FG = 3

TRIMAP_LABELS = (DEFINITE_BG, DEFINITE_FG, PROBABLE_BG, PROBABLE_FG)


class GridError(ValueError):
    """Raised when a raster violates its invariants."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ImageGrid:
    """Grayscale image with finite real intensities."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise GridError(f"image must be a non-empty 2-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise GridError("image contains non-finite values")
        object.__setattr__(self, 'data', _frozen(data))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class BinaryMask:
    """Lesion mask with labels 0 (background) and 1 (lesion)."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.shape[0] < 1 or labels.shape[1] < 1:
            raise GridError(f"mask must be a non-empty 2-D array, got shape {labels.shape}")
        if labels.dtype == bool:
            labels = labels.astype(np.uint8)
        if not np.all((labels == 0) | (labels == 1)):
            raise GridError("mask labels must be 0 or 1")
        object.__setattr__(self, 'labels', _frozen(labels.astype(np.uint8)))

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def area(self) -> int:
        return int(self.labels.sum())

    def as_bool(self) -> np.ndarray:
        return self.labels.astype(bool)


@dataclass(frozen=True)
class Trimap:
    """Four-level GrabCut seed map; needs at least one definite seed of each class."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.uint8)
        if labels.ndim != 2:
            raise GridError(f"trimap must be 2-D, got shape {labels.shape}")
        if not np.all(np.isin(labels, TRIMAP_LABELS)):
            raise GridError("trimap contains unknown labels")
        if not np.any(labels == DEFINITE_FG):
            raise GridError("trimap has no DefiniteFG pixel")
        if not np.any(labels == DEFINITE_BG):
            raise GridError("trimap has no DefiniteBG pixel")
        object.__setattr__(self, 'labels', _frozen(labels))

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def initial_labeling(self) -> np.ndarray:
        """Foreground where the seed is definite or probable foreground."""
        return np.isin(self.labels, (DEFINITE_FG, PROBABLE_FG))

    def definite_mask(self) -> np.ndarray:
        return np.isin(self.labels, (DEFINITE_FG, DEFINITE_BG))


class SeededRng:
    """
    Deterministic random stream: numpy PCG64 seeded with a 64-bit integer.

    Named sub-streams are derived from (seed, name) through SHA-256, so a stage's
    randomness does not depend on which other stages ran before it.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, name: str) -> 'SeededRng':
        digest = hashlib.sha256(f"{self.seed}:{name}".encode('utf-8')).digest()
        return SeededRng(int.from_bytes(digest[:8], 'little'))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed})"


def pad_to_square(img: ImageGrid, fill: Optional[float] = None) -> ImageGrid:
    """
    Center the image on an S×S canvas with S = max(width, height).

    Args:
        img: Input image
        fill: Value for the new pixels; defaults to the image minimum ("air")

    Returns:
        Square image; already-square inputs come back unchanged
    """
    if img.width == img.height:
        return img
    if fill is None:
        fill = float(img.data.min())
    size = max(img.width, img.height)
    top, left = square_offsets(img.width, img.height)
    canvas = np.full((size, size), fill, dtype=np.float64)
    canvas[top:top + img.height, left:left + img.width] = img.data
    return ImageGrid(canvas)


def pad_mask_to_square(mask: BinaryMask) -> BinaryMask:
    size = max(mask.width, mask.height)
    top, left = square_offsets(mask.width, mask.height)
    canvas = np.zeros((size, size), dtype=np.uint8)
    canvas[top:top + mask.height, left:left + mask.width] = mask.labels
    return BinaryMask(canvas)


def square_offsets(width: int, height: int) -> Tuple[int, int]:
    """(top, left) offset of a width×height image centered by pad_to_square."""
    size = max(width, height)
    return (size - height) // 2, (size - width) // 2


def crop_from_square(data: np.ndarray, width: int, height: int) -> np.ndarray:
    """Inverse of the padding step for an array of the padded size."""
    top, left = square_offsets(width, height)
    return data[top:top + height, left:left + width]


def sample_positions(n_in: int, n_out: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Corner-aligned bilinear sample positions.

    Output index i samples input coordinate i·(n_in−1)/(n_out−1); a single output sample
    sits at the input center.

    Returns:
        (lower index, upper index, fractional weight of the upper index)
    """
    if n_out == 1:
        coords = np.array([(n_in - 1) / 2.0])
    elif n_in == n_out:
        coords = np.arange(n_out, dtype=np.float64)
    else:
        coords = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))
    lower = np.clip(np.floor(coords).astype(np.int64), 0, n_in - 1)
    upper = np.minimum(lower + 1, n_in - 1)
    frac = coords - lower
    return lower, upper, frac


def resize_bilinear(img: ImageGrid, out_w: int, out_h: int) -> ImageGrid:
    """Corner-aligned bilinear resize; output stays within the input's value range."""
    if out_w < 1 or out_h < 1:
        raise GridError(f"output size must be positive, got {out_w}x{out_h}")
    if (out_w, out_h) == (img.width, img.height):
        return img
    data = img.data
    x0, x1, tx = sample_positions(img.width, out_w)
    y0, y1, ty = sample_positions(img.height, out_h)
    # a + t·(b − a) keeps constant rows exactly constant
    left, right = data[:, x0], data[:, x1]
    rows = left + tx[None, :] * (right - left)
    top, bottom = rows[y0, :], rows[y1, :]
    out = top + ty[:, None] * (bottom - top)
    return ImageGrid(np.clip(out, data.min(), data.max()))


def resize_mask_nearest(mask: BinaryMask, out_w: int, out_h: int) -> BinaryMask:
    """Nearest-neighbor resampling: output pixel i reads input floor(i·n_in/n_out)."""
    if out_w < 1 or out_h < 1:
        raise GridError(f"output size must be positive, got {out_w}x{out_h}")
    cols = np.minimum((np.arange(out_w) * mask.width) // out_w, mask.width - 1)
    rows = np.minimum((np.arange(out_h) * mask.height) // out_h, mask.height - 1)
    return BinaryMask(mask.labels[np.ix_(rows, cols)])


def normalize(img: ImageGrid) -> ImageGrid:
    """Per-image min-max scaling to [0, 1]; constant images map to zeros."""
    lo, hi = float(img.data.min()), float(img.data.max())
    if hi == lo:
        return ImageGrid(np.zeros_like(img.data))
    return ImageGrid((img.data - lo) / (hi - lo))


def disc_structure(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy * yy + xx * xx) <= r * r


def dilate(mask: BinaryMask, radius: int) -> BinaryMask:
    """Morphological dilation with a Euclidean disc of the given radius."""
    if radius < 0:
        raise GridError(f"dilation radius must be >= 0, got {radius}")
    if radius == 0:
        return mask
    grown = ndimage.binary_dilation(mask.as_bool(), structure=disc_structure(radius))
    return BinaryMask(grown)


def preprocess_image(img: ImageGrid, target_size: int = 128) -> ImageGrid:
    """Pad to square, resize to target_size², then min-max normalize."""
    square = pad_to_square(img)
    return normalize(resize_bilinear(square, target_size, target_size))


def preprocess_mask(mask: BinaryMask, target_size: int = 128) -> BinaryMask:
    return resize_mask_nearest(pad_mask_to_square(mask), target_size, target_size)


def restore_mask(mask: BinaryMask, width: int, height: int) -> BinaryMask:
    """Map a preprocessed square mask back onto the original width×height grid."""
    size = max(width, height)
    square = resize_mask_nearest(mask, size, size)
    return BinaryMask(crop_from_square(square.labels, width, height))


# PNG input/output

PathLike = Union[str, Path]


def load_image_png(path: PathLike) -> ImageGrid:
    """Read an 8- or 16-bit grayscale PNG as raw intensities."""
    with Image.open(path) as handle:
        data = np.array(handle)
    if data.ndim == 3:
        data = data[..., :3].mean(axis=2)
    return ImageGrid(data.astype(np.float64))


def save_image_png(img: ImageGrid, path: PathLike, bit_depth: int = 16) -> None:
    """Write an image whose values lie in [0, 1] as a grayscale PNG."""
    if bit_depth not in (8, 16):
        raise GridError(f"bit depth must be 8 or 16, got {bit_depth}")
    peak = 255 if bit_depth == 8 else 65535
    scaled = np.rint(np.clip(img.data, 0.0, 1.0) * peak)
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    Image.fromarray(scaled.astype(dtype)).save(path, format='PNG')


def load_mask_png(path: PathLike) -> BinaryMask:
    with Image.open(path) as handle:
        data = np.array(handle.convert('L'))
    return BinaryMask((data > 127).astype(np.uint8))


def save_mask_png(mask: BinaryMask, path: PathLike) -> None:
    Image.fromarray((mask.labels * 255).astype(np.uint8)).save(path, format='PNG')
