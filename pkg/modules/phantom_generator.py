"""
Phantom Generator Module

This module provides functionality to synthesize CT-like lesion slices with exactly known
lesion masks: rotated elliptical lesions drawn from a few appearance archetypes over
patterned, noisy backgrounds. RECIST diameters are measured from each ground-truth mask the
way a reader would (longest diameter, then the longest diameter perpendicular to it), and
the archetype label is kept as a reference grouping for clustering.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial.distance import pdist, squareform
from tqdm import tqdm

from modules.image_grid import BinaryMask, ImageGrid, SeededRng, save_image_png, save_mask_png
from modules.recist_parser import RecistAnnotation, save_annotations

logger = logging.getLogger(__name__)

BACKGROUND_PATTERNS = ('flat', 'gradient', 'stripes', 'blobs')
PERPENDICULAR_COS = 0.15


@dataclass(frozen=True)
class Archetype:
    """Appearance family of synthetic lesions. Ranges are (low, high) inclusive."""

    name: str
    semi_major: Tuple[float, float]
    aspect: Tuple[float, float]
    lesion_intensity: Tuple[float, float]
    background_intensity: Tuple[float, float]
    noise_sigma: float = 0.02
    pattern: str = 'flat'
    blur_sigma: float = 0.7

    def __post_init__(self):
        for name in ('semi_major', 'aspect', 'lesion_intensity', 'background_intensity'):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if lo > hi:
                raise ValueError(f"{self.name}: {name} range is reversed")
        if self.semi_major[0] < 2:
            raise ValueError(f"{self.name}: lesion axes must be at least 2 px")
        if not (0 < self.aspect[0] and self.aspect[1] <= 1):
            raise ValueError(f"{self.name}: aspect must lie in (0, 1]")
        for name in ('lesion_intensity', 'background_intensity'):
            lo, hi = getattr(self, name)
            if lo < 0 or hi > 1:
                raise ValueError(f"{self.name}: {name} must lie in [0, 1]")
        if self.pattern not in BACKGROUND_PATTERNS:
            raise ValueError(f"Unsupported background pattern: {self.pattern}. Supported: {list(BACKGROUND_PATTERNS)}")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError(f"{self.name}: noise and blur must be >= 0")


DEFAULT_ARCHETYPES = (
    Archetype('bright-round', (10, 14), (0.8, 1.0), (0.80, 0.90), (0.15, 0.25), 0.02, 'flat'),
    Archetype('dark-elongated', (14, 20), (0.35, 0.55), (0.15, 0.25), (0.55, 0.65), 0.03, 'gradient'),
    Archetype('textured-large', (18, 24), (0.6, 0.85), (0.60, 0.70), (0.30, 0.40), 0.06, 'stripes'),
    Archetype('faint-small', (6, 9), (0.7, 0.95), (0.50, 0.56), (0.32, 0.38), 0.02, 'blobs'),
)


@dataclass(frozen=True)
class PhantomSpec:
    count: int = 200
    image_size: int = 96
    archetypes: Tuple[Archetype, ...] = DEFAULT_ARCHETYPES
    seed: int = 7

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("phantom count must be >= 1")
        largest = max(a.semi_major[1] for a in self.archetypes)
        if 2 * largest + 10 > self.image_size:
            raise ValueError(f"image_size {self.image_size} too small for lesions of semi-axis {largest}")


@dataclass(frozen=True)
class PhantomCase:
    lesion_id: str
    image: ImageGrid
    mask: BinaryMask
    annotation: RecistAnnotation
    archetype: str


def lesion_id_for(index: int) -> str:
    return f"L{index:05d}"


def ellipse_mask(size: int, center: Tuple[float, float], semi_axes: Tuple[float, float], angle: float) -> np.ndarray:
    """Boolean (size, size) ellipse; center is (row, col), angle rotates the major axis from +x."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = rows - center[0], cols - center[1]
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    return (u / semi_axes[0]) ** 2 + (v / semi_axes[1]) ** 2 <= 1.0


def _background(size: int, level: float, pattern: str, gen: np.random.Generator) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    base = np.full((size, size), level)
    if pattern == 'gradient':
        theta = gen.uniform(0, 2 * np.pi)
        ramp = (cols * np.cos(theta) + rows * np.sin(theta)) / size
        base += 0.15 * (ramp - ramp.mean())
    elif pattern == 'stripes':
        theta = gen.uniform(0, np.pi)
        phase = gen.uniform(0, 2 * np.pi)
        base += 0.05 * np.sin(2 * np.pi * (cols * np.cos(theta) + rows * np.sin(theta)) / 12.0 + phase)
    elif pattern == 'blobs':
        for _ in range(3):
            r0, c0 = gen.uniform(0, size, size=2)
            base += 0.08 * np.exp(-((rows - r0) ** 2 + (cols - c0) ** 2) / (2 * 6.0 ** 2))
    return base


def recist_from_mask(mask: np.ndarray, lesion_id: str) -> RecistAnnotation:
    """
    Measure RECIST diameters on a binary mask.

    Major: longest distance between two boundary pixels. Minor: longest boundary pair whose
    direction is within |cos| ≤ 0.15 of perpendicular to the major axis.
    """
    mask = np.asarray(mask, dtype=bool)
    boundary = mask & ~ndimage.binary_erosion(mask, border_value=0)
    rows, cols = np.nonzero(boundary)
    points = np.column_stack([cols, rows]).astype(np.float64)
    if points.shape[0] < 3:
        raise ValueError(f"{lesion_id}: lesion too small to measure")
    dist = squareform(pdist(points))
    i, j = np.unravel_index(np.argmax(dist), dist.shape)
    i, j = sorted((int(i), int(j)))
    major_vec = points[j] - points[i]
    major_dir = major_vec / np.linalg.norm(major_vec)

    a, b = np.triu_indices(points.shape[0], k=1)
    vec = points[b] - points[a]
    length = np.hypot(vec[:, 0], vec[:, 1])
    cosine = np.abs(vec @ major_dir) / np.maximum(length, 1e-12)
    candidates = np.flatnonzero(cosine <= PERPENDICULAR_COS)
    if candidates.size == 0:
        candidates = np.array([int(np.argmin(cosine))])
    best = candidates[np.argmax(length[candidates])]
    major = (tuple(points[i]), tuple(points[j]))
    minor = (tuple(points[a[best]]), tuple(points[b[best]]))
    return RecistAnnotation(major, minor, lesion_id)


def render_case(index: int, archetype: Archetype, size: int, rng: SeededRng) -> PhantomCase:
    gen = rng.generator
    semi_major = gen.uniform(*archetype.semi_major)
    semi_minor = max(2.0, semi_major * gen.uniform(*archetype.aspect))
    margin = semi_major + 4
    center = tuple(gen.uniform(margin, size - 1 - margin, size=2))
    angle = gen.uniform(0, np.pi)
    lesion_level = gen.uniform(*archetype.lesion_intensity)
    background_level = gen.uniform(*archetype.background_intensity)

    mask = ellipse_mask(size, center, (semi_major, semi_minor), angle)
    image = _background(size, background_level, archetype.pattern, gen)
    image[mask] = lesion_level
    image += gen.normal(0.0, archetype.noise_sigma, size=image.shape)
    if archetype.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, archetype.blur_sigma)
    image = np.clip(image, 0.0, 1.0)

    lesion_id = lesion_id_for(index)
    annotation = recist_from_mask(mask, lesion_id)
    annotation = RecistAnnotation(annotation.major, annotation.minor, lesion_id, f"images/{lesion_id}.png")
    return PhantomCase(lesion_id, ImageGrid(image), BinaryMask(mask), annotation, archetype.name)


def phantom_generate(spec: PhantomSpec, progress: bool = False) -> List[PhantomCase]:
    """
    Render the phantom dataset; archetypes are assigned round-robin.

    Args:
        spec: Dataset size, image size, archetypes and seed
        progress: Show a tqdm progress bar

    Returns:
        One PhantomCase per lesion, ids L00000, L00001, ...
    """
    root = SeededRng(spec.seed)
    cases = []
    for index in tqdm(range(spec.count), desc='phantoms', disable=not progress):
        archetype = spec.archetypes[index % len(spec.archetypes)]
        cases.append(render_case(index, archetype, spec.image_size, root.spawn(f"phantom-{index}")))
    return cases


def write_phantom_dataset(cases: Sequence[PhantomCase], out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write images/, gt_masks/, annotations.csv and archetypes.csv under out_dir."""
    out_dir = Path(out_dir)
    (out_dir / 'images').mkdir(parents=True, exist_ok=True)
    (out_dir / 'gt_masks').mkdir(parents=True, exist_ok=True)
    for case in cases:
        save_image_png(case.image, out_dir / 'images' / f"{case.lesion_id}.png", bit_depth=16)
        save_mask_png(case.mask, out_dir / 'gt_masks' / f"{case.lesion_id}.png")
    save_annotations([c.annotation for c in cases], out_dir / 'annotations.csv')
    pd.DataFrame({'lesion_id': [c.lesion_id for c in cases], 'archetype': [c.archetype for c in cases]}).to_csv(
        out_dir / 'archetypes.csv', index=False)
    return {
        'images': out_dir / 'images',
        'gt_masks': out_dir / 'gt_masks',
        'annotations': out_dir / 'annotations.csv',
        'archetypes': out_dir / 'archetypes.csv',
    }


def load_archetype_labels(path: Union[str, Path]) -> Dict[str, str]:
    frame = pd.read_csv(path, dtype={'lesion_id': str, 'archetype': str})
    return dict(zip(frame['lesion_id'], frame['archetype']))


class PhantomGenerator:
    """
    Synthetic dataset writer used by the phantom stage.
    """

    def __init__(self, spec: PhantomSpec):
        self.spec = spec

    def generate(self, out_dir: Union[str, Path], progress: bool = False) -> Dict[str, Any]:
        """
        Render and write the phantom dataset.

        Args:
            out_dir: Destination directory
            progress: Show a progress bar

        Returns:
            Dictionary with success status, written paths and explanation
        """
        try:
            cases = phantom_generate(self.spec, progress)
            paths = write_phantom_dataset(cases, out_dir)
        except (OSError, ValueError) as e:
            return {
                'success': False,
                'error': str(e),
                'explanation': f"Could not write phantom dataset to {out_dir}."
            }
        counts = pd.Series([c.archetype for c in cases]).value_counts().sort_index()
        return {
            'success': True,
            'cases': cases,
            'paths': paths,
            'explanation': (f"Rendered {len(cases)} {self.spec.image_size}x{self.spec.image_size} phantoms: "
                            + ', '.join(f"{name} {n}" for name, n in counts.items()) + '.')
        }
