"""
Overlay Visualizer Module

This module provides functionality to render segmentation results as static figures:
mask contours drawn over the grayscale slice, and side-by-side panels comparing the
ground-truth contour (green) with the predicted contour (red).
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image
from scipy import ndimage

from modules.image_grid import BinaryMask, ImageGrid

logger = logging.getLogger(__name__)

GT_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 0)
PANEL_GAP = 2


def contour(mask: Union[BinaryMask, np.ndarray]) -> np.ndarray:
    """Mask pixels with at least one 8-neighbor outside the mask (the image border counts as outside)."""
    m = mask.as_bool() if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(m, structure=np.ones((3, 3), dtype=bool), border_value=0)
    return m & ~inner


def grayscale_rgb(img: ImageGrid) -> np.ndarray:
    """(H, W, 3) uint8 rendering of a min-max scaled image."""
    lo, hi = float(img.data.min()), float(img.data.max())
    scaled = np.zeros_like(img.data) if hi == lo else (img.data - lo) / (hi - lo)
    gray = np.rint(scaled * 255).astype(np.uint8)
    return np.repeat(gray[..., None], 3, axis=2)


def overlay_contour(img: ImageGrid, mask: Optional[BinaryMask], color: Tuple[int, int, int]) -> np.ndarray:
    rgb = grayscale_rgb(img)
    if mask is not None:
        if (mask.height, mask.width) != (img.height, img.width):
            raise ValueError(f"mask {mask.width}x{mask.height} does not match image {img.width}x{img.height}")
        rgb[contour(mask)] = color
    return rgb


def comparison_panel(img: ImageGrid, gt: Optional[BinaryMask], pred: Optional[BinaryMask]) -> np.ndarray:
    """[image | GT contour | prediction contour] separated by black gaps."""
    gap = np.zeros((img.height, PANEL_GAP, 3), dtype=np.uint8)
    return np.concatenate([
        grayscale_rgb(img), gap,
        overlay_contour(img, gt, GT_COLOR), gap,
        overlay_contour(img, pred, PRED_COLOR),
    ], axis=1)


def save_rgb_png(rgb: np.ndarray, path: Union[str, Path]) -> None:
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path, format='PNG')


def render_comparison_figure(rows: Sequence[Tuple[str, ImageGrid, BinaryMask, BinaryMask]],
                             path: Union[str, Path]) -> None:
    """Grid figure, one lesion per row: slice, GT overlay, prediction overlay."""
    fig, axes = plt.subplots(len(rows), 3, figsize=(7.5, 2.5 * len(rows)), squeeze=False)
    for ax_row, (case_id, img, gt, pred) in zip(axes, rows):
        panels = (grayscale_rgb(img), overlay_contour(img, gt, GT_COLOR), overlay_contour(img, pred, PRED_COLOR))
        for ax, panel, title in zip(ax_row, panels, ('image', 'ground truth', 'prediction')):
            ax.imshow(panel, interpolation='nearest')
            ax.set_xticks([])
            ax.set_yticks([])
            ax.set_title(f"{case_id} {title}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={'Software': None})
    plt.close(fig)


class OverlayVisualizer:
    """
    Writes one comparison panel per lesion and a summary figure.
    """

    def __init__(self, figure_cases: int = 3):
        self.figure_cases = figure_cases

    def render(self, images: Dict[str, ImageGrid], gts: Dict[str, BinaryMask], preds: Dict[str, BinaryMask],
               out_dir: Union[str, Path]) -> Dict[str, Any]:
        """
        Render overlays for every predicted case.

        Args:
            images: Case id → grayscale slice
            gts: Case id → ground-truth mask
            preds: Case id → predicted mask
            out_dir: Destination directory

        Returns:
            Dictionary with success status, written files and explanation
        """
        offenders = sorted(set(preds) - set(images) | set(preds) - set(gts))
        if offenders:
            return {
                'success': False,
                'error': f"ids without image or ground truth: {offenders[:10]}",
                'explanation': "Every prediction needs a matching image and ground-truth mask."
            }
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written: List[Path] = []
        try:
            for case_id in sorted(preds):
                path = out_dir / f"{case_id}.png"
                save_rgb_png(comparison_panel(images[case_id], gts[case_id], preds[case_id]), path)
                written.append(path)
            chosen = sorted(preds)[:self.figure_cases]
            if chosen:
                figure = out_dir / 'figure.png'
                render_comparison_figure([(c, images[c], gts[c], preds[c]) for c in chosen], figure)
                written.append(figure)
        except (OSError, ValueError) as e:
            return {'success': False, 'error': str(e), 'explanation': "Overlay rendering failed."}
        return {
            'success': True,
            'files': written,
            'explanation': f"Rendered {len(preds)} overlay panels (GT green, prediction red) into {out_dir}."
        }
