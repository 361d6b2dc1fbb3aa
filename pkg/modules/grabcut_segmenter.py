"""
GrabCut Segmenter Module

This module provides functionality to turn RECIST diameters into initial lesion masks:
trimap synthesis from the diameter quadrilateral, then iterated GMM fitting and min-cut
segmentation over a grayscale contrast-sensitive graph.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from matplotlib.path import Path as PolygonPath

from modules.gmm_model import GmmModel, fit_gmm, gmm_neg_log_likelihood
from modules.graph_cut import FlowGraph, max_flow_min_cut
from modules.image_grid import (
    DEFINITE_BG, DEFINITE_FG, PROBABLE_BG, PROBABLE_FG,
    BinaryMask, ImageGrid, SeededRng, Trimap,
)
from modules.recist_parser import RecistAnnotation, RecistError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GrabcutConfig:
    gmm_components: int = 5
    grabcut_iterations: int = 5
    gamma: float = 50.0
    fg_seed_shrink: float = 0.8
    bbox_expand: int = 20
    neighbors: int = 8
    em_iterations: int = 10
    hard_capacity: float = 1e9
    variance_floor: float = 1e-6

    def __post_init__(self):
        if self.gmm_components < 1 or self.grabcut_iterations < 1 or self.em_iterations < 1:
            raise ValueError("gmm_components, grabcut_iterations and em_iterations must be positive")
        if self.gamma <= 0 or self.hard_capacity <= 0 or self.variance_floor <= 0:
            raise ValueError("gamma, hard_capacity and variance_floor must be positive")
        if not 0.0 < self.fg_seed_shrink <= 1.0:
            raise ValueError(f"fg_seed_shrink must lie in (0, 1], got {self.fg_seed_shrink}")
        if self.bbox_expand < 0:
            raise ValueError(f"bbox_expand must be >= 0, got {self.bbox_expand}")
        if self.neighbors not in (4, 8):
            raise ValueError(f"Unsupported neighbor system: {self.neighbors}. Supported: [4, 8]")


def _ordered_quadrilateral(ann: RecistAnnotation) -> np.ndarray:
    pts = ann.endpoints
    center = pts.mean(axis=0)
    angles = np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0])
    return pts[np.argsort(angles, kind='stable')]


def _polygon_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _rasterize(vertices: np.ndarray, width: int, height: int) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    centers = np.column_stack([cols.ravel(), rows.ravel()]).astype(np.float64)
    inside = PolygonPath(vertices).contains_points(centers)
    return inside.reshape(height, width)


def trimap_from_recist(ann: RecistAnnotation, w: int, h: int, cfg: GrabcutConfig) -> Trimap:
    """
    Build a GrabCut trimap from one RECIST annotation.

    DefiniteFG is the diameter quadrilateral shrunk toward its centroid by fg_seed_shrink,
    ProbableFG the rest of the quadrilateral, DefiniteBG everything outside the endpoint
    bounding box grown by bbox_expand, ProbableBG what remains.

    Raises:
        RecistError: endpoints outside the image, or collinear endpoints
        GridError: the resulting map lacks DefiniteFG or DefiniteBG pixels
    """
    if not ann.inside(w, h):
        raise RecistError(f"{ann.image_id}: annotation out of bounds for {w}x{h} image")
    quad = _ordered_quadrilateral(ann)
    if _polygon_area(quad) < 1e-6:
        raise RecistError(f"{ann.image_id}: degenerate RECIST (collinear endpoints)")

    center = quad.mean(axis=0)
    seed_quad = center + cfg.fg_seed_shrink * (quad - center)
    probable_fg = _rasterize(quad, w, h)
    definite_fg = _rasterize(seed_quad, w, h)
    if not definite_fg.any():
        # tiny lesion: keep the pixel under the centroid as the foreground seed
        col = int(np.clip(np.rint(center[0]), 0, w - 1))
        row = int(np.clip(np.rint(center[1]), 0, h - 1))
        definite_fg[row, col] = True

    row0, row1, col0, col1 = ann.bounding_box()
    e = cfg.bbox_expand
    labels = np.full((h, w), DEFINITE_BG, dtype=np.uint8)
    labels[max(row0 - e, 0):min(row1 + e, h - 1) + 1, max(col0 - e, 0):min(col1 + e, w - 1) + 1] = PROBABLE_BG
    labels[probable_fg] = PROBABLE_FG
    labels[definite_fg] = DEFINITE_FG
    return Trimap(labels)


def neighbor_pairs(height: int, width: int, neighbors: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """
    Enumerate each undirected neighbor pair once.

    Returns:
        ((m, 2) flat pixel indices, (m,) Euclidean distances)
    """
    index = np.arange(height * width).reshape(height, width)
    offsets = [(0, 1), (1, 0)]
    if neighbors == 8:
        offsets += [(1, 1), (1, -1)]
    pairs, dists = [], []
    for dr, dc in offsets:
        r_lo, r_hi = 0, height - dr
        c_lo, c_hi = max(0, -dc), width - max(0, dc)
        if r_hi <= r_lo or c_hi <= c_lo:
            continue
        a = index[r_lo:r_hi, c_lo:c_hi].ravel()
        b = index[r_lo + dr:r_hi + dr, c_lo + dc:c_hi + dc].ravel()
        pairs.append(np.column_stack([a, b]))
        dists.append(np.full(a.size, np.hypot(dr, dc)))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    return np.concatenate(pairs), np.concatenate(dists)


def smoothness_capacities(img: ImageGrid, cfg: GrabcutConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Contrast-sensitive Potts weights γ·exp(−β(I_p−I_q)²)/dist(p,q)."""
    edges, dist = neighbor_pairs(img.height, img.width, cfg.neighbors)
    flat = img.data.ravel()
    diff2 = (flat[edges[:, 0]] - flat[edges[:, 1]]) ** 2 if edges.size else np.zeros(0)
    mean_diff2 = float(diff2.mean()) if diff2.size else 0.0
    # uniform image: β undefined, fall back to plain Potts smoothness
    beta = 0.0 if mean_diff2 == 0.0 else 1.0 / (2.0 * mean_diff2)
    return edges, cfg.gamma * np.exp(-beta * diff2) / dist


def build_graph(img: ImageGrid, trimap: Trimap, fg_gmm: GmmModel, bg_gmm: GmmModel,
                cfg: GrabcutConfig) -> FlowGraph:
    """
    Encode the GrabCut energy as an s-t graph; the source side is foreground.

    Probable pixels get terminal capacities from the two GMM negative log-likelihoods, shifted
    per pixel so the smaller is zero. DefiniteFG pixels carry hard_capacity on the source link,
    DefiniteBG pixels on the sink link.
    """
    if (img.height, img.width) != (trimap.height, trimap.width):
        raise ValueError(f"image {img.width}x{img.height} and trimap {trimap.width}x{trimap.height} differ")
    flat = img.data.ravel()
    labels = trimap.labels.ravel()
    d_fg = np.asarray(gmm_neg_log_likelihood(fg_gmm, flat))
    d_bg = np.asarray(gmm_neg_log_likelihood(bg_gmm, flat))
    floor = np.minimum(d_fg, d_bg)
    source_caps = d_bg - floor
    sink_caps = d_fg - floor

    hard_fg = labels == DEFINITE_FG
    hard_bg = labels == DEFINITE_BG
    source_caps[hard_fg], sink_caps[hard_fg] = cfg.hard_capacity, 0.0
    source_caps[hard_bg], sink_caps[hard_bg] = 0.0, cfg.hard_capacity

    edges, caps = smoothness_capacities(img, cfg)
    return FlowGraph(flat.size, source_caps, sink_caps, edges, caps)


def labeling_energy(img: ImageGrid, trimap: Trimap, labeling: np.ndarray, fg_gmm: GmmModel,
                    bg_gmm: GmmModel, cfg: GrabcutConfig) -> np.ndarray:
    """
    GrabCut energy of one labeling or a batch of labelings.

    E = Σ_p D_{label(p)}(p) + Σ_{separated neighbors} smoothness + hard_capacity per violated
    definite seed.

    Args:
        labeling: Boolean foreground array of shape (h, w), (h·w,) or (B, h·w)

    Returns:
        Scalar energy, or a (B,) array for batched input
    """
    flat = img.data.ravel()
    lab = np.asarray(labeling, dtype=bool)
    single = lab.ndim < 2 or (lab.ndim == 2 and lab.shape == (img.height, img.width))
    lab = lab.reshape(-1, flat.size)

    d_fg = np.asarray(gmm_neg_log_likelihood(fg_gmm, flat))
    d_bg = np.asarray(gmm_neg_log_likelihood(bg_gmm, flat))
    data = np.where(lab, d_fg, d_bg).sum(axis=1)

    seeds = trimap.labels.ravel()
    violations = ((~lab) & (seeds == DEFINITE_FG)).sum(axis=1) + (lab & (seeds == DEFINITE_BG)).sum(axis=1)

    edges, caps = smoothness_capacities(img, cfg)
    smooth = np.zeros(lab.shape[0])
    if edges.size:
        split = lab[:, edges[:, 0]] != lab[:, edges[:, 1]]
        smooth = split.astype(np.float64) @ caps
    energy = data + smooth + cfg.hard_capacity * violations
    return float(energy[0]) if single else energy


@dataclass
class GrabcutTrace:
    mask: BinaryMask
    energies: List[float]
    fg_gmm: GmmModel
    bg_gmm: GmmModel


def grabcut_with_trace(img: ImageGrid, trimap: Trimap, cfg: GrabcutConfig, rng: SeededRng) -> GrabcutTrace:
    """
    Run GrabCut and record the energy after every cut.

    GMMs are cold-started once from the trimap's initial labeling, then warm-started from the
    previous iteration so each refit cannot raise the energy.
    """
    if (img.height, img.width) != (trimap.height, trimap.width):
        raise ValueError(f"image {img.width}x{img.height} and trimap {trimap.width}x{trimap.height} differ")
    flat = img.data.ravel()
    labeling = trimap.initial_labeling().ravel()
    fg_gmm: Optional[GmmModel] = None
    bg_gmm: Optional[GmmModel] = None
    energies: List[float] = []
    fg_rng, bg_rng = rng.spawn('grabcut-fg'), rng.spawn('grabcut-bg')

    for iteration in range(cfg.grabcut_iterations):
        fg_gmm = fit_gmm(flat[labeling], cfg.gmm_components, cfg.em_iterations, fg_rng,
                         cfg.variance_floor, init=fg_gmm)
        bg_gmm = fit_gmm(flat[~labeling], cfg.gmm_components, cfg.em_iterations, bg_rng,
                         cfg.variance_floor, init=bg_gmm)
        graph = build_graph(img, trimap, fg_gmm, bg_gmm, cfg)
        _, labeling = max_flow_min_cut(graph)
        energies.append(labeling_energy(img, trimap, labeling, fg_gmm, bg_gmm, cfg))
        logger.debug("GrabCut iteration %d: energy %.6f, foreground %d px",
                     iteration + 1, energies[-1], int(labeling.sum()))

    mask = BinaryMask(labeling.reshape(img.height, img.width))
    return GrabcutTrace(mask, energies, fg_gmm, bg_gmm)


def grabcut(img: ImageGrid, trimap: Trimap, cfg: GrabcutConfig, rng: SeededRng) -> BinaryMask:
    return grabcut_with_trace(img, trimap, cfg, rng).mask


class InitialMaskGenerator:
    """
    RECIST-to-mask generator used by the gen-masks stage.
    """

    def __init__(self, config: GrabcutConfig):
        self.config = config

    def generate(self, img: ImageGrid, ann: RecistAnnotation, rng: SeededRng) -> Dict[str, Any]:
        """
        Segment one lesion from its RECIST diameters.

        Args:
            img: Normalized lesion image
            ann: RECIST annotation in the image's pixel frame
            rng: Per-lesion seed source

        Returns:
            Dictionary with success status, mask, energy trace and explanation
        """
        try:
            trimap = trimap_from_recist(ann, img.width, img.height, self.config)
            trace = grabcut_with_trace(img, trimap, self.config, rng)
        except ValueError as e:
            return {
                'success': False,
                'error': f"{ann.image_id}: {e}",
                'explanation': f"GrabCut could not segment lesion {ann.image_id}."
            }
        return {
            'success': True,
            'mask': trace.mask,
            'energies': trace.energies,
            'explanation': (
                f"Lesion {ann.image_id}: {trace.mask.area} px foreground after "
                f"{len(trace.energies)} GrabCut iterations (final energy {trace.energies[-1]:.2f})."
            )
        }
