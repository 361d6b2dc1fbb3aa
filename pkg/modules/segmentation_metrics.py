"""
Segmentation Metrics Module

This module provides functionality to score predicted lesion masks against reference masks
pixel-wise: recall, precision, Dice, averaged Hausdorff distance (AVD) and volumetric
similarity (VS), with mean ± standard deviation aggregation over cases.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from scipy import ndimage

from modules.image_grid import BinaryMask

logger = logging.getLogger(__name__)

METRIC_NAMES = ('recall', 'precision', 'dice', 'avd', 'vs')
AVD_MODES = ('max', 'mean')


class MetricError(ValueError):
    """Raised when a metric is undefined for its inputs."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def both_empty(self) -> bool:
        return self.tp + self.fp + self.fn == 0


def _as_bool(mask) -> np.ndarray:
    if isinstance(mask, BinaryMask):
        return mask.as_bool()
    return np.asarray(mask).astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise MetricError(f"prediction {p.shape} and ground truth {g.shape} differ in size")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


# Empty prediction and empty reference score 1; any other zero denominator scores 0.

def recall(c: ConfusionCounts) -> float:
    if c.both_empty:
        return 1.0
    denom = c.tp + c.fn
    return c.tp / denom if denom else 0.0


def precision(c: ConfusionCounts) -> float:
    if c.both_empty:
        return 1.0
    denom = c.tp + c.fp
    return c.tp / denom if denom else 0.0


def dice(c: ConfusionCounts) -> float:
    if c.both_empty:
        return 1.0
    return 2 * c.tp / (2 * c.tp + c.fp + c.fn)


def volumetric_similarity(c: ConfusionCounts) -> float:
    if c.both_empty:
        return 1.0
    return 1.0 - abs(c.fn - c.fp) / (2 * c.tp + c.fp + c.fn)


def _directed_average(src: np.ndarray, dst: np.ndarray) -> float:
    # distance from every pixel to the nearest foreground pixel of dst
    dist = ndimage.distance_transform_edt(~dst)
    return float(dist[src].mean())


def averaged_hausdorff(pred, gt, mode: str = 'max') -> float:
    """
    Averaged Hausdorff distance in pixels.

    Args:
        pred: Predicted mask
        gt: Reference mask
        mode: 'max' of the two directed averages, or their 'mean'

    Raises:
        MetricError: either mask is empty
    """
    if mode not in AVD_MODES:
        raise MetricError(f"Unsupported AVD mode: {mode}. Supported: {list(AVD_MODES)}")
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise MetricError(f"prediction {p.shape} and ground truth {g.shape} differ in size")
    if not p.any() or not g.any():
        raise MetricError("AVD undefined for empty set")
    forward, backward = _directed_average(p, g), _directed_average(g, p)
    return max(forward, backward) if mode == 'max' else 0.5 * (forward + backward)


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    recall: float
    precision: float
    dice: float
    avd: Optional[float]
    vs: float


def evaluate_case(case_id: str, pred, gt, avd_mode: str = 'max') -> CaseMetrics:
    counts = confusion(pred, gt)
    try:
        avd = averaged_hausdorff(pred, gt, avd_mode)
    except MetricError as e:
        logger.debug("%s: %s", case_id, e)
        avd = None
    return CaseMetrics(case_id, recall(counts), precision(counts), dice(counts), avd,
                       volumetric_similarity(counts))


@dataclass
class EvalReport:
    cases: List[CaseMetrics]
    mean: Dict[str, float] = field(default_factory=dict)
    std: Dict[str, float] = field(default_factory=dict)
    avd_missing: int = 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(c) for c in self.cases], columns=['case_id', *METRIC_NAMES])

    def summary(self) -> Dict[str, Any]:
        def clean(values):
            return {k: (None if v is None or math.isnan(v) else v) for k, v in values.items()}
        return {'cases': len(self.cases), 'avd_missing': self.avd_missing,
                'mean': clean(self.mean), 'std': clean(self.std)}


def aggregate(cases: List[CaseMetrics]) -> EvalReport:
    """
    Mean and population standard deviation per metric.

    Cases with a missing AVD are left out of the AVD statistics and counted.
    """
    if not cases:
        raise MetricError("cannot aggregate an empty case list")
    report = EvalReport(list(cases))
    for name in METRIC_NAMES:
        values = np.array([getattr(c, name) for c in cases if getattr(c, name) is not None], dtype=np.float64)
        if values.size == 0:
            report.mean[name], report.std[name] = float('nan'), float('nan')
        else:
            report.mean[name], report.std[name] = float(values.mean()), float(values.std())
    report.avd_missing = sum(1 for c in cases if c.avd is None)
    return report


def format_table(reports: Dict[str, EvalReport]) -> str:
    """Rows of `mean ± std` per metric: three decimals for means, two for deviations."""
    header = ['method', *METRIC_NAMES]
    rows = [header]
    for name, report in reports.items():
        cells = [name]
        for metric in METRIC_NAMES:
            mu, sd = report.mean.get(metric, float('nan')), report.std.get(metric, float('nan'))
            cells.append('n/a' if math.isnan(mu) else f"{mu:.3f} ± {sd:.2f}")
        rows.append(cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [' | '.join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, '-+-'.join('-' * w for w in widths))
    return '\n'.join(lines) + '\n'


def save_report(report: EvalReport, csv_path: Union[str, Path], json_path: Union[str, Path]) -> None:
    report.to_frame().to_csv(csv_path, index=False, float_format='%.6f')
    with open(json_path, 'w') as handle:
        json.dump(report.summary(), handle, indent=2, sort_keys=True)
        handle.write('\n')


class SegmentationEvaluator:
    """
    Batch evaluator over matched prediction / reference masks.
    """

    def __init__(self, avd_mode: str = 'max'):
        if avd_mode not in AVD_MODES:
            raise ValueError(f"Unsupported AVD mode: {avd_mode}. Supported: {list(AVD_MODES)}")
        self.avd_mode = avd_mode

    def evaluate(self, predictions: Dict[str, BinaryMask], references: Dict[str, BinaryMask]) -> Dict[str, Any]:
        """
        Score every prediction against the reference with the same id.

        Args:
            predictions: Case id → predicted mask
            references: Case id → reference mask

        Returns:
            Dictionary with success status, EvalReport and explanation
        """
        missing = sorted(set(predictions) - set(references))
        if missing:
            return {
                'success': False,
                'error': f"no reference mask for case(s): {missing[:10]}",
                'explanation': "Every prediction needs a reference mask with the same id."
            }
        if not predictions:
            return {
                'success': False,
                'error': "no cases to evaluate",
                'explanation': "The prediction set is empty."
            }
        try:
            cases = [evaluate_case(cid, predictions[cid], references[cid], self.avd_mode)
                     for cid in sorted(predictions)]
        except MetricError as e:
            return {'success': False, 'error': str(e), 'explanation': "Mask sizes do not match."}
        report = aggregate(cases)
        return {
            'success': True,
            'report': report,
            'explanation': (
                f"{len(cases)} cases: Dice {report.mean['dice']:.3f} ± {report.std['dice']:.2f}, "
                f"{report.avd_missing} case(s) without AVD."
            )
        }
