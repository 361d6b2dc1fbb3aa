"""
RECIST Parser Module

This module provides functionality to parse RECIST diameter measurements (one major and one
minor axis segment per lesion) from annotation CSV files and validate their geometry.
Each parse call returns clean, explainable output alongside the parsed records.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

Point = Tuple[float, float]
Segment = Tuple[Point, Point]

ANNOTATION_COLUMNS = [
    'image_path', 'lesion_id',
    'x11', 'y11', 'x12', 'y12',
    'x21', 'y21', 'x22', 'y22',
]

DEFAULT_CROSSING_TOLERANCE = 3.0


class RecistError(ValueError):
    """Raised for malformed or geometrically invalid RECIST annotations."""


def segment_length(seg: Segment) -> float:
    (x1, y1), (x2, y2) = seg
    return float(np.hypot(x2 - x1, y2 - y1))


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.linalg.norm(p - a))
    t = np.clip(float((p - a) @ ab) / denom, 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def segment_distance(s1: Segment, s2: Segment) -> float:
    """Shortest Euclidean distance between two closed segments (0 when they cross)."""
    a, b = np.asarray(s1[0], float), np.asarray(s1[1], float)
    c, d = np.asarray(s2[0], float), np.asarray(s2[1], float)

    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    o1, o2 = orient(a, b, c), orient(a, b, d)
    o3, o4 = orient(c, d, a), orient(c, d, b)
    if o1 * o2 < 0 and o3 * o4 < 0:
        return 0.0
    return min(
        _point_segment_distance(c, a, b),
        _point_segment_distance(d, a, b),
        _point_segment_distance(a, c, d),
        _point_segment_distance(b, c, d),
    )


@dataclass(frozen=True)
class RecistAnnotation:
    """Major and minor diameter segments of one lesion, in (x=column, y=row) pixel coordinates."""

    major: Segment
    minor: Segment
    image_id: str
    image_path: str = ''

    def __post_init__(self):
        coords = np.array([*self.major, *self.minor], dtype=np.float64)
        if coords.shape != (4, 2) or not np.all(np.isfinite(coords)):
            raise RecistError(f"{self.image_id}: endpoints must be four finite (x, y) points")
        if segment_length(self.minor) <= 0.0:
            raise RecistError(f"{self.image_id}: degenerate RECIST (zero-length minor axis)")
        if segment_length(self.major) < segment_length(self.minor):
            raise RecistError(f"{self.image_id}: major axis shorter than minor axis")

    @property
    def endpoints(self) -> np.ndarray:
        """(4, 2) array: major start, major end, minor start, minor end."""
        return np.array([*self.major, *self.minor], dtype=np.float64)

    @property
    def major_length(self) -> float:
        return segment_length(self.major)

    @property
    def minor_length(self) -> float:
        return segment_length(self.minor)

    def crosses(self, tolerance: float = DEFAULT_CROSSING_TOLERANCE) -> bool:
        return segment_distance(self.major, self.minor) <= tolerance

    def bounding_box(self) -> Tuple[int, int, int, int]:
        """Integer (row0, row1, col0, col1) box covering the endpoints, bounds inclusive."""
        pts = self.endpoints
        col0, col1 = int(np.floor(pts[:, 0].min())), int(np.ceil(pts[:, 0].max()))
        row0, row1 = int(np.floor(pts[:, 1].min())), int(np.ceil(pts[:, 1].max()))
        return row0, row1, col0, col1

    def inside(self, width: int, height: int) -> bool:
        pts = self.endpoints
        return bool(np.all((pts[:, 0] >= 0) & (pts[:, 0] <= width - 1)
                           & (pts[:, 1] >= 0) & (pts[:, 1] <= height - 1)))

    def translated(self, dx: float, dy: float) -> 'RecistAnnotation':
        def shift(seg):
            return tuple((x + dx, y + dy) for x, y in seg)
        return RecistAnnotation(shift(self.major), shift(self.minor), self.image_id, self.image_path)


def annotation_from_row(row: Dict[str, Any],
                        crossing_tolerance: float = DEFAULT_CROSSING_TOLERANCE) -> RecistAnnotation:
    """
    Build an annotation from one CSV record.

    The listed major/minor are swapped when the major segment is the shorter one.
    """
    lesion_id = str(row['lesion_id'])
    first = ((float(row['x11']), float(row['y11'])), (float(row['x12']), float(row['y12'])))
    second = ((float(row['x21']), float(row['y21'])), (float(row['x22']), float(row['y22'])))
    if segment_length(first) < segment_length(second):
        logger.warning("%s: listed major axis is shorter than minor, swapping", lesion_id)
        first, second = second, first
    ann = RecistAnnotation(first, second, lesion_id, str(row.get('image_path', '')))
    if not ann.crosses(crossing_tolerance):
        raise RecistError(
            f"{lesion_id}: diameters do not cross (gap {segment_distance(first, second):.2f} px "
            f"> tolerance {crossing_tolerance})")
    return ann


def annotation_to_row(ann: RecistAnnotation) -> Dict[str, Any]:
    (x11, y11), (x12, y12) = ann.major
    (x21, y21), (x22, y22) = ann.minor
    return {
        'image_path': ann.image_path, 'lesion_id': ann.image_id,
        'x11': x11, 'y11': y11, 'x12': x12, 'y12': y12,
        'x21': x21, 'y21': y21, 'x22': x22, 'y22': y22,
    }


def load_annotations(path: Union[str, Path],
                     crossing_tolerance: float = DEFAULT_CROSSING_TOLERANCE) -> List[RecistAnnotation]:
    """
    Read a RECIST annotation CSV.

    Args:
        path: CSV with columns image_path, lesion_id, x11..y12 (major), x21..y22 (minor)
        crossing_tolerance: Largest allowed gap between the two diameters, in pixels

    Returns:
        One RecistAnnotation per row, in file order
    """
    frame = pd.read_csv(path, dtype={'lesion_id': str, 'image_path': str})
    missing = [col for col in ANNOTATION_COLUMNS if col not in frame.columns]
    if missing:
        raise RecistError(f"annotation file {path} is missing column(s): {missing}")
    if frame['lesion_id'].duplicated().any():
        dupes = sorted(frame.loc[frame['lesion_id'].duplicated(), 'lesion_id'].unique())
        raise RecistError(f"duplicate lesion ids in {path}: {dupes}")
    annotations = [annotation_from_row(row, crossing_tolerance) for row in frame.to_dict('records')]
    logger.info("Loaded %d RECIST annotations from %s", len(annotations), path)
    return annotations


def save_annotations(annotations: List[RecistAnnotation], path: Union[str, Path]) -> None:
    frame = pd.DataFrame([annotation_to_row(a) for a in annotations], columns=ANNOTATION_COLUMNS)
    frame.to_csv(path, index=False, float_format='%.3f')


class RecistParser:
    """
    Annotation-file parser returning the success/explanation result used by stage commands.
    """

    def __init__(self, crossing_tolerance: float = DEFAULT_CROSSING_TOLERANCE):
        self.crossing_tolerance = crossing_tolerance

    def parse_file(self, path: Union[str, Path]) -> Dict[str, Any]:
        """
        Parse an annotation CSV.

        Args:
            path: Annotation CSV location

        Returns:
            Dictionary with success status, annotations and explanation
        """
        try:
            annotations = load_annotations(path, self.crossing_tolerance)
        except (OSError, RecistError, KeyError, ValueError) as e:
            return {
                'success': False,
                'error': str(e),
                'explanation': f"Could not read RECIST annotations from {path}."
            }
        majors = [a.major_length for a in annotations]
        return {
            'success': True,
            'annotations': annotations,
            'explanation': (
                f"Parsed {len(annotations)} lesions; major diameter "
                f"{min(majors, default=0):.1f}-{max(majors, default=0):.1f} px."
            )
        }
