"""
Lesion Clusterer Module

This module provides functionality to describe each lesion by an appearance feature vector,
group lesions with k-means, split them into train/val/test stratified by cluster, and build
within-cluster image pairs for co-segmentation training.
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from modules.image_grid import ImageGrid, SeededRng
from modules.recist_parser import RecistAnnotation

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 32
FEATURE_DIM = HISTOGRAM_BINS + 5
SPLIT_NAMES = ('train', 'val', 'test')
RANDOM_PAIR_CLUSTER = -1


class ClusteringError(ValueError):
    """Raised for invalid feature sets, cluster models or split requests."""


@dataclass(frozen=True)
class LesionFeature:
    lesion_id: str
    vector: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64).ravel()
        if not np.all(np.isfinite(vec)):
            raise ClusteringError(f"{self.lesion_id}: feature vector has non-finite entries")
        vec.setflags(write=False)
        object.__setattr__(self, 'vector', vec)


@dataclass
class ClusterModel:
    """
    k-means result. `assignments` maps lesion id to cluster index; `inertia_history` holds the
    inertia after every assignment step.
    """

    k: int
    centroids: np.ndarray
    assignments: Dict[str, int]
    inertia: float
    inertia_history: List[float] = field(default_factory=list)

    def members(self, cluster: int) -> List[str]:
        return sorted(lid for lid, c in self.assignments.items() if c == cluster)

    def cluster_sizes(self) -> List[int]:
        counts = np.bincount(list(self.assignments.values()), minlength=self.k)
        return counts.tolist()


@dataclass(frozen=True)
class DatasetSplit:
    train: FrozenSet[str]
    val: FrozenSet[str]
    test: FrozenSet[str]

    def __post_init__(self):
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise ClusteringError("dataset splits overlap")

    def subset(self, name: str) -> FrozenSet[str]:
        if name not in SPLIT_NAMES:
            raise ClusteringError(f"Unsupported split: {name}. Supported: {list(SPLIT_NAMES)}")
        return getattr(self, name)

    def split_of(self, lesion_id: str) -> str:
        for name in SPLIT_NAMES:
            if lesion_id in getattr(self, name):
                return name
        raise KeyError(lesion_id)


@dataclass(frozen=True)
class PairSet:
    """Unordered lesion pairs (a < b) of one split with the cluster they were drawn from."""

    split: str
    pairs: Tuple[Tuple[str, str, int], ...]

    def __len__(self) -> int:
        return len(self.pairs)


# Feature extraction

def extract_feature(img: ImageGrid, ann: RecistAnnotation) -> LesionFeature:
    """
    Handcrafted appearance descriptor of one lesion.

    Layout: 32-bin normalized intensity histogram over the RECIST endpoint bounding box,
    major length, minor length, aspect ratio, box mean, box standard deviation.

    Args:
        img: Normalized image in [0, 1]
        ann: RECIST annotation in the image's pixel frame

    Returns:
        LesionFeature with a 37-element vector
    """
    row0, row1, col0, col1 = ann.bounding_box()
    row0, col0 = max(row0, 0), max(col0, 0)
    row1, col1 = min(row1, img.height - 1), min(col1, img.width - 1)
    if row1 - row0 < 1 or col1 - col0 < 1:
        raise ClusteringError(f"{ann.image_id}: degenerate RECIST bounding box")
    region = img.data[row0:row1 + 1, col0:col1 + 1].ravel()
    hist, _ = np.histogram(np.clip(region, 0.0, 1.0), bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    hist = hist / hist.sum()
    shape = [ann.major_length, ann.minor_length, ann.major_length / ann.minor_length]
    stats = [float(region.mean()), float(region.std())]
    return LesionFeature(ann.image_id, np.concatenate([hist, shape, stats]))


def standardize_features(features: Sequence[LesionFeature]) -> List[LesionFeature]:
    """Z-score every feature column; constant columns are only centered."""
    matrix = feature_matrix(features)
    scale = matrix.std(axis=0)
    scale[scale == 0] = 1.0
    scaled = (matrix - matrix.mean(axis=0)) / scale
    return [LesionFeature(f.lesion_id, row) for f, row in zip(features, scaled)]


def feature_matrix(features: Sequence[LesionFeature]) -> np.ndarray:
    if not features:
        raise ClusteringError("no features given")
    dims = {f.vector.size for f in features}
    if len(dims) != 1:
        raise ClusteringError(f"features disagree on dimension: {sorted(dims)}")
    return np.vstack([f.vector for f in features])


# k-means

def _kmeans_pp(x: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    chosen = [int(gen.integers(x.shape[0]))]
    d2 = cdist(x, x[chosen], 'sqeuclidean').min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            remaining = np.setdiff1d(np.arange(x.shape[0]), chosen)
            idx = int(gen.choice(remaining))
        else:
            idx = int(gen.choice(x.shape[0], p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, cdist(x, x[[idx]], 'sqeuclidean')[:, 0])
    return x[chosen].copy()


def _assign(x: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d2 = cdist(x, centroids, 'sqeuclidean')
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(x.shape[0]), labels]


def kmeans(features: Sequence[LesionFeature], k: int, iters: int, rng: SeededRng) -> ClusterModel:
    """
    Lloyd's k-means with k-means++ seeding.

    Clusters that lose every member are re-seeded at the point farthest from its centroid.
    """
    x = feature_matrix(features)
    n = x.shape[0]
    if k < 1 or n < k:
        raise ClusteringError(f"k-means needs at least k points: {n} points for k={k}")
    gen = rng.generator
    centroids = _kmeans_pp(x, k, gen)
    history: List[float] = []

    for step in range(iters):
        labels, d2 = _assign(x, centroids)
        history.append(float(d2.sum()))
        logger.debug("k-means iteration %d: inertia %.6f", step + 1, history[-1])

        updated = centroids.copy()
        counts = np.bincount(labels, minlength=k)
        for c in np.flatnonzero(counts):
            updated[c] = x[labels == c].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            far = np.argsort(-d2, kind='stable')[:empty.size]
            updated[empty] = x[far]
            logger.debug("re-seeded %d empty cluster(s)", empty.size)
        if np.array_equal(updated, centroids):
            break
        centroids = updated

    labels, d2 = _assign(x, centroids)
    inertia = float(d2.sum())
    history.append(inertia)
    assignments = {f.lesion_id: int(c) for f, c in zip(features, labels)}
    return ClusterModel(k, centroids, assignments, inertia, history)


# Splitting and pairing

def _largest_remainder(n: int, ratios: Sequence[float]) -> List[int]:
    quotas = [r * n for r in ratios]
    counts = [int(np.floor(q + 1e-9)) for q in quotas]
    leftover = n - sum(counts)
    remainders = [q - c for q, c in zip(quotas, counts)]
    # stable sort keeps train, val, test order on ties
    for idx in sorted(range(len(ratios)), key=lambda i: -remainders[i])[:leftover]:
        counts[idx] += 1
    return counts


def stratified_split(model: ClusterModel, ratios: Sequence[float], rng: SeededRng) -> DatasetSplit:
    """
    Split each cluster by the given train/val/test ratios with largest-remainder rounding.

    Args:
        model: Cluster assignments
        ratios: Three fractions summing to 1
        rng: Seed source; each cluster is shuffled with its own named sub-stream

    Returns:
        Disjoint, exhaustive DatasetSplit
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ClusteringError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    parts = {name: set() for name in SPLIT_NAMES}
    for cluster in range(model.k):
        members = model.members(cluster)
        if not members:
            continue
        order = rng.spawn(f"split-{cluster}").generator.permutation(len(members))
        shuffled = [members[i] for i in order]
        start = 0
        for name, count in zip(SPLIT_NAMES, _largest_remainder(len(members), ratios)):
            parts[name].update(shuffled[start:start + count])
            start += count
    return DatasetSplit(frozenset(parts['train']), frozenset(parts['val']), frozenset(parts['test']))


def make_pairs(split: DatasetSplit, model: ClusterModel, cap_per_cluster: Optional[int],
               rng: SeededRng) -> Dict[str, PairSet]:
    """
    All unordered within-cluster, within-split pairs, optionally capped per cluster by a seeded
    uniform sample.
    """
    result = {}
    for name in SPLIT_NAMES:
        members_of_split = split.subset(name)
        pairs: List[Tuple[str, str, int]] = []
        for cluster in range(model.k):
            members = [m for m in model.members(cluster) if m in members_of_split]
            candidates = list(combinations(members, 2))
            if cap_per_cluster is not None and len(candidates) > cap_per_cluster:
                gen = rng.spawn(f"pairs-{name}-{cluster}").generator
                keep = np.sort(gen.choice(len(candidates), size=cap_per_cluster, replace=False))
                candidates = [candidates[i] for i in keep]
            pairs.extend((a, b, cluster) for a, b in candidates)
        result[name] = PairSet(name, tuple(pairs))
        logger.debug("%s: %d within-cluster pairs", name, len(pairs))
    return result


def make_random_pairs(split: DatasetSplit, counts: Dict[str, int], rng: SeededRng) -> Dict[str, PairSet]:
    """
    Pairs drawn uniformly across clusters within each split, ignoring cluster membership.

    Args:
        split: Dataset split
        counts: Number of pairs to draw per split name (capped at all possible pairs)
        rng: Seed source

    Returns:
        PairSet per split with cluster recorded as -1
    """
    result = {}
    for name in SPLIT_NAMES:
        members = sorted(split.subset(name))
        rows, cols = np.triu_indices(len(members), k=1)
        wanted = min(int(counts.get(name, 0)), rows.size)
        gen = rng.spawn(f"random-pairs-{name}").generator
        keep = np.sort(gen.choice(rows.size, size=wanted, replace=False)) if wanted else np.zeros(0, dtype=int)
        pairs = tuple((members[rows[i]], members[cols[i]], RANDOM_PAIR_CLUSTER) for i in keep)
        result[name] = PairSet(name, pairs)
    return result


def cluster_agreement(assignments: Dict[str, int], labels: Dict[str, str]) -> float:
    """
    Fraction of lesions whose cluster maps to their reference label under the best one-to-one
    cluster-to-label matching.
    """
    ids = sorted(set(assignments) & set(labels))
    if not ids:
        raise ClusteringError("no lesions shared between assignments and reference labels")
    table = pd.crosstab(pd.Series([assignments[i] for i in ids], name='cluster'),
                        pd.Series([labels[i] for i in ids], name='label'))
    rows, cols = linear_sum_assignment(table.to_numpy(), maximize=True)
    return float(table.to_numpy()[rows, cols].sum()) / len(ids)


# CSV persistence

PathLike = Union[str, Path]


def save_features(features: Sequence[LesionFeature], path: PathLike) -> None:
    matrix = feature_matrix(features)
    frame = pd.DataFrame(matrix, columns=[f"f{i}" for i in range(matrix.shape[1])])
    frame.insert(0, 'lesion_id', [f.lesion_id for f in features])
    frame.to_csv(path, index=False, float_format='%.10g')


def load_feature_csv(path: PathLike) -> List[LesionFeature]:
    """Read `lesion_id, f0..f{D-1}` rows as precomputed lesion features."""
    frame = pd.read_csv(path, dtype={'lesion_id': str})
    if 'lesion_id' not in frame.columns:
        raise ClusteringError(f"feature file {path} has no lesion_id column")
    columns = [c for c in frame.columns if c != 'lesion_id']
    expected = [f"f{i}" for i in range(len(columns))]
    if columns != expected:
        raise ClusteringError(f"feature columns must be {expected[:3]}..., got {columns[:3]}...")
    values = frame[columns].to_numpy(dtype=np.float64)
    return [LesionFeature(lid, row) for lid, row in zip(frame['lesion_id'], values)]


def save_centroids(model: ClusterModel, path: PathLike) -> None:
    frame = pd.DataFrame(model.centroids, columns=[f"f{i}" for i in range(model.centroids.shape[1])])
    frame.insert(0, 'cluster', range(model.k))
    frame.to_csv(path, index=False, float_format='%.10g')


def save_assignments(model: ClusterModel, path: PathLike) -> None:
    ids = sorted(model.assignments)
    pd.DataFrame({'lesion_id': ids, 'cluster': [model.assignments[i] for i in ids]}).to_csv(path, index=False)


def load_cluster_model(assignments_path: PathLike, centroids_path: PathLike) -> ClusterModel:
    frame = pd.read_csv(assignments_path, dtype={'lesion_id': str})
    cents = pd.read_csv(centroids_path).sort_values('cluster')
    centroids = cents.drop(columns='cluster').to_numpy(dtype=np.float64)
    assignments = dict(zip(frame['lesion_id'], frame['cluster'].astype(int)))
    return ClusterModel(centroids.shape[0], centroids, assignments, float('nan'))


def save_split(split: DatasetSplit, path: PathLike) -> None:
    rows = [(lid, name) for name in SPLIT_NAMES for lid in sorted(split.subset(name))]
    pd.DataFrame(rows, columns=['lesion_id', 'split']).to_csv(path, index=False)


def load_split(path: PathLike) -> DatasetSplit:
    frame = pd.read_csv(path, dtype={'lesion_id': str})
    parts = {name: frozenset(frame.loc[frame['split'] == name, 'lesion_id']) for name in SPLIT_NAMES}
    return DatasetSplit(**parts)


def save_pairs(pair_sets: Dict[str, PairSet], path: PathLike) -> None:
    rows = [(a, b, c, name) for name in SPLIT_NAMES if name in pair_sets for a, b, c in pair_sets[name].pairs]
    pd.DataFrame(rows, columns=['lesion_id_a', 'lesion_id_b', 'cluster', 'split']).to_csv(path, index=False)


def load_pairs(path: PathLike) -> Dict[str, PairSet]:
    frame = pd.read_csv(path, dtype={'lesion_id_a': str, 'lesion_id_b': str})
    result = {}
    for name in SPLIT_NAMES:
        sub = frame[frame['split'] == name]
        pairs = tuple(zip(sub['lesion_id_a'], sub['lesion_id_b'], sub['cluster'].astype(int)))
        result[name] = PairSet(name, pairs)
    return result


class LesionClusterer:
    """
    Feature clustering step of the pipeline, returning explainable results.
    """

    def __init__(self, k: int, iterations: int = 100, standardize: bool = False):
        self.k = k
        self.iterations = iterations
        self.standardize = standardize

    def cluster(self, features: List[LesionFeature], rng: SeededRng,
                reference_labels: Optional[Dict[str, str]] = None) -> Dict[str, Any]:
        """
        Cluster lesion features.

        Args:
            features: One feature per lesion
            rng: Seed source for k-means++ seeding
            reference_labels: Optional lesion id → archetype map for an agreement score

        Returns:
            Dictionary with success status, cluster model, agreement and explanation
        """
        try:
            used = standardize_features(features) if self.standardize else list(features)
            model = kmeans(used, self.k, self.iterations, rng)
        except ClusteringError as e:
            return {
                'success': False,
                'error': str(e),
                'explanation': f"k-means with k={self.k} failed on {len(features)} lesions."
            }
        agreement = cluster_agreement(model.assignments, reference_labels) if reference_labels else None
        sizes = model.cluster_sizes()
        explanation = (f"Grouped {len(features)} lesions into {self.k} clusters "
                       f"(sizes {min(sizes)}-{max(sizes)}, inertia {model.inertia:.4f}).")
        if agreement is not None:
            explanation += f" Archetype agreement {agreement:.1%}."
        return {
            'success': True,
            'model': model,
            'agreement': agreement,
            'explanation': explanation
        }
