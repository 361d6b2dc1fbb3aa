"""
Pipeline Stages Module

This module provides the batch stage commands of the lesion co-segmentation pipeline:
phantom generation, GrabCut mask generation, clustering, splitting, pairing, training,
inference, CRF refinement, evaluation, overlays and the strategy comparison experiment.

Every stage reads its upstream artifacts from the output directory, writes its own
directory plus a manifest.json (config hash, seed, upstream manifest hashes, output hashes),
and returns the success/explanation dictionary used throughout the package.
"""

import functools
import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from tqdm import tqdm

from modules.coseg_network import AttentionKind, CosegNetwork, NetworkConfig, ParamStore, infer, stack_images
from modules.coseg_trainer import load_checkpoint, save_checkpoint, save_loss_curve, train
from modules.dense_crf import DenseCrfRefiner
from modules.grabcut_segmenter import InitialMaskGenerator
from modules.image_grid import (
    BinaryMask, ImageGrid, SeededRng, load_image_png, load_mask_png, normalize,
    preprocess_image, preprocess_mask, restore_mask, save_mask_png,
)
from modules.lesion_clusterer import (
    SPLIT_NAMES, ClusterModel, DatasetSplit, LesionClusterer, PairSet, extract_feature, load_cluster_model,
    load_feature_csv, load_pairs, load_split, make_pairs, make_random_pairs, save_assignments, save_centroids,
    save_features, save_pairs, save_split, standardize_features, stratified_split,
)
from modules.overlay_visualizer import OverlayVisualizer
from modules.phantom_generator import PhantomGenerator, load_archetype_labels
from modules.pipeline_config import PipelineConfig, config_hash
from modules.recist_parser import RecistAnnotation, RecistParser
from modules.segmentation_metrics import (
    METRIC_NAMES, EvalReport, SegmentationEvaluator, confusion, dice, format_table, save_report,
)

logger = logging.getLogger(__name__)

MANIFEST = 'manifest.json'
EVALUATION_SOURCES = {
    'masks': 'masks',
    'predictions': 'predictions/masks',
    'refined': 'refined',
}


class PipelineError(ValueError):
    """Raised for missing upstream artifacts, stale manifests or inconsistent inputs."""


@dataclass
class StageContext:
    """Resolved configuration and CLI flags shared by every stage."""

    config: PipelineConfig
    force: bool = False
    progress: bool = True
    command: str = 'coseg.py'
    _hash: Optional[str] = field(default=None, repr=False)

    @property
    def out_dir(self) -> Path:
        return self.config.out_dir

    @property
    def config_hash(self) -> str:
        if self._hash is None:
            self._hash = config_hash(self.config)
        return self._hash

    @property
    def rng(self) -> SeededRng:
        return SeededRng(self.config.seed)

    def stage_dir(self, name: str) -> Path:
        return self.out_dir / name


# Manifests

def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for block in iter(lambda: handle.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(ctx: StageContext, stage: str, inputs: Sequence[Path], outputs: Iterable[Path],
                   extra: Optional[Dict[str, Any]] = None) -> Path:
    stage_dir = ctx.stage_dir(stage)
    manifest = {
        'stage': stage,
        'config_hash': ctx.config_hash,
        'seed': ctx.config.seed,
        'inputs': {str(p.relative_to(ctx.out_dir)): sha256_file(p) for p in inputs},
        'outputs': {str(p.relative_to(stage_dir)): sha256_file(p) for p in sorted(outputs)},
        'created_by': f"{ctx.command} {stage}",
    }
    if extra:
        manifest.update(extra)
    path = stage_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n')
    return path


def read_manifest(path: Path) -> Dict[str, Any]:
    return json.loads(path.read_text())


def prepare_stage(ctx: StageContext, stage: str) -> Path:
    """
    Empty the stage directory for a fresh run.

    Output written under a different config hash is only replaced with --force.
    """
    stage_dir = ctx.stage_dir(stage)
    manifest = stage_dir / MANIFEST
    if manifest.exists():
        previous = read_manifest(manifest).get('config_hash')
        if previous != ctx.config_hash:
            logger.warning("%s was produced with config %s, current config is %s",
                           stage_dir, str(previous)[:12], ctx.config_hash[:12])
            if not ctx.force:
                raise PipelineError(f"{stage}: existing output has a different config hash; rerun with --force")
    if stage_dir.exists():
        logger.debug("clearing previous output in %s", stage_dir)
        shutil.rmtree(stage_dir)
    stage_dir.mkdir(parents=True)
    return stage_dir


def require_stage(ctx: StageContext, stage: str, producer: str) -> Path:
    manifest = ctx.stage_dir(stage) / MANIFEST
    if not manifest.exists():
        raise PipelineError(f"missing upstream artifact {manifest}; run `{ctx.command} {producer}` first")
    recorded = read_manifest(manifest).get('config_hash')
    if recorded != ctx.config_hash:
        if not ctx.force:
            raise PipelineError(f"upstream artifact {manifest} has a different config hash; rerun with --force "
                                f"or run `{ctx.command} {producer}` first")
        logger.warning("using %s produced with config %s (current %s)",
                       manifest, str(recorded)[:12], ctx.config_hash[:12])
    return manifest


def manifest_outputs(manifest: Path, prefix: str = '', suffix: str = '') -> List[str]:
    """Stems of the outputs a manifest lists under `prefix` with the given suffix."""
    stems = []
    for rel in read_manifest(manifest)['outputs']:
        path = Path(rel)
        if str(path.parent) == (prefix or '.') and path.suffix == suffix:
            stems.append(path.stem)
    return sorted(stems)


def _files_under(directory: Path) -> List[Path]:
    return sorted(p for p in directory.rglob('*') if p.is_file() and p.name != MANIFEST)


def stage_command(name: str):
    """Wrap a stage body so failures come back as a result dictionary."""

    def decorate(body: Callable[..., Dict[str, Any]]):
        @functools.wraps(body)
        def run(ctx: StageContext, *args, **kwargs) -> Dict[str, Any]:
            logger.info("Running stage %s (config %s, seed %d)", name, ctx.config_hash[:12], ctx.config.seed)
            try:
                result = body(ctx, *args, **kwargs)
            except (ValueError, OSError, KeyError) as e:
                logger.debug("stage %s failed", name, exc_info=True)
                return {
                    'success': False,
                    'error': str(e),
                    'explanation': f"Stage {name} failed: {e}"
                }
            logger.info(result['explanation'])
            return result
        return run

    return decorate


# Dataset access

@dataclass
class Dataset:
    annotations: Dict[str, RecistAnnotation]
    image_root: Path
    gt_dir: Optional[Path]
    upstream: List[Path]
    archetypes: Optional[Dict[str, str]] = None

    @property
    def ids(self) -> List[str]:
        return sorted(self.annotations)

    def raw_image(self, lesion_id: str) -> ImageGrid:
        return load_image_png(self.image_root / self.annotations[lesion_id].image_path)

    def image(self, lesion_id: str) -> ImageGrid:
        """Min-max normalized image at its original resolution."""
        return normalize(self.raw_image(lesion_id))

    def network_image(self, lesion_id: str, size: int) -> ImageGrid:
        return preprocess_image(self.raw_image(lesion_id), size)

    def gt_mask(self, lesion_id: str) -> BinaryMask:
        if self.gt_dir is None:
            raise PipelineError("no ground-truth mask directory configured (paths.gt_masks)")
        return load_mask_png(self.gt_dir / f"{lesion_id}.png")


def load_dataset(ctx: StageContext) -> Dataset:
    paths = ctx.config.paths
    tolerance = ctx.config.preprocessing.crossing_tolerance
    if paths.annotations:
        annotations_path = Path(paths.annotations)
        image_root = Path(paths.images) if paths.images else annotations_path.parent
        gt_dir = Path(paths.gt_masks) if paths.gt_masks else None
        upstream: List[Path] = []
        archetypes = None
    else:
        manifest = require_stage(ctx, 'phantoms', 'phantom')
        root = ctx.stage_dir('phantoms')
        annotations_path, image_root, gt_dir = root / 'annotations.csv', root, root / 'gt_masks'
        upstream = [manifest]
        archetypes = load_archetype_labels(root / 'archetypes.csv')
    parsed = RecistParser(tolerance).parse_file(annotations_path)
    if not parsed['success']:
        raise PipelineError(parsed['error'])
    annotations = {a.image_id: a for a in parsed['annotations']}
    return Dataset(annotations, image_root, gt_dir, upstream, archetypes)


def _evaluation_ids(ctx: StageContext, dataset: Dataset) -> Tuple[List[str], List[Path]]:
    split_name = ctx.config.evaluation.split
    if split_name == 'all':
        return dataset.ids, []
    manifest = require_stage(ctx, 'split', 'split')
    split = load_split(ctx.stage_dir('split') / 'split.csv')
    return sorted(split.subset(split_name)), [manifest]


# Stages

@stage_command('phantom')
def cmd_phantom(ctx: StageContext) -> Dict[str, Any]:
    stage_dir = prepare_stage(ctx, 'phantoms')
    result = PhantomGenerator(ctx.config.phantom.spec(ctx.config.seed)).generate(stage_dir, ctx.progress)
    if not result['success']:
        raise PipelineError(result['error'])
    manifest = write_manifest(ctx, 'phantoms', [], _files_under(stage_dir))
    return {'success': True, 'outputs': {'dir': stage_dir, 'manifest': manifest},
            'explanation': result['explanation']}


@stage_command('gen-masks')
def cmd_gen_masks(ctx: StageContext) -> Dict[str, Any]:
    dataset = load_dataset(ctx)
    stage_dir = prepare_stage(ctx, 'masks')
    generator = InitialMaskGenerator(ctx.config.grabcut)
    rng = ctx.rng.spawn('grabcut')
    energies, failures, dices = [], [], []
    for lesion_id in tqdm(dataset.ids, desc='grabcut', disable=not ctx.progress):
        result = generator.generate(dataset.image(lesion_id), dataset.annotations[lesion_id], rng.spawn(lesion_id))
        if not result['success']:
            failures.append(result['error'])
            continue
        save_mask_png(result['mask'], stage_dir / f"{lesion_id}.png")
        energies.extend((lesion_id, i + 1, e) for i, e in enumerate(result['energies']))
        if dataset.gt_dir is not None:
            dices.append(dice(confusion(result['mask'], dataset.gt_mask(lesion_id))))
    if failures:
        raise PipelineError(f"GrabCut failed for {len(failures)} lesion(s): {failures[:5]}")
    pd.DataFrame(energies, columns=['lesion_id', 'iteration', 'energy']).to_csv(
        stage_dir / 'grabcut_energy.csv', index=False, float_format='%.6f')
    extra = {'mean_dice_vs_gt': float(np.mean(dices))} if dices else None
    manifest = write_manifest(ctx, 'masks', dataset.upstream, _files_under(stage_dir), extra)
    explanation = f"GrabCut produced {len(dataset.ids)} initial masks."
    if dices:
        explanation += f" Mean Dice against ground truth {np.mean(dices):.3f}."
    return {'success': True, 'outputs': {'dir': stage_dir, 'manifest': manifest}, 'explanation': explanation}


def _features(ctx: StageContext, dataset: Dataset):
    section = ctx.config.clustering
    if section.feature_mode == 'precomputed':
        features = load_feature_csv(section.feature_csv)
        missing = sorted(set(dataset.ids) - {f.lesion_id for f in features})
        if missing:
            raise PipelineError(f"precomputed features missing for lesion(s): {missing[:10]}")
        return [f for f in features if f.lesion_id in dataset.annotations]
    return [extract_feature(dataset.image(lid), dataset.annotations[lid])
            for lid in tqdm(dataset.ids, desc='features', disable=not ctx.progress)]


@stage_command('cluster')
def cmd_cluster(ctx: StageContext) -> Dict[str, Any]:
    dataset = load_dataset(ctx)
    stage_dir = prepare_stage(ctx, 'clusters')
    section = ctx.config.clustering
    features = _features(ctx, dataset)
    result = LesionClusterer(section.k, section.iterations, section.standardize).cluster(
        features, ctx.rng.spawn('kmeans'), dataset.archetypes)
    if not result['success']:
        raise PipelineError(result['error'])
    model = result['model']
    save_features(features, stage_dir / 'features.csv')
    save_centroids(model, stage_dir / 'centroids.csv')
    save_assignments(model, stage_dir / 'assignments.csv')
    pd.DataFrame({'iteration': range(len(model.inertia_history)), 'inertia': model.inertia_history}).to_csv(
        stage_dir / 'inertia.csv', index=False, float_format='%.8f')
    extra = {'agreement': result['agreement']} if result['agreement'] is not None else None
    manifest = write_manifest(ctx, 'clusters', dataset.upstream, _files_under(stage_dir), extra)
    return {'success': True, 'outputs': {'dir': stage_dir, 'manifest': manifest, 'agreement': result['agreement']},
            'explanation': result['explanation']}


def _cluster_model(ctx: StageContext) -> Tuple[ClusterModel, Path]:
    manifest = require_stage(ctx, 'clusters', 'cluster')
    root = ctx.stage_dir('clusters')
    return load_cluster_model(root / 'assignments.csv', root / 'centroids.csv'), manifest


@stage_command('split')
def cmd_split(ctx: StageContext) -> Dict[str, Any]:
    model, upstream = _cluster_model(ctx)
    stage_dir = prepare_stage(ctx, 'split')
    split = stratified_split(model, ctx.config.clustering.split_ratios, ctx.rng.spawn('split'))
    save_split(split, stage_dir / 'split.csv')
    manifest = write_manifest(ctx, 'split', [upstream], _files_under(stage_dir))
    sizes = {name: len(split.subset(name)) for name in SPLIT_NAMES}
    return {'success': True, 'outputs': {'dir': stage_dir, 'manifest': manifest, 'sizes': sizes},
            'explanation': f"Stratified split: {sizes['train']} train / {sizes['val']} val / {sizes['test']} test."}


def build_pair_sets(ctx: StageContext, split: DatasetSplit, model: ClusterModel, pairing: str) -> Dict[str, PairSet]:
    section = ctx.config.clustering
    clustered = make_pairs(split, model, section.cap_per_cluster, ctx.rng.spawn('pairs'))
    if pairing == 'cluster':
        return clustered
    counts = {name: len(pairs) for name, pairs in clustered.items()}
    return make_random_pairs(split, counts, ctx.rng.spawn('random-pairs'))


@stage_command('pair')
def cmd_pair(ctx: StageContext) -> Dict[str, Any]:
    model, cluster_manifest = _cluster_model(ctx)
    split_manifest = require_stage(ctx, 'split', 'split')
    split = load_split(ctx.stage_dir('split') / 'split.csv')
    stage_dir = prepare_stage(ctx, 'pairs')
    pair_sets = build_pair_sets(ctx, split, model, ctx.config.clustering.pairing)
    save_pairs(pair_sets, stage_dir / 'pairs.csv')
    manifest = write_manifest(ctx, 'pairs', [cluster_manifest, split_manifest], _files_under(stage_dir))
    counts = {name: len(p) for name, p in pair_sets.items()}
    return {'success': True, 'outputs': {'dir': stage_dir, 'manifest': manifest, 'counts': counts},
            'explanation': (f"{ctx.config.clustering.pairing} pairing: {counts['train']} train, "
                            f"{counts['val']} val, {counts['test']} test pairs.")}


def _training_arrays(ctx: StageContext, dataset: Dataset, ids: Iterable[str]) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    size = ctx.config.preprocessing.target_size
    masks_dir = ctx.stage_dir('masks')
    images, masks = {}, {}
    for lesion_id in sorted(set(ids)):
        images[lesion_id] = dataset.network_image(lesion_id, size).data
        masks[lesion_id] = preprocess_mask(load_mask_png(masks_dir / f"{lesion_id}.png"), size).labels
    return images, masks


def _pair_members(pair_sets: Iterable[PairSet]) -> List[str]:
    return sorted({lid for ps in pair_sets for a, b, _ in ps.pairs for lid in (a, b)})


def network_metadata(config: NetworkConfig) -> Dict[str, Any]:
    return {
        'encoder': config.encoder,
        'widths': list(config.widths),
        'output_stride': config.output_stride,
        'attention': AttentionKind(config.attention).value,
        'single_branch': config.single_branch,
    }


def network_from_metadata(meta: Dict[str, Any]) -> NetworkConfig:
    return NetworkConfig(meta['encoder'], tuple(meta['widths']), meta['output_stride'],
                         AttentionKind(meta['attention']), bool(meta['single_branch']))


@stage_command('train')
def cmd_train(ctx: StageContext) -> Dict[str, Any]:
    dataset = load_dataset(ctx)
    masks_manifest = require_stage(ctx, 'masks', 'gen-masks')
    pairs_manifest = require_stage(ctx, 'pairs', 'pair')
    pair_sets = load_pairs(ctx.stage_dir('pairs') / 'pairs.csv')
    stage_dir = prepare_stage(ctx, 'model')
    network_config = ctx.config.training.network_config()
    images, masks = _training_arrays(ctx, dataset, _pair_members([pair_sets['train'], pair_sets['val']]))
    result = train(CosegNetwork(network_config), pair_sets['train'], images, masks,
                   ctx.config.training.train_config(), ctx.rng.spawn('train'),
                   val_pairs=pair_sets['val'], progress=ctx.progress)
    save_checkpoint(result.params, stage_dir / 'checkpoint.bin')
    save_loss_curve(result.curve, stage_dir / 'loss_curve.csv', stage_dir / 'loss_curve.png')
    extra = {'network': network_metadata(network_config), 'best_iteration': result.best_iteration,
             'best_val_dice': result.best_val_dice}
    manifest = write_manifest(ctx, 'model', dataset.upstream + [masks_manifest, pairs_manifest],
                              _files_under(stage_dir), extra)
    first = result.curve[0].train_loss if result.curve else float('nan')
    last = result.curve[-1].train_loss if result.curve else float('nan')
    return {'success': True, 'outputs': {'dir': stage_dir, 'manifest': manifest},
            'explanation': (f"Trained {len(result.curve)} iterations on {len(pair_sets['train'])} pairs: "
                            f"loss {first:.4f} → {last:.4f}, kept iteration {result.best_iteration}.")}


def inference_partners(targets: Sequence[str], candidates: Sequence[str], assignments: Dict[str, int],
                       vectors: Dict[str, np.ndarray]) -> Dict[str, str]:
    """
    Pair each target lesion with the nearest candidate of its own cluster in feature space.

    Ties go to the smaller id; targets whose cluster has no candidate fall back to the
    nearest candidate overall.
    """
    pool = sorted(candidates)
    if not pool:
        raise PipelineError("no training lesions available as inference partners")
    partners = {}
    for target in targets:
        same = [c for c in pool if c != target and assignments.get(c) == assignments.get(target)]
        choices = same or [c for c in pool if c != target] or pool
        dist = cdist(vectors[target][None, :], np.vstack([vectors[c] for c in choices]))[0]
        partners[target] = choices[int(np.argmin(dist))]
    return partners


def predict_probabilities(network: CosegNetwork, params: ParamStore, images: Dict[str, np.ndarray],
                          targets: Sequence[str], partners: Dict[str, str], batch_size: int = 8,
                          progress: bool = False) -> Dict[str, np.ndarray]:
    """Foreground probability map of every target, read from its own branch."""
    probs = {}
    for start in tqdm(range(0, len(targets), batch_size), desc='infer', disable=not progress):
        chunk = list(targets[start:start + batch_size])
        x = stack_images([images[t] for t in chunk])
        if network.config.single_branch:
            out, _ = infer(network, params, x)
        else:
            out, _ = infer(network, params, x, stack_images([images[partners[t]] for t in chunk]))
        probs.update(zip(chunk, out))
    return probs


def _partner_features(ctx: StageContext) -> Dict[str, np.ndarray]:
    features = load_feature_csv(ctx.stage_dir('clusters') / 'features.csv')
    if ctx.config.clustering.standardize:
        features = standardize_features(features)
    return {f.lesion_id: f.vector for f in features}


def _load_model(ctx: StageContext) -> Tuple[CosegNetwork, ParamStore, Path]:
    manifest = require_stage(ctx, 'model', 'train')
    meta = read_manifest(manifest)
    network = CosegNetwork(network_from_metadata(meta['network']))
    params = load_checkpoint(ctx.stage_dir('model') / 'checkpoint.bin')
    expected = set(network.parameter_specs())
    if set(params.names()) != expected:
        raise PipelineError("checkpoint parameters do not match the recorded network architecture")
    return network, params, manifest


@stage_command('infer')
def cmd_infer(ctx: StageContext) -> Dict[str, Any]:
    dataset = load_dataset(ctx)
    network, params, model_manifest = _load_model(ctx)
    model, cluster_manifest = _cluster_model(ctx)
    split_manifest = require_stage(ctx, 'split', 'split')
    split = load_split(ctx.stage_dir('split') / 'split.csv')
    targets, _ = _evaluation_ids(ctx, dataset)
    stage_dir = prepare_stage(ctx, 'predictions')
    (stage_dir / 'prob').mkdir(exist_ok=True)
    (stage_dir / 'masks').mkdir(exist_ok=True)

    partners = inference_partners(targets, sorted(split.train), model.assignments, _partner_features(ctx))
    size = ctx.config.preprocessing.target_size
    needed = set(targets) | set(partners.values())
    images = {lid: dataset.network_image(lid, size).data for lid in sorted(needed)}
    probs = predict_probabilities(network, params, images, targets, partners, progress=ctx.progress)
    for lesion_id in targets:
        np.save(stage_dir / 'prob' / f"{lesion_id}.npy", probs[lesion_id])
        raw = dataset.raw_image(lesion_id)
        mask = restore_mask(BinaryMask(probs[lesion_id] > 0.5), raw.width, raw.height)
        save_mask_png(mask, stage_dir / 'masks' / f"{lesion_id}.png")
    pd.DataFrame({'lesion_id': targets, 'partner': [partners[t] for t in targets]}).to_csv(
        stage_dir / 'partners.csv', index=False)
    manifest = write_manifest(ctx, 'predictions', dataset.upstream + [model_manifest, cluster_manifest, split_manifest],
                              _files_under(stage_dir))
    return {'success': True, 'outputs': {'dir': stage_dir, 'manifest': manifest},
            'explanation': f"Predicted {len(targets)} lesions ({ctx.config.evaluation.split} split)."}


@stage_command('refine')
def cmd_refine(ctx: StageContext) -> Dict[str, Any]:
    dataset = load_dataset(ctx)
    upstream = require_stage(ctx, 'predictions', 'infer')
    prob_dir = ctx.stage_dir('predictions') / 'prob'
    stage_dir = prepare_stage(ctx, 'refined')
    refiner = DenseCrfRefiner(ctx.config.crf.params(), ctx.config.crf.max_pixels)
    size = ctx.config.preprocessing.target_size
    lesion_ids = manifest_outputs(upstream, 'prob', '.npy')
    changed = 0
    for lesion_id in tqdm(lesion_ids, desc='dcrf', disable=not ctx.progress):
        prob = np.load(prob_dir / f"{lesion_id}.npy")
        result = refiner.refine(dataset.network_image(lesion_id, size), prob)
        if not result['success']:
            raise PipelineError(f"{lesion_id}: {result['error']}")
        raw = dataset.raw_image(lesion_id)
        save_mask_png(restore_mask(result['mask'], raw.width, raw.height), stage_dir / f"{lesion_id}.png")
        changed += int(np.count_nonzero(result['mask'].as_bool() != (prob > 0.5)))
    manifest = write_manifest(ctx, 'refined', dataset.upstream + [upstream], _files_under(stage_dir))
    return {'success': True, 'outputs': {'dir': stage_dir, 'manifest': manifest},
            'explanation': f"Refined {len(lesion_ids)} probability maps; {changed} pixels changed label."}


def _masks_from(directory: Path, ids: Iterable[str]) -> Dict[str, BinaryMask]:
    missing = [lid for lid in ids if not (directory / f"{lid}.png").exists()]
    if missing:
        raise PipelineError(f"no mask in {directory} for lesion(s): {missing[:10]}")
    return {lid: load_mask_png(directory / f"{lid}.png") for lid in ids}


@stage_command('evaluate')
def cmd_evaluate(ctx: StageContext, source: str = 'refined') -> Dict[str, Any]:
    if source not in EVALUATION_SOURCES:
        raise PipelineError(f"Unsupported evaluation source: {source}. Supported: {list(EVALUATION_SOURCES)}")
    dataset = load_dataset(ctx)
    source_stage = EVALUATION_SOURCES[source].split('/')[0]
    producer = {'masks': 'gen-masks', 'predictions': 'infer', 'refined': 'refine'}[source]
    source_manifest = require_stage(ctx, source_stage, producer)
    ids, split_inputs = _evaluation_ids(ctx, dataset)
    predictions = _masks_from(ctx.out_dir / EVALUATION_SOURCES[source], ids)
    references = {lid: dataset.gt_mask(lid) for lid in ids}
    stage_dir = prepare_stage(ctx, 'evaluation')
    result = SegmentationEvaluator(ctx.config.evaluation.avd_mode).evaluate(predictions, references)
    if not result['success']:
        raise PipelineError(result['error'])
    report = result['report']
    save_report(report, stage_dir / 'per_case.csv', stage_dir / 'aggregate.json')
    table = format_table({source: report})
    (stage_dir / 'table.txt').write_text(table)
    manifest = write_manifest(ctx, 'evaluation', dataset.upstream + [source_manifest] + split_inputs,
                              _files_under(stage_dir), {'source': source})
    return {'success': True, 'outputs': {'dir': stage_dir, 'manifest': manifest, 'report': report, 'table': table},
            'explanation': f"Evaluated {source}: {result['explanation']}"}


@stage_command('overlay')
def cmd_overlay(ctx: StageContext, source: str = 'refined') -> Dict[str, Any]:
    if source not in EVALUATION_SOURCES:
        raise PipelineError(f"Unsupported overlay source: {source}. Supported: {list(EVALUATION_SOURCES)}")
    dataset = load_dataset(ctx)
    source_stage = EVALUATION_SOURCES[source].split('/')[0]
    producer = {'masks': 'gen-masks', 'predictions': 'infer', 'refined': 'refine'}[source]
    source_manifest = require_stage(ctx, source_stage, producer)
    source_dir = ctx.out_dir / EVALUATION_SOURCES[source]
    ids = manifest_outputs(source_manifest, EVALUATION_SOURCES[source].partition('/')[2], '.png')
    unknown = [lid for lid in ids if lid not in dataset.annotations]
    if unknown:
        raise PipelineError(f"masks without a matching lesion: {unknown[:10]}")
    stage_dir = prepare_stage(ctx, 'overlays')
    images = {lid: dataset.image(lid) for lid in ids}
    gts = {lid: dataset.gt_mask(lid) for lid in ids}
    preds = _masks_from(source_dir, ids)
    result = OverlayVisualizer().render(images, gts, preds, stage_dir)
    if not result['success']:
        raise PipelineError(result['error'])
    manifest = write_manifest(ctx, 'overlays', dataset.upstream + [source_manifest], _files_under(stage_dir),
                              {'source': source})
    return {'success': True, 'outputs': {'dir': stage_dir, 'manifest': manifest},
            'explanation': result['explanation']}


# Strategy comparison

STRATEGY_SETTINGS = {
    'single-branch': ('cluster', AttentionKind.NONE, True),
    'no-clustering': ('random', AttentionKind.CHANNEL, False),
    'channel': ('cluster', AttentionKind.CHANNEL, False),
    'channel_spatial': ('cluster', AttentionKind.CHANNEL_SPATIAL, False),
}


def _evaluate_probabilities(ctx: StageContext, dataset: Dataset, probs: Dict[str, np.ndarray],
                            refiner: Optional[DenseCrfRefiner]) -> EvalReport:
    size = ctx.config.preprocessing.target_size
    predictions, references = {}, {}
    for lesion_id, prob in probs.items():
        raw = dataset.raw_image(lesion_id)
        if refiner is None:
            mask = BinaryMask(prob > 0.5)
        else:
            refined = refiner.refine(dataset.network_image(lesion_id, size), prob)
            if not refined['success']:
                raise PipelineError(f"{lesion_id}: {refined['error']}")
            mask = refined['mask']
        predictions[lesion_id] = restore_mask(mask, raw.width, raw.height)
        references[lesion_id] = dataset.gt_mask(lesion_id)
    result = SegmentationEvaluator(ctx.config.evaluation.avd_mode).evaluate(predictions, references)
    if not result['success']:
        raise PipelineError(result['error'])
    return result['report']


@stage_command('experiment')
def cmd_experiment(ctx: StageContext) -> Dict[str, Any]:
    """Train and score every configured encoder × strategy on the same masks and test split."""
    dataset = load_dataset(ctx)
    masks_manifest = require_stage(ctx, 'masks', 'gen-masks')
    model, cluster_manifest = _cluster_model(ctx)
    split_manifest = require_stage(ctx, 'split', 'split')
    split = load_split(ctx.stage_dir('split') / 'split.csv')
    stage_dir = prepare_stage(ctx, 'experiment')
    section = ctx.config.experiment
    targets, _ = _evaluation_ids(ctx, dataset)

    pair_sets = {mode: build_pair_sets(ctx, split, model, mode)
                 for mode in sorted({STRATEGY_SETTINGS[s][0] for s in section.strategies})}
    members = _pair_members([ps for sets in pair_sets.values() for ps in (sets['train'], sets['val'])])
    images, masks = _training_arrays(ctx, dataset, members)
    partners = inference_partners(targets, sorted(split.train), model.assignments, _partner_features(ctx))
    size = ctx.config.preprocessing.target_size
    for lid in sorted(set(targets) | set(partners.values())):
        if lid not in images:
            images[lid] = dataset.network_image(lid, size).data
    refiner = DenseCrfRefiner(ctx.config.crf.params(), ctx.config.crf.max_pixels) if section.with_crf else None

    rows, reports = [], {}
    for encoder in section.encoders:
        for strategy in section.strategies:
            pairing, attention, single = STRATEGY_SETTINGS[strategy]
            network = CosegNetwork(ctx.config.training.network_config(attention.value, single, encoder))
            result = train(network, pair_sets[pairing]['train'], images, masks,
                           ctx.config.training.train_config(), ctx.rng.spawn(f"experiment-{encoder}"),
                           val_pairs=pair_sets[pairing]['val'], progress=ctx.progress)
            probs = predict_probabilities(network, result.params, images, targets, partners)
            variants = [('', None)] + ([(' + DCRF', refiner)] if refiner is not None else [])
            for suffix, crf in variants:
                name = f"{encoder} {strategy}{suffix}"
                report = _evaluate_probabilities(ctx, dataset, probs, crf)
                reports[name] = report
                row = {'encoder': encoder, 'strategy': strategy, 'dcrf': crf is not None,
                       'best_iteration': result.best_iteration}
                for metric in METRIC_NAMES:
                    row[f"{metric}_mean"] = report.mean[metric]
                    row[f"{metric}_std"] = report.std[metric]
                rows.append(row)
                logger.info("%s: Dice %.3f", name, report.mean['dice'])

    pd.DataFrame(rows).to_csv(stage_dir / 'experiment.csv', index=False, float_format='%.6f')
    table = format_table(reports)
    (stage_dir / 'table.txt').write_text(table)
    manifest = write_manifest(ctx, 'experiment', dataset.upstream + [masks_manifest, cluster_manifest, split_manifest],
                              _files_under(stage_dir))
    return {'success': True, 'outputs': {'dir': stage_dir, 'manifest': manifest, 'reports': reports, 'table': table},
            'explanation': f"Compared {len(reports)} configurations on {len(targets)} test lesions."}


def cmd_run_all(ctx: StageContext) -> Dict[str, Any]:
    """Run every stage in order, generating phantoms first when no annotation file is configured."""
    steps: List[Tuple[str, Callable[[StageContext], Dict[str, Any]]]] = []
    if not ctx.config.paths.annotations:
        steps.append(('phantom', cmd_phantom))
    steps += [
        ('gen-masks', cmd_gen_masks), ('cluster', cmd_cluster), ('split', cmd_split), ('pair', cmd_pair),
        ('train', cmd_train), ('infer', cmd_infer), ('refine', cmd_refine),
        ('evaluate', cmd_evaluate), ('overlay', cmd_overlay),
    ]
    outputs = {}
    for name, command in steps:
        result = command(ctx)
        if not result['success']:
            return {'success': False, 'error': f"{name}: {result['error']}",
                    'explanation': f"Pipeline stopped at stage {name}."}
        outputs[name] = result.get('outputs', {})
    table = outputs['evaluate'].get('table', '')
    return {'success': True, 'outputs': outputs, 'table': table,
            'explanation': f"Ran {len(steps)} stages into {ctx.out_dir}."}
