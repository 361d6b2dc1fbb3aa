import json
import shutil

import numpy as np
import pandas as pd
import pytest

from modules.coseg_network import AttentionKind, NetworkConfig
from modules.image_grid import load_mask_png, save_mask_png
from modules.pipeline_config import config_from_dict
from modules.pipeline_stages import (
    MANIFEST, PipelineError, StageContext, cmd_cluster, cmd_evaluate, cmd_experiment, cmd_gen_masks, cmd_infer,
    cmd_pair, cmd_phantom, cmd_refine, cmd_run_all, cmd_split, inference_partners, manifest_outputs,
    network_from_metadata, network_metadata, prepare_stage, read_manifest, require_stage, sha256_file,
)


def _copy_run(pipeline_run, tmp_path, small_document, force=False):
    """Duplicate a finished run under a new output directory (and therefore a new config hash)."""
    ctx, _ = pipeline_run
    target = tmp_path / 'copy'
    shutil.copytree(ctx.out_dir, target)
    return StageContext(config_from_dict(small_document(target)), force=force, progress=False)


class TestManifests:
    def test_every_stage_writes_a_manifest(self, pipeline_run):
        ctx, _ = pipeline_run
        for stage in ('phantoms', 'masks', 'clusters', 'split', 'pairs', 'model', 'predictions', 'refined',
                      'evaluation', 'overlays'):
            manifest = read_manifest(ctx.stage_dir(stage) / MANIFEST)
            assert manifest['stage'] == stage
            assert manifest['config_hash'] == ctx.config_hash
            assert manifest['seed'] == 5

    def test_phantom_manifest_lists_outputs(self, pipeline_run):
        ctx, _ = pipeline_run
        manifest = read_manifest(ctx.stage_dir('phantoms') / MANIFEST)
        assert manifest['created_by'] == 'coseg.py phantom'
        assert manifest['inputs'] == {}
        assert manifest['outputs']['annotations.csv'] == sha256_file(ctx.stage_dir('phantoms') / 'annotations.csv')
        assert 'images/L00000.png' in manifest['outputs']

    def test_upstream_manifests_are_hashed(self, pipeline_run):
        ctx, _ = pipeline_run
        masks = read_manifest(ctx.stage_dir('masks') / MANIFEST)
        assert masks['inputs'] == {'phantoms/manifest.json': sha256_file(ctx.stage_dir('phantoms') / MANIFEST)}
        pairs = read_manifest(ctx.stage_dir('pairs') / MANIFEST)
        assert set(pairs['inputs']) == {'clusters/manifest.json', 'split/manifest.json'}

    def test_model_manifest_records_network(self, pipeline_run):
        ctx, _ = pipeline_run
        manifest = read_manifest(ctx.stage_dir('model') / MANIFEST)
        assert manifest['network']['encoder'] == 'drn-s'
        assert manifest['network']['widths'] == [2, 3, 3, 4]
        assert manifest['best_iteration'] in (2, 4)


class TestStageOutputs:
    def test_grabcut_masks(self, pipeline_run):
        ctx, results = pipeline_run
        masks = sorted(p.name for p in ctx.stage_dir('masks').glob('*.png'))
        assert len(masks) == 16
        energy = pd.read_csv(ctx.stage_dir('masks') / 'grabcut_energy.csv')
        assert list(energy.columns) == ['lesion_id', 'iteration', 'energy']
        assert set(energy['iteration']) == {1, 2, 3}
        for _, group in energy.groupby('lesion_id'):
            assert np.all(np.diff(group['energy'].to_numpy()) <= 1e-6 * np.abs(group['energy']).max())
        assert read_manifest(ctx.stage_dir('masks') / MANIFEST)['mean_dice_vs_gt'] > 0.7

    def test_split_and_pairs(self, pipeline_run):
        ctx, results = pipeline_run
        assert results['split']['outputs']['sizes'] == {'train': 8, 'val': 4, 'test': 4}
        assert results['pair']['outputs']['counts'] == {'train': 28, 'val': 6, 'test': 6}
        split = pd.read_csv(ctx.stage_dir('split') / 'split.csv', dtype={'lesion_id': str})
        assert split['lesion_id'].is_unique and len(split) == 16

    def test_training_outputs(self, pipeline_run):
        ctx, _ = pipeline_run
        curve = pd.read_csv(ctx.stage_dir('model') / 'loss_curve.csv')
        assert curve['iteration'].tolist() == [1, 2, 3, 4]
        assert curve['val_dice'].notna().tolist() == [False, True, False, True]
        assert (ctx.stage_dir('model') / 'checkpoint.bin').stat().st_size > 0
        assert (ctx.stage_dir('model') / 'loss_curve.png').exists()

    def test_predictions_cover_test_split(self, pipeline_run):
        ctx, _ = pipeline_run
        split = pd.read_csv(ctx.stage_dir('split') / 'split.csv', dtype={'lesion_id': str})
        test_ids = sorted(split.loc[split['split'] == 'test', 'lesion_id'])
        probs = sorted(p.stem for p in (ctx.stage_dir('predictions') / 'prob').glob('*.npy'))
        assert probs == test_ids
        prob = np.load(ctx.stage_dir('predictions') / 'prob' / f"{test_ids[0]}.npy")
        assert prob.shape == (32, 32) and np.all((prob >= 0) & (prob <= 1))
        # masks come back at the phantom resolution
        assert load_mask_png(ctx.stage_dir('predictions') / 'masks' / f"{test_ids[0]}.png").labels.shape == (48, 48)
        assert load_mask_png(ctx.stage_dir('refined') / f"{test_ids[0]}.png").labels.shape == (48, 48)
        partners = pd.read_csv(ctx.stage_dir('predictions') / 'partners.csv', dtype=str)
        train_ids = set(split.loc[split['split'] == 'train', 'lesion_id'])
        assert set(partners['partner']) <= train_ids

    def test_evaluation_report(self, pipeline_run):
        ctx, results = pipeline_run
        report = results['evaluate']['outputs']['report']
        assert len(report.cases) == 4
        per_case = pd.read_csv(ctx.stage_dir('evaluation') / 'per_case.csv')
        assert list(per_case.columns) == ['case_id', 'recall', 'precision', 'dice', 'avd', 'vs']
        summary = json.loads((ctx.stage_dir('evaluation') / 'aggregate.json').read_text())
        assert summary['cases'] == 4
        assert (ctx.stage_dir('evaluation') / 'table.txt').read_text().splitlines()[2].startswith('refined')

    def test_overlays(self, pipeline_run):
        ctx, _ = pipeline_run
        names = sorted(p.name for p in ctx.stage_dir('overlays').glob('*.png'))
        assert 'figure.png' in names and len(names) == 5


class TestStageErrors:
    def test_missing_upstream(self, tmp_path, small_document):
        ctx = StageContext(config_from_dict(small_document(tmp_path / 'empty')), progress=False)
        result = cmd_gen_masks(ctx)
        assert not result['success']
        assert 'missing upstream artifact' in result['error']
        assert '`coseg.py phantom`' in result['error']

    def test_cluster_needs_phantoms(self, tmp_path, small_document):
        result = cmd_cluster(StageContext(config_from_dict(small_document(tmp_path)), progress=False))
        assert not result['success'] and 'phantoms' in result['error']

    def test_config_hash_mismatch_needs_force(self, pipeline_run, tmp_path, small_document):
        ctx = _copy_run(pipeline_run, tmp_path, small_document)
        result = cmd_split(ctx)
        assert not result['success']
        assert 'different config hash; rerun with --force' in result['error']
        forced = StageContext(ctx.config, force=True, progress=False)
        assert cmd_split(forced)['success']
        assert read_manifest(forced.stage_dir('split') / MANIFEST)['config_hash'] == forced.config_hash

    def test_prepare_stage_raises(self, pipeline_run, tmp_path, small_document):
        ctx = _copy_run(pipeline_run, tmp_path, small_document)
        with pytest.raises(PipelineError):
            prepare_stage(ctx, 'clusters')

    def test_require_stage_checks_config_hash(self, pipeline_run, tmp_path, small_document):
        ctx = _copy_run(pipeline_run, tmp_path, small_document)
        with pytest.raises(PipelineError, match='clusters/manifest.json has a different config hash'):
            require_stage(ctx, 'clusters', 'cluster')
        forced = StageContext(ctx.config, force=True, progress=False)
        assert require_stage(forced, 'clusters', 'cluster') == forced.stage_dir('clusters') / MANIFEST

    def test_stale_upstream_blocks_downstream_stage(self, pipeline_run, tmp_path, small_document):
        forced = _copy_run(pipeline_run, tmp_path, small_document, force=True)
        assert cmd_cluster(forced)['success']
        assert cmd_split(forced)['success']
        shutil.rmtree(forced.stage_dir('pairs'))

        document = small_document(forced.out_dir)
        document['clustering']['k'] = 2
        edited = StageContext(config_from_dict(document), progress=False)
        result = cmd_pair(edited)
        assert not result['success']
        assert 'upstream artifact' in result['error'] and 'different config hash' in result['error']
        assert not forced.stage_dir('pairs').exists()

        # the config that produced clusters and split pairs them without --force
        plain = StageContext(forced.config, progress=False)
        assert cmd_pair(plain)['success']
        assert read_manifest(plain.stage_dir('pairs') / MANIFEST)['config_hash'] == plain.config_hash


class TestStageRerun:
    def test_prepare_stage_clears_previous_output(self, pipeline_run, tmp_path, small_document):
        ctx = _copy_run(pipeline_run, tmp_path, small_document, force=True)
        stale = ctx.stage_dir('overlays') / 'stale.png'
        stale.write_bytes(b'old')
        stage_dir = prepare_stage(ctx, 'overlays')
        assert stage_dir.is_dir()
        assert list(stage_dir.iterdir()) == []

    def test_narrower_rerun_drops_old_predictions(self, pipeline_run, tmp_path, small_document):
        ctx = _copy_run(pipeline_run, tmp_path, small_document, force=True)
        document = small_document(ctx.out_dir)
        document['evaluation'] = {'split': 'all'}
        every = StageContext(config_from_dict(document), force=True, progress=False)
        assert cmd_infer(every)['success'] and cmd_refine(every)['success']
        assert len(list(every.stage_dir('refined').glob('*.png'))) == 16

        assert cmd_infer(ctx)['success'] and cmd_refine(ctx)['success']
        split = pd.read_csv(ctx.stage_dir('split') / 'split.csv', dtype={'lesion_id': str})
        test_ids = sorted(split.loc[split['split'] == 'test', 'lesion_id'])
        assert sorted(p.stem for p in ctx.stage_dir('refined').glob('*.png')) == test_ids
        assert sorted(p.stem for p in (ctx.stage_dir('predictions') / 'prob').glob('*.npy')) == test_ids
        assert manifest_outputs(ctx.stage_dir('refined') / MANIFEST, suffix='.png') == test_ids
        assert manifest_outputs(ctx.stage_dir('predictions') / MANIFEST, 'prob', '.npy') == test_ids

        result = cmd_evaluate(ctx)
        assert result['success'] and len(result['outputs']['report'].cases) == 4

    def test_unknown_evaluation_source(self, pipeline_run):
        ctx, _ = pipeline_run
        result = cmd_evaluate(ctx, 'unknown')
        assert not result['success'] and 'Unsupported evaluation source' in result['error']


def test_perfect_predictions_score_one(pipeline_run, tmp_path, small_document):
    ctx = _copy_run(pipeline_run, tmp_path, small_document, force=True)
    for path in ctx.stage_dir('refined').glob('*.png'):
        save_mask_png(load_mask_png(ctx.stage_dir('phantoms') / 'gt_masks' / path.name), path)
    result = cmd_evaluate(ctx)
    assert result['success']
    report = result['outputs']['report']
    assert report.mean['dice'] == 1.0 and report.std['dice'] == 0.0
    assert report.mean['avd'] == 0.0 and report.mean['vs'] == 1.0


def test_grabcut_masks_can_be_evaluated(pipeline_run, tmp_path, small_document):
    ctx = _copy_run(pipeline_run, tmp_path, small_document, force=True)
    result = cmd_evaluate(ctx, 'masks')
    assert result['success']
    assert result['outputs']['report'].mean['dice'] > 0.7
    assert read_manifest(ctx.stage_dir('evaluation') / MANIFEST)['source'] == 'masks'


def test_experiment_compares_strategies(pipeline_run, tmp_path, small_document):
    ctx = _copy_run(pipeline_run, tmp_path, small_document, force=True)
    result = cmd_experiment(ctx)
    assert result['success'], result.get('error')
    frame = pd.read_csv(ctx.stage_dir('experiment') / 'experiment.csv')
    assert len(frame) == 8
    assert set(frame['strategy']) == {'single-branch', 'no-clustering', 'channel', 'channel_spatial'}
    assert frame['dcrf'].tolist().count(True) == 4
    assert 'drn-s channel_spatial + DCRF' in result['outputs']['table']


def test_inference_partners():
    vectors = {'t1': np.array([0.0, 0.0]), 't2': np.array([5.0, 5.0]),
               'a': np.array([1.0, 0.0]), 'b': np.array([0.0, 1.0]), 'c': np.array([4.0, 4.0])}
    assignments = {'t1': 0, 't2': 1, 'a': 0, 'b': 0, 'c': 0}
    partners = inference_partners(['t1', 't2'], ['c', 'b', 'a'], assignments, vectors)
    # equal distances go to the smaller id; t2's cluster has no candidate
    assert partners == {'t1': 'a', 't2': 'c'}
    with pytest.raises(PipelineError, match='no training lesions'):
        inference_partners(['t1'], [], assignments, vectors)


def test_network_metadata_round_trip():
    config = NetworkConfig('resnet-s', (2, 3, 3, 4), 32, AttentionKind.CHANNEL_SPATIAL, False)
    meta = network_metadata(config)
    assert json.loads(json.dumps(meta)) == meta
    assert network_from_metadata(meta) == config


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob('*')) if p.is_file()}


@pytest.mark.slow
def test_run_all_is_reproducible(tmp_path, small_document):
    ctx = StageContext(config_from_dict(small_document(tmp_path / 'out')), progress=False)
    result = cmd_run_all(ctx)
    assert result['success'], result.get('error')
    first = tmp_path / 'first'
    shutil.copytree(ctx.out_dir, first)

    rerun = StageContext(config_from_dict(small_document(tmp_path / 'out')), progress=False)
    assert rerun.config_hash == ctx.config_hash
    result = cmd_run_all(rerun)
    assert result['success'], result.get('error')

    before, after = _tree_bytes(first), _tree_bytes(rerun.out_dir)
    assert sorted(before) == sorted(after)
    assert {'model/checkpoint.bin', 'evaluation/per_case.csv', 'overlays/figure.png'} <= set(before)
    assert [rel for rel in before if before[rel] != after[rel]] == []


@pytest.mark.slow
def test_strategy_trends_on_phantoms(tmp_path):
    document = {
        'seed': 11,
        'paths': {'out': str(tmp_path / 'trend')},
        'preprocessing': {'target_size': 64},
        'phantom': {'count': 200, 'image_size': 64},
        'clustering': {'k': 4},
        'training': {'widths': [4, 8, 8, 16], 'batch_size': 4, 'iterations_per_epoch': 1000,
                     'val_interval': 100, 'val_pair_limit': 16},
        'experiment': {'encoders': ['drn-s'], 'strategies': ['single-branch', 'no-clustering', 'channel'],
                       'with_crf': True},
    }
    ctx = StageContext(config_from_dict(document), progress=False)
    for command in (cmd_phantom, cmd_gen_masks, cmd_cluster, cmd_split):
        result = command(ctx)
        assert result['success'], result.get('error')
    assert read_manifest(ctx.stage_dir('masks') / MANIFEST)['mean_dice_vs_gt'] >= 0.85

    result = cmd_experiment(ctx)
    assert result['success'], result.get('error')
    dice = {name: report.mean['dice'] for name, report in result['outputs']['reports'].items()}
    assert dice['drn-s channel'] >= dice['drn-s single-branch'] + 0.01
    assert dice['drn-s channel'] >= dice['drn-s no-clustering'] + 0.01
    assert dice['drn-s channel + DCRF'] >= dice['drn-s channel'] - 0.005
