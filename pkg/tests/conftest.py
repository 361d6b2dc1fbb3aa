import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from modules.image_grid import SeededRng  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: phantom end-to-end runs, deselected unless -m slow')


def pytest_collection_modifyitems(config, items):
    if 'slow' in (config.getoption('-m') or ''):
        return
    skip_slow = pytest.mark.skip(reason='slow end-to-end test; run with -m slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return SeededRng(7)


@pytest.fixture
def disc_image():
    """32x32 bright disc of radius 7 on a dark background, plus its mask."""
    rows, cols = np.mgrid[0:32, 0:32]
    mask = (rows - 15.5) ** 2 + (cols - 15.5) ** 2 <= 7 ** 2
    image = np.where(mask, 0.85, 0.15)
    return image, mask


def small_pipeline_document(out_dir):
    """A pipeline config small enough to run every stage in seconds."""
    return {
        'seed': 5,
        'paths': {'out': str(out_dir)},
        'preprocessing': {'target_size': 32},
        'phantom': {'count': 16, 'image_size': 48, 'archetypes': [
            {'name': 'bright', 'semi_major': [6, 8], 'aspect': [0.7, 1.0],
             'lesion_intensity': [0.8, 0.9], 'background_intensity': [0.15, 0.25]},
            {'name': 'dark', 'semi_major': [6, 8], 'aspect': [0.5, 0.7], 'pattern': 'gradient',
             'lesion_intensity': [0.15, 0.25], 'background_intensity': [0.6, 0.7]},
        ]},
        'grabcut': {'grabcut_iterations': 3, 'bbox_expand': 5},
        'clustering': {'k': 1, 'split_ratios': [0.5, 0.25, 0.25]},
        'training': {'widths': [2, 3, 3, 4], 'batch_size': 2, 'iterations_per_epoch': 4,
                     'val_interval': 2, 'val_pair_limit': 4},
        'experiment': {'encoders': ['drn-s'], 'with_crf': True},
    }


@pytest.fixture(scope='session')
def pipeline_run(tmp_path_factory):
    """Every stage run once on a small phantom set; returns (context, results by stage)."""
    from modules.pipeline_config import config_from_dict
    from modules.pipeline_stages import (
        StageContext, cmd_cluster, cmd_evaluate, cmd_gen_masks, cmd_infer, cmd_overlay, cmd_pair, cmd_phantom,
        cmd_refine, cmd_split, cmd_train,
    )

    out_dir = tmp_path_factory.mktemp('pipeline')
    ctx = StageContext(config_from_dict(small_pipeline_document(out_dir)), progress=False)
    results = {}
    for name, command in (('phantom', cmd_phantom), ('gen-masks', cmd_gen_masks), ('cluster', cmd_cluster),
                          ('split', cmd_split), ('pair', cmd_pair), ('train', cmd_train), ('infer', cmd_infer),
                          ('refine', cmd_refine), ('evaluate', cmd_evaluate), ('overlay', cmd_overlay)):
        results[name] = command(ctx)
        assert results[name]['success'], results[name].get('error')
    return ctx, results


@pytest.fixture
def small_document():
    return small_pipeline_document
