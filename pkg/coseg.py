"""
Command-line driver for the lesion co-segmentation pipeline.

Usage:
    python coseg.py <command> [--config FILE] [--seed N] [--force] [--out DIR]

Stages run in order: phantom (synthetic data only), gen-masks, cluster, split, pair, train,
infer, refine, evaluate, overlay. `run-all` chains them; `experiment` trains and scores the
strategy comparison grid; `init-config` writes the default YAML document.
"""

import argparse
import logging
import sys
from typing import Any, Callable, Dict, List, Optional

from modules.pipeline_config import ConfigError, load_config, write_default_config
from modules.pipeline_stages import (
    EVALUATION_SOURCES, StageContext, cmd_cluster, cmd_evaluate, cmd_experiment, cmd_gen_masks, cmd_infer,
    cmd_overlay, cmd_pair, cmd_phantom, cmd_refine, cmd_run_all, cmd_split, cmd_train,
)

logger = logging.getLogger('coseg')

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(name)s - %(message)s'

STAGE_COMMANDS: Dict[str, Callable[..., Dict[str, Any]]] = {
    'phantom': cmd_phantom,
    'gen-masks': cmd_gen_masks,
    'cluster': cmd_cluster,
    'split': cmd_split,
    'pair': cmd_pair,
    'train': cmd_train,
    'infer': cmd_infer,
    'refine': cmd_refine,
    'evaluate': cmd_evaluate,
    'overlay': cmd_overlay,
    'experiment': cmd_experiment,
    'run-all': cmd_run_all,
}

STAGE_HELP = {
    'phantom': 'render the synthetic lesion dataset',
    'gen-masks': 'GrabCut initial masks from RECIST annotations',
    'cluster': 'k-means clustering of lesion features',
    'split': 'cluster-stratified train/val/test split',
    'pair': 'within-cluster training pairs',
    'train': 'train the co-segmentation network',
    'infer': 'predict foreground probabilities for the evaluation split',
    'refine': 'dense CRF refinement of the predictions',
    'evaluate': 'score masks against ground truth',
    'overlay': 'render GT/prediction contour panels',
    'experiment': 'compare training strategies and encoders',
    'run-all': 'run every stage in order',
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None, help='YAML config file (defaults apply when omitted)')
    common.add_argument('--seed', type=int, default=None, help='override the config seed')
    common.add_argument('--force', action='store_true', help='overwrite output produced with a different config')
    common.add_argument('--out', default=None, help='override paths.out')
    common.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    common.add_argument('--quiet', action='store_true', help='disable progress bars')

    parser = argparse.ArgumentParser(prog='coseg', description='Weakly-supervised lesion co-segmentation pipeline')
    commands = parser.add_subparsers(dest='command', required=True, metavar='command')
    for name in STAGE_COMMANDS:
        sub = commands.add_parser(name, parents=[common], help=STAGE_HELP[name])
        if name in ('evaluate', 'overlay'):
            sub.add_argument('--source', default='refined', choices=sorted(EVALUATION_SOURCES),
                             help='mask directory to use (default: refined)')
        if name in ('evaluate', 'experiment', 'run-all'):
            sub.add_argument('--table', action='store_true', help='print the metric table on stdout')
    init = commands.add_parser('init-config', help='write the default configuration document')
    init.add_argument('path', help='destination YAML file')
    init.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    return parser


def report_failure(command: str, message: str) -> int:
    print(f"error: {command}: {message}", file=sys.stderr)
    return 1


def run_command(args: argparse.Namespace) -> int:
    if args.command == 'init-config':
        try:
            write_default_config(args.path)
        except OSError as e:
            return report_failure(args.command, str(e))
        logger.info("Wrote default config to %s", args.path)
        return 0

    try:
        config = load_config(args.config).with_overrides(args.seed, args.out)
    except ConfigError as e:
        return report_failure(args.command, str(e))
    ctx = StageContext(config, force=args.force, progress=not args.quiet, command='coseg.py')

    command = STAGE_COMMANDS[args.command]
    result = command(ctx, args.source) if hasattr(args, 'source') else command(ctx)
    if not result['success']:
        return report_failure(args.command, result['error'])

    if getattr(args, 'table', False):
        table = result.get('table') or result.get('outputs', {}).get('table', '')
        if table:
            print(table)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, stream=sys.stderr)
    return run_command(args)


if __name__ == '__main__':
    sys.exit(main())
