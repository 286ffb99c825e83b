"""Command line interface of the alignment and layout pipeline"""

import argparse
import logging
import os
import sys

from . import ConfigurationError, LayoutFusionError, NoMatureHypothesis, NoValidMotion
from .config import complete_config, load_config
from .layoutfusion import LayoutFusion
from .simulation import PRESETS
from .util import yaml_dumps


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_RECOVERABLE = 2


def default_steps(sim=None, dataset=None, frames=None, reset_at=None):
    """Step chain simulate (or dataset) -> odometry -> align -> map -> refine -> segment -> evaluate"""
    if (sim is None) == (dataset is None):
        raise ConfigurationError("exactly one of a simulated world or a dataset directory is required")
    steps = []
    if sim is not None:
        parameters = {'world': sim, 'output': 'dataset'}
        if frames is not None:
            parameters['frames'] = frames
        steps.append({'type': 'simulate', 'parameters': parameters})
        dataset = 'dataset'
    else:
        dataset = os.path.abspath(dataset)
    align = {'dataset': dataset}
    if reset_at is not None:
        align['reset_at'] = reset_at
    steps.extend([
        {'type': 'odometry', 'parameters': {'dataset': dataset}},
        {'type': 'align', 'parameters': align},
        {'type': 'map', 'parameters': {'dataset': dataset}},
        {'type': 'refine', 'parameters': {'dataset': dataset}},
        {'type': 'segment', 'parameters': {'dataset': dataset}},
        {'type': 'evaluate', 'parameters': {'dataset': dataset}},
    ])
    return steps


def build_config(config=None, sim=None, dataset=None, seed=None, out=None, frames=None, reset_at=None):
    """Configuration from an optional file updated by command line options"""
    configuration = load_config(config) if config else {}
    configuration = complete_config(configuration)
    common = configuration['common']
    if seed is not None:
        common['seed'] = seed
    if out is not None:
        common['output_directory'] = out
    if configuration.get('steps'):
        if sim is not None or dataset is not None:
            logger.warning("configuration defines steps; ignoring --sim and --dataset")
    elif sim is not None or dataset is not None:
        configuration['steps'] = default_steps(sim, dataset, frames, reset_at)
    return configuration


def run_pipeline(config=None, sim=None, dataset=None, seed=None, out=None, frames=None, reset_at=None,
                 overwrite=False, last=None):
    """Run the configured steps; returns the exit code"""
    try:
        configuration = build_config(config, sim, dataset, seed, out, frames, reset_at)
        if not configuration.get('steps'):
            raise ConfigurationError("no steps to run: give a simulated world, a dataset or a configuration with steps")
        LayoutFusion(configuration).execute_steps(overwrite=overwrite, last=last)
    except (NoValidMotion, NoMatureHypothesis) as err:
        logger.error("%s: %s", type(err).__name__, err)
        return EXIT_RECOVERABLE
    except (LayoutFusionError, OSError) as err:
        logger.error("%s: %s", type(err).__name__, err)
        return EXIT_ERROR
    return EXIT_OK


def get_parser():
    parser = argparse.ArgumentParser(
        prog='layoutfusion',
        description='Align a 2D LiDAR and a camera without calibration and reconstruct the floor plan')
    source = parser.add_mutually_exclusive_group()
    source.add_argument('--sim', choices=sorted(PRESETS), help='simulate a world preset')
    source.add_argument('--dataset', metavar='DIR', help='read a dataset directory')
    parser.add_argument('--config', metavar='FILE', help='YAML configuration file')
    parser.add_argument('--seed', type=int, default=None, help='random seed (overrides common.seed)')
    parser.add_argument('--out', metavar='DIR', default=None, help='output directory')
    parser.add_argument('--frames', type=int, default=None, help='maximum number of simulated frames')
    parser.add_argument('--reset-tracker-at', type=int, default=None, metavar='FRAME',
                        help='forget all hypotheses at this frame index')
    parser.add_argument('--overwrite', action='store_true', help='overwrite existing output files')
    parser.add_argument('--last', type=int, default=None, help='stop after step number LAST (first = 1)')
    parser.add_argument('--print-config', action='store_true', help='print the merged configuration and exit')
    parser.add_argument('-v', '--verbose', action='count', default=0, help='increase logging (repeatable)')
    return parser


def main(argv=None):
    args = get_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format='%(asctime)s %(name)s %(levelname)s: %(message)s')
    if args.print_config:
        try:
            configuration = build_config(args.config, args.sim, args.dataset, args.seed, args.out, args.frames,
                                         args.reset_tracker_at)
        except LayoutFusionError as err:
            logger.error("%s: %s", type(err).__name__, err)
            return EXIT_ERROR
        sys.stdout.write(yaml_dumps(configuration))
        return EXIT_OK
    return run_pipeline(args.config, args.sim, args.dataset, args.seed, args.out, args.frames,
                        args.reset_tracker_at, args.overwrite, args.last)
