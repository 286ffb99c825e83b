"""Seeded sweeps over simulated worlds

The generation sweep compares the motion-constrained hypothesis
generator with random boundary/corner pairings under the same subset
budget. The corridor sweep compares corner errors of LiDAR-only and
fused floor plans. The tau sweep reports the epipolar score percentile
of the true alignment that the inlier threshold is calibrated on.

"""

import argparse
import logging
import math

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import NoCorners, NoValidMotion, RankDeficient, SkippedPair, SolverDiverged
from . import config as cfg
from .evaluation import alignment_error, corner_rmse
from .mapping import Trajectory, integrate_scans
from .rransac import calibrate_tau, evaluate_hypothesis, generate_baseline_hypotheses
from .simulation import generate_sequence
from .util import write_json


logger = logging.getLogger(__name__)

TOLERANCE = {'scale': 0.02, 'angle': 1.0, 'origin': 0.05}


def within(errors, tolerance=None):
    """True if every alignment error is inside its tolerance"""
    tolerance = TOLERANCE if tolerance is None else tolerance
    return all(errors[key] <= tolerance[key] for key in tolerance)


def _sequence(parameters, world_name, seed, frames, true_odometry):
    world = cfg.build_world(parameters, world_name, seed)
    sequence = generate_sequence(world, cfg.trajectory_spec(parameters, world), seed, frames, labels=False,
                                 group_angle=parameters['grouping']['angle_thresh'])
    if true_odometry:
        sequence.with_true_odometry()
    else:
        cfg.build_frame_builder(parameters).odometry(sequence.frames)
    return sequence


def tracked_alignment(sequence, parameters, seed):
    """Best hypothesis of the streaming tracker, optimized as in the pipeline, or None"""
    tracker = cfg.build_tracker(parameters, seed, sequence.world.intrinsics, sequence.world.image_size)
    best = tracker.run(sequence.frames)
    if best is None or not parameters['rransac']['optimize']:
        return best
    try:
        return tracker.refine(best, min_direction_angle=parameters['rransac']['min_direction_angle'],
                              max_iter=parameters['rransac']['max_iter'])
    except RankDeficient as err:
        logger.debug("seed %s: %s", seed, err)
        return err.hypothesis
    except SolverDiverged as err:
        logger.debug("seed %s: %s", seed, err)
        return best


def baseline_alignment(sequence, parameters, seed):
    """Best of budget random boundary/corner hypotheses from the middle frame, scored over the sequence"""
    settings = cfg.tracker_settings(parameters)
    rng = np.random.default_rng(seed)
    frames = sequence.frames
    intrinsics = sequence.world.intrinsics
    hypotheses = generate_baseline_hypotheses(frames[len(frames) // 2], settings['budget'], rng, intrinsics)
    best = None
    for hypothesis in hypotheses:
        for num in range(1, len(frames)):
            try:
                hypothesis = evaluate_hypothesis(hypothesis, frames[num - 1], frames[num], intrinsics,
                                                 settings['tau'], min_pairs=settings['min_pairs'],
                                                 support_fraction=settings['support_fraction'],
                                                 min_baseline=settings['min_baseline'])
            except SkippedPair:
                continue
        if best is None or (hypothesis.score, hypothesis.inlier_count) > (best.score, best.inlier_count):
            best = hypothesis
    return best


def budget_sweep(seeds, world='square', frames=40, parameters=None, true_odometry=True):
    """Alignment success of tracked and baseline generation per seed"""
    parameters = cfg.merge_parameters(parameters)
    rows = []
    for seed in tqdm(list(seeds), desc='budget sweep', disable=None):
        sequence = _sequence(parameters, world, seed, frames, true_odometry)
        for strategy, function in (('tracked', tracked_alignment), ('baseline', baseline_alignment)):
            hypothesis = function(sequence, parameters, seed)
            if hypothesis is None:
                errors = {'scale': math.inf, 'angle': math.inf, 'origin': math.inf}
            else:
                errors = alignment_error(hypothesis, sequence.alignment)
            rows.append({'seed': seed, 'strategy': strategy, **errors, 'success': within(errors)})
            logger.debug("seed %s %s: %s", seed, strategy, errors)
    return pd.DataFrame(rows, columns=['seed', 'strategy', 'scale', 'angle', 'origin', 'success'])


def _corner_error(plan, anchor, truth):
    try:
        return corner_rmse(plan.transformed(anchor), truth).rmse
    except NoCorners:
        return math.nan


def corridor_sweep(seeds, frames=None, parameters=None, world='corridor'):
    """Corner RMSE of LiDAR-only and fused floor plans per seed"""
    parameters = cfg.merge_parameters(parameters)
    mapping = cfg.mapping_options(parameters)
    rows = []
    for seed in tqdm(list(seeds), desc='corridor sweep', disable=None):
        sequence = _sequence(parameters, world, seed, frames, true_odometry=False)
        truth = sequence.world.plan()
        anchor = sequence.poses[0]
        trajectory = Trajectory.from_frames(sequence.frames)
        lidar_plan = integrate_scans(sequence.frames, trajectory, **mapping)
        hypothesis = tracked_alignment(sequence, parameters, seed)
        if hypothesis is None:
            logger.warning("seed %s: no mature hypothesis", seed)
            fused_error = math.nan
        else:
            refiner = cfg.build_refiner(parameters, sequence.world.max_range)
            _, fused_plan = refiner.refine(sequence.frames, trajectory, hypothesis, sequence.world.intrinsics)
            fused_error = _corner_error(fused_plan, anchor, truth)
        lidar_error = _corner_error(lidar_plan, anchor, truth)
        rows.append({'seed': seed, 'lidar_rmse': lidar_error, 'fused_rmse': fused_error,
                     'reduction': 1.0 - fused_error / lidar_error if lidar_error > 0 else math.nan})
    return pd.DataFrame(rows, columns=['seed', 'lidar_rmse', 'fused_rmse', 'reduction'])


def tau_sweep(seeds, world='square', frames=40, parameters=None, percentile=95.0):
    """Epipolar score percentile of the true alignment per seed"""
    parameters = cfg.merge_parameters(parameters)
    settings = cfg.tracker_settings(parameters)
    rows = []
    for seed in tqdm(list(seeds), desc='tau sweep', disable=None):
        sequence = _sequence(parameters, world, seed, frames, true_odometry=True)
        try:
            tau = calibrate_tau(sequence.frames, sequence.alignment, sequence.world.intrinsics, percentile,
                                settings['min_pairs'], settings['min_baseline'])
        except NoValidMotion as err:
            logger.warning("seed %s: %s", seed, err)
            tau = math.nan
        rows.append({'seed': seed, 'tau': tau})
    return pd.DataFrame(rows, columns=['seed', 'tau'])


def summarize(results, kind):
    """Summary record of a sweep result"""
    if kind == 'budget':
        counts = results.groupby('strategy')['success'].sum()
        return {'runs': int(results['seed'].nunique()),
                'successes': {key: int(value) for key, value in counts.items()}}
    if kind == 'tau':
        return {'runs': int(len(results)), 'median_tau': float(results['tau'].median()),
                'max_tau': float(results['tau'].max())}
    return {'runs': int(len(results)), 'median_lidar_rmse': float(results['lidar_rmse'].median()),
            'median_fused_rmse': float(results['fused_rmse'].median()),
            'median_reduction': float(results['reduction'].median())}


def main(argv=None):
    parser = argparse.ArgumentParser(prog='layoutfusion-benchmark', description='Seeded sweeps over simulated worlds')
    parser.add_argument('sweep', choices=['budget', 'corridor', 'tau'])
    parser.add_argument('--seeds', type=int, default=None,
                        help='number of seeds (100 for budget, 20 for corridor and tau)')
    parser.add_argument('--first-seed', type=int, default=0)
    parser.add_argument('--frames', type=int, default=None, help='maximum number of frames per run')
    parser.add_argument('--world', default=None, help='world preset')
    parser.add_argument('--percentile', type=float, default=95.0, help='score percentile for the tau sweep')
    parser.add_argument('--config', metavar='FILE', help='YAML configuration with common.parameters overrides')
    parser.add_argument('--csv', metavar='FILE', help='write per-seed results')
    parser.add_argument('--summary', metavar='FILE', help='write the summary as JSON')
    parser.add_argument('-v', '--verbose', action='store_true')
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    parameters = None
    if args.config:
        parameters = cfg.complete_config(cfg.load_config(args.config))['common']['parameters']
    if args.sweep == 'budget':
        seeds = range(args.first_seed, args.first_seed + (args.seeds or 100))
        results = budget_sweep(seeds, args.world or 'square', args.frames or 40, parameters)
    elif args.sweep == 'tau':
        seeds = range(args.first_seed, args.first_seed + (args.seeds or 20))
        results = tau_sweep(seeds, args.world or 'square', args.frames or 40, parameters, args.percentile)
    else:
        seeds = range(args.first_seed, args.first_seed + (args.seeds or 20))
        results = corridor_sweep(seeds, args.frames, parameters, args.world or 'corridor')
    summary = summarize(results, args.sweep)
    if args.csv:
        results.to_csv(args.csv, index=False)
    if args.summary:
        write_json(summary, args.summary)
    print(results.to_string(index=False))
    print(summary)
    return 0
