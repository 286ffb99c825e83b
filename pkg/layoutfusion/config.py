"""Embedded defaults, merging and validation of threshold parameters"""

import copy
import logging

import ruamel.yaml

from . import ConfigurationError
from .features import FrameBuilder, LineExtractor, ScanMatcher
from .geometry import CameraIntrinsics
from .mapping import FusedRefiner
from .rransac import AlignmentTracker
from .simulation import CameraMount, NoiseModel, TrajectorySpec, make_world
from .util import yaml


logger = logging.getLogger(__name__)


DEFAULTS = {
    'sensor': {
        'fx': 800.0, 'fy': 800.0, 'cx': 960.0, 'cy': 540.0,
        'image_width': 1920, 'image_height': 1080,
        'beams': 360, 'min_range': 0.1,
        'max_range': None,  # None: range of the simulated world preset
    },
    'geometry': {
        'rotation_epsilon': 0.5,
    },
    'lines': {
        'dist_thresh': 0.03, 'min_len': 0.15, 'min_points': 5,
        'break_distance': 0.3, 'break_range_factor': 0.1, 'merge_angle': 5.0, 'merge_support': 0.95,
        'fold_len': 0.5,
    },
    'icp': {
        'max_iter': 50, 'tolerance': 1e-6, 'overlap_frac': 0.5, 'max_correspondence': 0.3,
        'neighbors': 5, 'neighbor_radius': 1.0, 'rcond': 1e-2,
    },
    'grouping': {
        'angle_thresh': 2.0, 'gamma': 2.0,
    },
    'rransac': {
        'window': 8, 'budget': 25, 'capacity': 20, 'stale_age': 10,
        'promote_thresh': 0.7, 'min_maturity': 5, 'min_pairs': 8, 'tau': 3e-7, 'min_baseline': 0.05,
        'support_fraction': 0.5,
        'assoc_thresh': 5.0,
        'refit': True, 'refit_thresh': 0.03, 'refit_floor': 0.002, 'refit_min_inliers': 16, 'refit_rotation': 2.0,
        'refit_iterations': 3,
        'duplicate_scale': 0.01, 'duplicate_angle': 0.5, 'duplicate_origin': 0.02,
        'optimize': True, 'min_direction_angle': 5.0, 'max_iter': 50,
    },
    'mapping': {
        'direction_tol': 3.0, 'offset_tol': 0.10, 'gap_tol': 0.5, 'absorb_tol': 0.05,
        'corner_snap': 0.3, 'min_corner_angle': 30.0,
        'close_gap': 0.1, 'min_hole_area': 1.0,
    },
    'refine': {
        'lidar_sigma': 0.05, 'pixel_sigma': 2.0, 'ground_sigma': 0.05, 'point_stride': 3, 'max_iter': 50,
        'free_space_tol': 0.05, 'assoc_gate': 0.15, 'transfer_offsets': [1, 2],
        'min_score': 0.8, 'epipolar_gate': 3.0, 'transfer_gate': 0.10, 'min_support': 0.6, 'max_lidar_ratio': 1.5,
    },
    'evaluation': {
        'match_radius': 1.0, 'label_stride': 8, 'wall_angle': 10.0, 'wall_offset': 0.3,
    },
    'simulation': {
        'range_sigma': 0.01, 'pixel_sigma': 0.5, 'dropout': 0.1,
        'height': 1.0, 'pitch': 20.0, 'roll': 3.0, 'yaw': 4.0, 'offset': [0.10, 0.05],
        'wall_height': 2.5, 'floor_density': 6.0, 'base_spacing': 0.4, 'wall_density': 2.0,
        'feature_wall_factor': 4.0, 'distractors_per_wall': 3,
        'spacing': [0.10, 0.20], 'heading_wobble': 1.0, 'lateral_wobble': 0.01, 'max_turn': 12.0,
        'noise_free': False,
    },
}

COMMON_DEFAULTS = {
    'output_directory': '.',
    'seed': 0,
    'default_n_jobs': 1,
    'constants': {},
}


def merge_parameters(overrides, defaults=None, prefix='parameters'):
    """Return defaults updated recursively with overrides

    Raises ConfigurationError for keys that are not in the defaults.

    """
    defaults = DEFAULTS if defaults is None else defaults
    merged = copy.deepcopy(defaults)
    if overrides is None:
        return merged
    if not isinstance(overrides, dict):
        raise ConfigurationError(f"'{prefix}' should be a mapping, got {overrides!r}")
    extra = []
    for key, value in overrides.items():
        if key not in defaults:
            logger.error("Unknown parameter '%s.%s' with value: %s", prefix, key, value)
            extra.append(f'{prefix}.{key}')
        elif isinstance(defaults[key], dict):
            merged[key] = merge_parameters(value, defaults[key], f'{prefix}.{key}')
        else:
            merged[key] = _plain(value)
    if extra:
        raise ConfigurationError(f"Unknown parameter keys: {', '.join(extra)}")
    return merged


def _plain(value):
    """Convert ruamel containers to plain Python ones"""
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, list):
        return [_plain(item) for item in value]
    return value


def load_config(filename):
    """Read a YAML configuration file"""
    try:
        with open(filename, 'r', encoding='utf8') as fobj:
            configuration = yaml.load(fobj)
    except ruamel.yaml.YAMLError as err:
        raise ConfigurationError(f"Could not parse configuration file '{filename}': {err}") from err
    if configuration is None:
        configuration = {}
    if not isinstance(configuration, dict):
        raise ConfigurationError(f"Configuration file '{filename}' should contain a mapping")
    return configuration


def complete_config(configuration=None):
    """Fill in common settings and merge threshold parameters with the defaults"""
    configuration = {} if configuration is None else dict(configuration)
    extra = set(configuration) - {'common', 'steps'}
    if extra:
        raise ConfigurationError(f"Unknown configuration sections: {', '.join(sorted(extra))}")
    common = dict(configuration.get('common') or {})
    parameters = common.pop('parameters', None)
    extra = set(common) - set(COMMON_DEFAULTS)
    if extra:
        raise ConfigurationError(f"Unknown common keys: {', '.join(sorted(extra))}")
    completed = copy.deepcopy(COMMON_DEFAULTS)
    completed.update(common)
    completed['parameters'] = merge_parameters(parameters)
    configuration['common'] = completed
    return configuration


def intrinsics(parameters):
    sensor = parameters['sensor']
    return CameraIntrinsics(float(sensor['fx']), float(sensor['fy']), float(sensor['cx']), float(sensor['cy']))


def image_size(parameters):
    return int(parameters['sensor']['image_width']), int(parameters['sensor']['image_height'])


def build_extractor(parameters):
    return LineExtractor(**parameters['lines'])


def build_frame_builder(parameters):
    extractor = build_extractor(parameters)
    return FrameBuilder(extractor, ScanMatcher(extractor=extractor, **parameters['icp']))


def tracker_settings(parameters):
    """Keyword arguments of AlignmentTracker"""
    settings = {key: value for key, value in parameters['rransac'].items()
                if key not in {'optimize', 'min_direction_angle', 'max_iter'}}
    settings['gamma'] = parameters['grouping']['gamma']
    settings['rotation_epsilon'] = parameters['geometry']['rotation_epsilon']
    return settings


def build_tracker(parameters, seed, camera=None, size=None):
    return AlignmentTracker(intrinsics(parameters) if camera is None else camera,
                            image_size(parameters) if size is None else size, seed, **tracker_settings(parameters))


def mapping_options(parameters):
    """Keyword arguments of integrate_scans"""
    options = dict(parameters['mapping'])
    options.pop('close_gap')
    options.pop('min_hole_area')
    return options


def build_refiner(parameters, max_range):
    return FusedRefiner(max_range=max_range, mapping=mapping_options(parameters), **parameters['refine'])


def build_world(parameters, name, seed):
    """Simulated world of a preset with the configured mount, sensors and noise"""
    sim = parameters['simulation']
    sensor = parameters['sensor']
    mount = CameraMount(sim['height'], sim['pitch'], sim['roll'], sim['yaw'], tuple(sim['offset']))
    noise = NoiseModel.none() if sim['noise_free'] else NoiseModel(sim['range_sigma'], sim['pixel_sigma'],
                                                                   sim['dropout'])
    return make_world(name, seed, mount, noise, intrinsics(parameters), image_size(parameters),
                      sim['wall_height'], int(sensor['beams']), sensor['min_range'], sensor['max_range'],
                      sim['floor_density'], sim['base_spacing'], sim['wall_density'], sim['feature_wall_factor'],
                      int(sim['distractors_per_wall']))


def trajectory_spec(parameters, world):
    sim = parameters['simulation']
    return TrajectorySpec(world.waypoints.tolist(), tuple(sim['spacing']), sim['heading_wobble'],
                          sim['lateral_wobble'], sim['max_turn'])
