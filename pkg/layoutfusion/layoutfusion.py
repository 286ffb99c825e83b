"""Processor for alignment and layout configurations"""

import copy
import logging
import multiprocessing
import os

import numpy as np
from shapely.geometry import Polygon
from shapely.ops import unary_union
from tqdm import tqdm

from . import ConfigurationError, DatasetError, NoCorners, NoMatureHypothesis, NoValidMotion, RankDeficient, \
    SolverDiverged
from . import config as cfg
from .dataset import label_filename, read_dataset
from .evaluation import alignment_error, corner_rmse, fscore, match_walls, relabel_walls, render_segmentation, \
    segmentation_accuracy, summarize_telemetry
from .geometry import CameraIntrinsics, LidarMotion, Pose2, SimilarityTransform2, VanishingPoint, topdown_frame
from .mapping import FloorPlan, Trajectory, integrate_scans
from .plotting import write_plan_svg
from .rransac import Hypothesis
from .simulation import generate_sequence
from .util import Var, VarStr, read_json, read_jsonl, write_json, write_jsonl


logger = logging.getLogger(__name__)


def _render_frame(task):
    """Render the label image of one frame; runs in worker processes"""
    plan, pose, transform, vp, intrinsics, image_size, stride = task
    intrinsics = CameraIntrinsics(**intrinsics)
    topdown = topdown_frame(VanishingPoint(*vp), intrinsics)
    return render_segmentation(FloorPlan.from_dict(plan), Pose2.from_list(pose),
                               SimilarityTransform2.from_dict(transform), topdown, intrinsics, image_size, stride)


class LayoutFusion:
    """Run alignment and layout steps on LiDAR and camera data"""

    def __init__(self, configuration):
        self.configuration = cfg.complete_config(configuration)
        common = self.configuration['common']
        self.output_dir = common.get('output_directory')
        if not self.output_dir:
            logger.warning('Output directory not specified. Writing files to current directory.')
            self.output_dir = '.'
        elif not os.path.isdir(self.output_dir):
            logger.warning('Directory "%s" does not exist. It will be created.', self.output_dir)
            os.makedirs(self.output_dir)
        self.constants = common.get('constants', {})
        self.seed = int(common.get('seed', 0))
        self.default_n_jobs = common.get('default_n_jobs', 1)
        self.parameters = common['parameters']
        self.step_functions = {
            'simulate': self.simulate,
            'odometry': self.odometry,
            'align': self.align,
            'map': self.map_scans,
            'refine': self.refine,
            'segment': self.segment,
            'evaluate': self.evaluate,
        }

    def execute_steps(self, overwrite=False, last=None):
        """Execute steps in the same order as they are in the configuration"""
        for num, step in enumerate(self.configuration.get('steps') or []):
            if last is not None and num + 1 > last:
                logger.info('Stopping after step %s', last)
                break
            self._run_step(step, num + 1, overwrite)

    def execute_step(self, num, overwrite=False):
        """Execute single step in the configuration (first = 1, last = -1)

        Does not check any dependencies and may fail if the input
        files do not exist.

        """
        step = self.configuration['steps'][num if num < 0 else num - 1]
        self._run_step(step, num, overwrite)

    @staticmethod
    def _check_variables(variables):
        """Check that variable definitions are valid"""
        lengths = set()
        for key, value in variables.items():
            if not isinstance(value, list):
                raise ConfigurationError(f"Variable {key} does not define a list")
            lengths.add(len(value))
            if len(lengths) > 1:
                raise ConfigurationError(
                    f"Variable {key} has a different length of values than the previous")
        return list(lengths)[0] if lengths else 0

    def _expand_parameters(self, obj, namespace):
        """Expand Var and VarStr objects in obj"""
        if isinstance(obj, list):
            return [self._expand_parameters(x, namespace) for x in obj]
        if isinstance(obj, dict):
            return {self._expand_parameters(key, namespace): self._expand_parameters(value, namespace)
                    for key, value in obj.items()}
        if isinstance(obj, VarStr):
            try:
                formatted = obj.value.format(**namespace)
            except (KeyError, IndexError) as err:
                raise ConfigurationError(
                    f"String substitutions not defined in the context: {obj.value}") from err
            return formatted
        if isinstance(obj, Var):
            if obj.value not in namespace:
                raise ConfigurationError(f"Variable not defined in the context: {obj.value}")
            return namespace[obj.value]
        return obj

    def _run_step(self, step, num, overwrite):
        """Run given step"""
        if step.get('type') not in self.step_functions:
            raise ConfigurationError(f"Unknown step type '{step.get('type')}' in step {num}")
        logger.info('Running step %s: %s', num, step['type'])
        variables = step.get('variables', {})
        namespace = copy.copy(self.constants)
        namespace.update(step.get('constants', {}))
        if variables:
            num_choices = self._check_variables(variables)
            if not num_choices:
                logger.warning("Variable value lists are empty, skipping step")
            for idx in range(num_choices):
                for key, values in variables.items():
                    namespace[key] = values[idx]
                parameters = self._expand_parameters(step.get('parameters', {}), namespace)
                logger.info("- substep %s: %s", idx + 1, dict(namespace))
                logger.debug("  parameters: %s", parameters)
                self.step_functions[step['type']](parameters, overwrite=overwrite)
        else:
            parameters = self._expand_parameters(step.get('parameters', {}), namespace)
            logger.debug("  parameters: %s", parameters)
            self.step_functions[step['type']](parameters, overwrite=overwrite)

    @staticmethod
    def _check_extra_parameters(valid_keys, parameters):
        """Raise ConfigurationError if parameters dict has keys outside valid_keys"""
        extra = []
        for key in parameters:
            if key not in valid_keys:
                logger.error("Unknown parameter '%s' with value: %s", key, parameters[key])
                extra.append(key)
        if extra:
            raise ConfigurationError(f"Unknown parameter keys: {', '.join(extra)}")

    def _path(self, parameters, key, default):
        return os.path.join(self.output_dir, parameters.get(key, default))

    def _load_frames(self, parameters):
        """Dataset of the step with frame odometry from the odometry output"""
        dataset = read_dataset(self._path(parameters, 'dataset', 'dataset'))
        odometry_file = self._path(parameters, 'odometry', 'odometry.json')
        if not os.path.isfile(odometry_file):
            raise DatasetError(f"missing odometry file '{odometry_file}'; run the odometry step first")
        motions = read_json(odometry_file)['odometry']
        if len(motions) != len(dataset.frames):
            raise DatasetError(f"odometry file '{odometry_file}' has {len(motions)} motions "
                               f"for {len(dataset.frames)} frames")
        for frame, motion in zip(dataset.frames, motions):
            frame.odometry = LidarMotion.from_list(motion)
        return dataset

    def _load_hypothesis(self, parameters):
        data = read_json(self._path(parameters, 'alignment', 'alignment.json'))
        return Hypothesis.from_dict(data['selected'])

    def simulate(self, parameters, overwrite=False):
        """Simulate a world and write it as a dataset directory"""
        self._check_extra_parameters({'world', 'output', 'frames', 'labels', 'compress', 'seed'}, parameters)
        output = self._path(parameters, 'output', 'dataset')
        if not overwrite and os.path.isfile(os.path.join(output, 'meta.json')):
            logger.info("Output files exists, skipping step")
            return
        seed = parameters.get('seed', self.seed)
        world = cfg.build_world(self.parameters, parameters.get('world', 'square'), seed)
        sequence = generate_sequence(world, cfg.trajectory_spec(self.parameters, world), seed,
                                     parameters.get('frames'), parameters.get('labels', True),
                                     self.parameters['evaluation']['label_stride'],
                                     self.parameters['grouping']['angle_thresh'])
        sequence.write(output, parameters.get('compress', False))

    def odometry(self, parameters, overwrite=False):
        """Scan-to-scan odometry and the LiDAR-only trajectory"""
        self._check_extra_parameters({'dataset', 'output', 'use_dataset_odometry'}, parameters)
        output = self._path(parameters, 'output', 'odometry.json')
        if not overwrite and os.path.isfile(output):
            logger.info("Output file exists, skipping step")
            return
        dataset = read_dataset(self._path(parameters, 'dataset', 'dataset'))
        frames = dataset.frames
        if parameters.get('use_dataset_odometry') and all(frame.odometry is not None for frame in frames[1:]):
            logger.info("using odometry stored in the dataset")
            if frames:
                frames[0].odometry = LidarMotion.identity()
        else:
            cfg.build_frame_builder(self.parameters).odometry(frames)
        trajectory = Trajectory.from_frames(frames)
        write_json({'frames': [frame.index for frame in frames],
                    'odometry': [frame.odometry.to_list() for frame in frames],
                    'trajectory': trajectory.to_dict()}, output)

    def align(self, parameters, overwrite=False):
        """Track alignment hypotheses and select the best one"""
        self._check_extra_parameters({'dataset', 'odometry', 'output', 'telemetry', 'reset_at'}, parameters)
        output = self._path(parameters, 'output', 'alignment.json')
        telemetry = self._path(parameters, 'telemetry', 'telemetry.jsonl')
        if not overwrite and os.path.isfile(output) and os.path.isfile(telemetry):
            logger.info("Output files exists, skipping step")
            return
        dataset = self._load_frames(parameters)
        tracker = cfg.build_tracker(self.parameters, self.seed, dataset.intrinsics, dataset.image_size)
        best = tracker.run(dataset.frames, parameters.get('reset_at'))
        write_jsonl(tracker.telemetry, telemetry)
        if best is None:
            if tracker.state.next_id == 0:
                raise NoValidMotion(f"no hypotheses could be generated from the {len(dataset.frames)} frames "
                                    f"of '{dataset.directory}'")
            raise NoMatureHypothesis(f"none of {len(tracker.state.hypotheses)} hypotheses was evaluated on "
                                     f"{tracker.settings.min_maturity} frames")
        selected = best
        if self.parameters['rransac']['optimize']:
            try:
                selected = tracker.refine(best, min_direction_angle=self.parameters['rransac']['min_direction_angle'],
                                          max_iter=self.parameters['rransac']['max_iter'])
            except RankDeficient as err:
                logger.warning("point-to-line optimization skipped: %s", err)
                selected = err.hypothesis
            except SolverDiverged as err:
                logger.warning("point-to-line optimization failed: %s", err)
        logger.info("selected hypothesis %s: delta %.4f phi %.4f origin %s (score %.3f)", selected.hypothesis_id,
                    selected.transform.delta, selected.transform.phi, selected.transform.origin, selected.score)
        write_json({'best': best.to_dict(), 'selected': selected.to_dict(),
                    'bank': [hyp.to_dict() for hyp in tracker.state.hypotheses]}, output)

    def map_scans(self, parameters, overwrite=False):
        """Floor plan from the LiDAR-only trajectory"""
        self._check_extra_parameters({'dataset', 'odometry', 'output', 'svg'}, parameters)
        output = self._path(parameters, 'output', 'plan_lidar.json')
        svg = self._path(parameters, 'svg', 'plan_lidar.svg')
        if not overwrite and os.path.isfile(output) and os.path.isfile(svg):
            logger.info("Output files exists, skipping step")
            return
        dataset = self._load_frames(parameters)
        cfg.build_frame_builder(self.parameters).extract(dataset.frames)
        trajectory = Trajectory.from_frames(dataset.frames)
        plan = integrate_scans(dataset.frames, trajectory, **cfg.mapping_options(self.parameters))
        write_json({'plan': plan.to_dict(), 'trajectory': trajectory.to_dict()}, output)
        write_plan_svg(svg, plan, trajectory, polygons=self._polygons(plan), title='LiDAR only')

    def _polygons(self, plan):
        mapping = self.parameters['mapping']
        return plan.to_polygons(mapping['close_gap'], mapping['min_hole_area'])

    def refine(self, parameters, overwrite=False):
        """Fused refinement of the trajectory and floor plan"""
        self._check_extra_parameters({'dataset', 'odometry', 'alignment', 'trajectory', 'plan', 'svg', 'report'},
                                     parameters)
        outputs = [self._path(parameters, 'trajectory', 'trajectory.json'), self._path(parameters, 'plan', 'plan.json'),
                   self._path(parameters, 'svg', 'plan.svg'), self._path(parameters, 'report', 'refine.json')]
        if not overwrite and all(os.path.isfile(outfile) for outfile in outputs):
            logger.info("Output files exists, skipping step")
            return
        dataset = self._load_frames(parameters)
        hypothesis = self._load_hypothesis(parameters)
        cfg.build_frame_builder(self.parameters).extract(dataset.frames)
        refiner = cfg.build_refiner(self.parameters, dataset.max_range)
        trajectory, plan = refiner.refine(dataset.frames, Trajectory.from_frames(dataset.frames), hypothesis,
                                          dataset.intrinsics)
        write_json(trajectory.to_dict(), outputs[0])
        write_json(plan.to_dict(), outputs[1])
        write_plan_svg(outputs[2], plan, trajectory, polygons=self._polygons(plan), title='fused')
        write_json(refiner.report, outputs[3])

    def segment(self, parameters, overwrite=False):
        """Render per-frame wall/ground labels of the refined plan"""
        n_jobs = parameters.pop('n_jobs', self.default_n_jobs)
        self._check_extra_parameters({'dataset', 'alignment', 'trajectory', 'plan', 'output'}, parameters)
        output = self._path(parameters, 'output', 'segmentation')
        index_file = os.path.join(output, 'index.json')
        if not overwrite and os.path.isfile(index_file):
            logger.info("Output files exists, skipping step")
            return
        dataset = read_dataset(self._path(parameters, 'dataset', 'dataset'))
        transform = self._load_hypothesis(parameters).transform.to_dict()
        trajectory = Trajectory.from_dict(read_json(self._path(parameters, 'trajectory', 'trajectory.json')))
        plan = read_json(self._path(parameters, 'plan', 'plan.json'))
        stride = self.parameters['evaluation']['label_stride']
        tasks = [(plan, pose.to_list(), transform, (frame.vp.u, frame.vp.v), dataset.intrinsics.to_dict(),
                  dataset.image_size, stride) for frame, pose in zip(dataset.frames, trajectory.poses)]
        os.makedirs(output, exist_ok=True)
        if n_jobs > 1:
            with multiprocessing.Pool(n_jobs) as pool:
                labels = list(tqdm(pool.imap(_render_frame, tasks), total=len(tasks), desc='segment', disable=None))
        else:
            labels = [_render_frame(task) for task in tqdm(tasks, desc='segment', disable=None)]
        files = []
        for frame, label in zip(dataset.frames, labels):
            np.save(os.path.join(output, label_filename(frame.index)), label)
            files.append(label_filename(frame.index))
        write_json({'frames': [frame.index for frame in dataset.frames], 'files': files, 'stride': stride}, index_file)

    def _plan_metrics(self, plan, truth_plan, truth_region):
        evaluation = self.parameters['evaluation']
        metrics = {'walls': len(plan.walls), 'corners': len(plan.corners)}
        try:
            metrics['corners_error'] = corner_rmse(plan, truth_plan, evaluation['match_radius']).to_dict()
        except NoCorners as err:
            logger.warning("corner error not available: %s", err)
            metrics['corners_error'] = None
        metrics['fscore'] = fscore(self._polygons(plan), truth_region)
        return metrics

    @staticmethod
    def _trajectory_rmse(trajectory, truth):
        errors = trajectory.as_array()[:, :2] - truth.as_array()[:len(trajectory), :2]
        return float(np.sqrt(np.mean(np.sum(errors ** 2, axis=1))))

    def evaluate(self, parameters, overwrite=False):
        """Compare outputs with the ground truth of the dataset"""
        self._check_extra_parameters({'dataset', 'alignment', 'telemetry', 'trajectory', 'plan', 'lidar_plan',
                                      'segmentation', 'output'}, parameters)
        output = self._path(parameters, 'output', 'metrics.json')
        if not overwrite and os.path.isfile(output):
            logger.info("Output file exists, skipping step")
            return
        dataset = read_dataset(self._path(parameters, 'dataset', 'dataset'))
        metrics = {'frames': len(dataset.frames)}
        telemetry = self._path(parameters, 'telemetry', 'telemetry.jsonl')
        if os.path.isfile(telemetry):
            summary = summarize_telemetry(list(read_jsonl(telemetry)))
            if len(summary):
                last = summary.iloc[-1]
                metrics['tracker'] = {'frames': int(len(summary)), 'final_bank': int(last['hypotheses']),
                                      'final_best_score': float(last['best_score']),
                                      'max_bank': int(summary['hypotheses'].max())}
        hypothesis = self._load_hypothesis(parameters)
        metrics['alignment'] = hypothesis.transform.to_dict()
        if not dataset.truth:
            logger.warning("dataset '%s' has no ground truth; writing tracker metrics only", dataset.directory)
            write_json(metrics, output)
            return
        truth = dataset.truth
        metrics['alignment_error'] = alignment_error(hypothesis, SimilarityTransform2.from_dict(truth['alignment']))
        truth_poses = Trajectory.from_dict(truth)
        anchor = truth_poses[0]
        truth_plan = FloorPlan.from_dict(truth['plan'])
        truth_region = unary_union([Polygon(ring) for ring in truth['floor']])
        if truth.get('holes'):
            truth_region = truth_region.difference(unary_union([Polygon(ring) for ring in truth['holes']]))
        truth_region = list(getattr(truth_region, 'geoms', [truth_region]))
        trajectory = Trajectory.from_dict(read_json(self._path(parameters, 'trajectory', 'trajectory.json')))
        plan = FloorPlan.from_dict(read_json(self._path(parameters, 'plan', 'plan.json'))).transformed(anchor)
        metrics['fused'] = self._plan_metrics(plan, truth_plan, truth_region)
        metrics['fused']['trajectory_rmse'] = self._trajectory_rmse(trajectory.anchored(anchor), truth_poses)
        lidar_file = self._path(parameters, 'lidar_plan', 'plan_lidar.json')
        if os.path.isfile(lidar_file):
            data = read_json(lidar_file)
            lidar_plan = FloorPlan.from_dict(data['plan']).transformed(anchor)
            metrics['lidar_only'] = self._plan_metrics(lidar_plan, truth_plan, truth_region)
            metrics['lidar_only']['trajectory_rmse'] = self._trajectory_rmse(
                Trajectory.from_dict(data['trajectory']).anchored(anchor), truth_poses)
        segmentation = self._path(parameters, 'segmentation', 'segmentation')
        if os.path.isfile(os.path.join(segmentation, 'index.json')):
            evaluation = self.parameters['evaluation']
            mapping = match_walls(plan, truth_plan, evaluation['wall_angle'], evaluation['wall_offset'])
            scores = []
            for frame in dataset.frames:
                expected = dataset.labels(frame.index)
                if expected is None:
                    continue
                labels = np.load(os.path.join(segmentation, label_filename(frame.index)))
                scores.append(segmentation_accuracy(relabel_walls(labels, mapping), expected))
            if scores:
                metrics['segmentation'] = {'mean_accuracy': float(np.mean(scores)),
                                           'min_accuracy': float(np.min(scores)), 'frames': len(scores)}
        logger.info("metrics: %s", metrics)
        write_json(metrics, output)
