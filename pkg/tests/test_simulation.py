import math
import unittest

import numpy as np
from shapely.geometry import Point

from layoutfusion import ConfigurationError, PoseOutsideWorld
from layoutfusion.evaluation import GROUND, UNKNOWN, WALL, label_grid
from layoutfusion.geometry import Pose2, project_topdown_many, topdown_frame, wrap_angle
from layoutfusion.simulation import *
from layoutfusion.simulation import _Camera


class TestWorld(unittest.TestCase):

    def test_presets(self):
        for name in PRESETS:
            world = make_world(name)
            self.assertEqual(world.name, name)
            self.assertEqual(world.walls.shape[1], 4)
            self.assertGreater(len(world.landmarks), 0)
            for waypoint in world.waypoints:
                self.assertTrue(world.contains(Pose2(*waypoint)))

    def test_unknown_world(self):
        with self.assertRaises(ConfigurationError):
            make_world('castle')

    def test_low_walls(self):
        with self.assertRaises(ConfigurationError):
            make_world('square', wall_height=0.9)

    def test_small_pitch(self):
        with self.assertRaises(ConfigurationError):
            CameraMount(pitch=2.0)

    def test_landmarks_inside(self):
        world = make_world('cluttered', seed=3)
        floor = world.landmarks[world.landmark_on_floor]
        self.assertTrue(all(world.floor.buffer(1e-9).contains(Point(x, y)) for x, y, _ in floor))
        self.assertTrue(np.all(world.landmarks[:, 2] <= 0))

    def test_seeded(self):
        np.testing.assert_array_equal(make_world('square', seed=5).landmarks, make_world('square', seed=5).landmarks)
        self.assertFalse(np.array_equal(make_world('square', seed=5).landmarks,
                                        make_world('square', seed=6).landmarks))

    def test_corridor_range(self):
        self.assertEqual(make_world('corridor').max_range, 3.5)
        self.assertEqual(make_world('corridor', max_range=5.0).max_range, 5.0)

    def test_plan(self):
        plan = make_world('square').plan()
        self.assertEqual(len(plan.walls), 4)
        self.assertEqual(len(plan.corners), 4)
        plan = make_world('cluttered').plan()
        self.assertEqual(len(plan.walls), 12)
        self.assertEqual(len(plan.corners), 12)

    def test_meta(self):
        meta = make_world('corridor').meta()
        self.assertEqual(meta['world'], 'corridor')
        self.assertEqual(meta['lidar_max_range'], 3.5)
        self.assertEqual(meta['image_width'], 1920)


class TestCameraMount(unittest.TestCase):

    def test_alignment(self):
        world = make_world('square')
        alignment = world.alignment
        self.assertAlmostEqual(alignment.delta, world.mount.height)
        np.testing.assert_allclose(alignment.origin, world.mount.offset)

    def test_vertical_lines_meet_at_vanishing_point(self):
        world = make_world('square')
        camera = _Camera(world, Pose2())
        vp = world.mount.vanishing_point(world.intrinsics)
        for x, y in [(2.0, 0.5), (1.5, -1.0), (2.4, 1.2)]:
            pixels = camera.project(camera.to_camera(np.array([[x, y, 0.0], [x, y, -0.8]])))
            first, second = np.append(pixels[0], 1), np.append(pixels[1], 1)
            line = np.cross(first, second)
            self.assertAlmostEqual(line @ [vp.u, vp.v, 1] / np.linalg.norm(line[:2]), 0.0, places=6)

    def test_ground_features_map_through_alignment(self):
        world = make_world('square', noise=NoiseModel.none())
        pose = Pose2(-1.0, 0.5, 0.3)
        view = simulate_camera(world, pose, labels=False)
        ground = [tid for tid in sorted(view.observations) if world.landmark_on_floor[tid]]
        self.assertGreater(len(ground), 5)
        topdown = topdown_frame(view.vp, world.intrinsics)
        points, depths = project_topdown_many(np.array([view.observations[tid] for tid in ground]), topdown)
        self.assertTrue(np.all(depths > 0))
        expected = pose.inverse_transform(world.landmarks[ground, :2])
        np.testing.assert_allclose(world.alignment.apply(points), expected, atol=1e-9)


class TestSimulateScan(unittest.TestCase):

    def test_ranges(self):
        world = make_world('square', noise=NoiseModel.none())
        scan = simulate_scan(world, Pose2())
        self.assertEqual(len(scan.points), world.beams)
        np.testing.assert_allclose(scan.points[world.beams // 2], [2.5, 0.0], atol=1e-12)
        self.assertTrue(np.all(scan.ranges <= math.sqrt(2) * 2.5 + 1e-9))

    def test_heading(self):
        world = make_world('square', noise=NoiseModel.none())
        scan = simulate_scan(world, Pose2(0.0, 0.0, math.pi / 2))
        np.testing.assert_allclose(scan.points[world.beams // 2], [2.5, 0.0], atol=1e-12)
        scan = simulate_scan(world, Pose2(1.0, 0.0, 0.0))
        np.testing.assert_allclose(scan.points[world.beams // 2], [1.5, 0.0], atol=1e-12)

    def test_max_range(self):
        world = make_world('corridor', noise=NoiseModel.none())
        scan = simulate_scan(world, Pose2(6.0, 0.0, 0.0))
        self.assertTrue(np.all(scan.ranges <= 3.5))
        self.assertLess(len(scan.points), world.beams)

    def test_noise(self):
        world = make_world('square', noise=NoiseModel(range_sigma=0.01))
        scan = simulate_scan(world, Pose2(), np.random.default_rng(0))
        self.assertNotAlmostEqual(scan.points[world.beams // 2][0], 2.5, places=6)

    def test_outside(self):
        with self.assertRaises(PoseOutsideWorld):
            simulate_scan(make_world('square'), Pose2(10.0, 0.0, 0.0))


class TestSimulateCamera(unittest.TestCase):

    def test_view(self):
        world = make_world('square', noise=NoiseModel.none())
        view = simulate_camera(world, Pose2(-1.0, 0.0, 0.0), label_stride=16)
        width, height = world.image_size
        for pixel in view.observations.values():
            self.assertTrue(0 <= pixel[0] <= width and 0 <= pixel[1] <= height)
        self.assertEqual(len(view.raw_lines), len(view.line_kinds))
        self.assertIn('boundary', view.line_kinds)
        self.assertIn('vertical', view.line_kinds)
        us, vs = label_grid(world.image_size, 16)
        self.assertEqual(view.labels.shape, (len(vs), len(us)))
        self.assertEqual(view.labels[-1, width // 32], GROUND)
        self.assertTrue(np.any(view.labels >= WALL))

    def test_labels_above_walls(self):
        mount = CameraMount(pitch=-20.0)
        world = make_world('square', noise=NoiseModel.none(), mount=mount, wall_height=1.2)
        view = simulate_camera(world, Pose2(-1.0, 0.0, 0.0), label_stride=16)
        self.assertEqual(view.labels[0, view.labels.shape[1] // 2], UNKNOWN)

    def test_outside(self):
        with self.assertRaises(PoseOutsideWorld):
            simulate_camera(make_world('square'), Pose2(10.0, 0.0, 0.0))


class TestTrajectory(unittest.TestCase):

    def test_waypoints(self):
        spec = TrajectorySpec([(0, 0), (2, 0)], heading_wobble=0, lateral_wobble=0)
        poses = sample_trajectory(spec, np.random.default_rng(0))
        self.assertEqual(poses[0], Pose2(0.0, 0.0, 0.0))
        self.assertEqual(poses[-1], Pose2(2.0, 0.0, 0.0))
        steps = np.diff([pose.x for pose in poses])
        self.assertTrue(np.all(steps > 0))
        self.assertTrue(np.all(steps <= 0.25 + 1e-9))

    def test_turn_in_place(self):
        spec = TrajectorySpec([(0, 0), (1, 0), (1, 1)], heading_wobble=0, lateral_wobble=0, max_turn=10)
        poses = sample_trajectory(spec, np.random.default_rng(0))
        turning = [pose for pose in poses if pose.x == 1.0 and pose.y == 0.0]
        self.assertEqual(len(turning), 9)
        for first, second in zip(poses, poses[1:]):
            self.assertLessEqual(abs(wrap_angle(second.heading - first.heading)), math.radians(10) + 1e-9)

    def test_max_frames(self):
        spec = TrajectorySpec([(0, 0), (2, 0)])
        self.assertEqual(len(sample_trajectory(spec, np.random.default_rng(0), max_frames=3)), 3)

    def test_single_waypoint(self):
        self.assertEqual(sample_trajectory(TrajectorySpec([(1, 2)]), np.random.default_rng(0)),
                         [Pose2(1.0, 2.0, 0.0)])


class TestGenerateSequence(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.world = make_world('square')
        cls.sequence = generate_sequence(cls.world, seed=2, max_frames=5, label_stride=32)

    def test_frames(self):
        self.assertEqual(len(self.sequence.frames), 5)
        self.assertEqual([frame.index for frame in self.sequence.frames], list(range(5)))
        self.assertEqual(len(self.sequence.labels), 5)
        for frame in self.sequence.frames:
            self.assertIsNone(frame.odometry)
            self.assertGreater(len(frame.observations), 0)

    def test_deterministic(self):
        other = generate_sequence(self.world, seed=2, max_frames=5, label_stride=32)
        for first, second in zip(self.sequence.frames, other.frames):
            np.testing.assert_array_equal(first.scan.points, second.scan.points)
            self.assertEqual(sorted(first.observations), sorted(second.observations))
            np.testing.assert_array_equal(first.lines.horizontal, second.lines.horizontal)

    def test_true_odometry(self):
        sequence = generate_sequence(self.world, seed=2, max_frames=5, labels=False)
        self.assertIsNone(sequence.labels)
        sequence.with_true_odometry()
        for num in range(1, 5):
            pose = sequence.poses[num - 1].advance(sequence.frames[num].odometry)
            np.testing.assert_allclose(pose.to_list(), sequence.poses[num].to_list(), atol=1e-12)

    def test_truth(self):
        truth = self.sequence.truth()
        self.assertEqual(len(truth['poses']), 5)
        self.assertEqual(truth['world'], 'square')
        self.assertEqual(truth['seed'], 2)
        self.assertEqual(truth['holes'], [])
        self.assertEqual(len(truth['plan']['walls']), 4)
        ground = self.sequence.ground_tracks()
        self.assertEqual(truth['ground_tracks'], sorted(ground))
        self.assertTrue(all(self.world.landmarks[tid, 2] == 0 for tid in ground))
