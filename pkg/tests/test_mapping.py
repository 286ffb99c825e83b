import math
import unittest

import numpy as np

from layoutfusion.features import ImageLineSet, LidarScan, LineExtractor, LineSegment2, SensorFrame
from layoutfusion.geometry import LidarMotion, Pose2, SimilarityTransform2
from layoutfusion.mapping import *
from layoutfusion.rransac import Hypothesis
from layoutfusion.simulation import NoiseModel, generate_sequence, make_world, simulate_scan
from layoutfusion.solver import central_difference_jacobian


def square_walls(size=5.0):
    half = size / 2
    corners = [(-half, -half), (half, -half), (half, half), (-half, half)]
    return [LineSegment2(corners[num], corners[(num + 1) % 4]) for num in range(4)]


def frame(index, scan=None, odometry=None):
    scan = LidarScan(0.1 * index, np.zeros((0, 2))) if scan is None else scan
    return SensorFrame(index, scan, {}, ImageLineSet(), None, odometry)


class TestTrajectory(unittest.TestCase):

    def test_from_frames(self):
        frames = [frame(0), frame(1, odometry=Pose2(0, 0, 0).motion_to(Pose2(1, 0, math.pi / 2))),
                  frame(2, odometry=Pose2(1, 0, math.pi / 2).motion_to(Pose2(1, 1, math.pi / 2)))]
        trajectory = Trajectory.from_frames(frames)
        self.assertEqual(len(trajectory), 3)
        np.testing.assert_allclose(trajectory[2].to_list(), [1, 1, math.pi / 2], atol=1e-12)

    def test_start(self):
        trajectory = Trajectory.from_frames([frame(0), frame(1)], start=Pose2(1, 2, 0.5))
        self.assertEqual(trajectory[0], Pose2(1, 2, 0.5))
        self.assertEqual(trajectory[1], Pose2(1, 2, 0.5))

    def test_odometry(self):
        poses = [Pose2(0, 0, 0), Pose2(0.3, 0.1, 0.2), Pose2(0.5, 0.4, -0.1)]
        frames = [frame(num, odometry=motion) for num, motion in enumerate(Trajectory(poses).odometry())]
        rebuilt = Trajectory.from_frames(frames)
        np.testing.assert_allclose(rebuilt.as_array(), Trajectory(poses).as_array(), atol=1e-12)

    def test_anchored(self):
        trajectory = Trajectory([Pose2(), Pose2(1, 0, 0)]).anchored(Pose2(0, 0, math.pi / 2))
        np.testing.assert_allclose(trajectory[1].to_list(), [0, 1, math.pi / 2], atol=1e-12)

    def test_dict(self):
        trajectory = Trajectory([Pose2(1, 2, 0.5), Pose2(0, 0, -0.5)])
        restored = Trajectory.from_dict(trajectory.to_dict())
        self.assertEqual(restored.poses, trajectory.poses)


class TestFloorPlan(unittest.TestCase):

    def test_dict(self):
        plan = FloorPlan(square_walls(), [[1, 2]])
        restored = FloorPlan.from_dict(plan.to_dict())
        np.testing.assert_allclose(restored.wall_array(), plan.wall_array())
        np.testing.assert_allclose(restored.corners, [[1, 2]])

    def test_empty(self):
        plan = FloorPlan()
        self.assertEqual(plan.wall_array().shape, (0, 4))
        self.assertEqual(plan.corners.shape, (0, 2))
        self.assertEqual(plan.to_polygons(), [])

    def test_transformed(self):
        plan = FloorPlan(square_walls(), [[2.5, 2.5]]).transformed(Pose2(1, 0, 0))
        np.testing.assert_allclose(plan.corners, [[3.5, 2.5]])
        np.testing.assert_allclose(plan.walls[0].start, [-1.5, -2.5])

    def test_closed_room(self):
        polygons = FloorPlan(square_walls()).to_polygons()
        self.assertEqual(len(polygons), 1)
        self.assertAlmostEqual(polygons[0].area, 25.0, places=6)

    def test_small_gap_closed(self):
        walls = square_walls()
        walls[0] = LineSegment2([-2.5, -2.5], [2.45, -2.5])
        polygons = FloorPlan(walls).to_polygons(close_gap=0.1)
        self.assertEqual(len(polygons), 1)

    def test_open_room(self):
        self.assertEqual(FloorPlan(square_walls()[:3]).to_polygons(), [])

    def test_small_box_dropped(self):
        box = [LineSegment2([0, 0], [0.5, 0]), LineSegment2([0.5, 0], [0.5, 0.5]),
               LineSegment2([0.5, 0.5], [0, 0.5]), LineSegment2([0, 0.5], [0, 0])]
        polygons = FloorPlan(square_walls() + box).to_polygons()
        self.assertEqual(len(polygons), 1)
        self.assertAlmostEqual(polygons[0].area, 25.0, places=6)


class TestMergeSegments(unittest.TestCase):

    def test_collinear(self):
        walls = merge_segments([LineSegment2([0, 0], [1, 0]), LineSegment2([0.8, 0.01], [2, 0.01])])
        self.assertEqual(len(walls), 1)
        self.assertAlmostEqual(walls[0].length, 2.0, places=2)

    def test_gap(self):
        walls = merge_segments([LineSegment2([0, 0], [1, 0]), LineSegment2([2, 0], [3, 0])], gap_tol=0.5)
        self.assertEqual(len(walls), 2)

    def test_perpendicular(self):
        walls = merge_segments([LineSegment2([0, 0], [1, 0]), LineSegment2([1, 0], [1, 1])])
        self.assertEqual(len(walls), 2)

    def test_parallel_offset(self):
        walls = merge_segments([LineSegment2([0, 0], [1, 0]), LineSegment2([0, 0.5], [1, 0.5])])
        self.assertEqual(len(walls), 2)

    def test_reversed(self):
        walls = merge_segments([LineSegment2([1, 0], [0, 0]), LineSegment2([0.5, 0], [2, 0])])
        self.assertEqual(len(walls), 1)
        self.assertGreater(walls[0].end[0], walls[0].start[0])

    def test_empty(self):
        self.assertEqual(merge_segments([]), [])

    def _corner_fragment(self):
        horizontal = np.column_stack([np.arange(81) * 0.05, np.zeros(81)])
        vertical = np.column_stack([np.full(61, 4.0), np.arange(61) * 0.05])
        fragment = np.array([[3.7, 0], [3.75, 0], [3.8, 0], [3.85, 0], [3.9, 0], [3.95, 0],
                             [4.0, 0.05], [4.0, 0.1], [4.0, 0.15]])
        return [LineSegment2(points[0], points[-1], len(points), 0.0, points)
                for points in (horizontal, fragment, vertical)]

    def test_absorbs_corner_fragment(self):
        walls = merge_segments(self._corner_fragment())
        self.assertEqual(len(walls), 2)
        self.assertEqual(sorted(wall.inlier_count for wall in walls), [64, 87])
        for wall in walls:
            self.assertAlmostEqual(wall.rms, 0.0, places=9)

    def test_absorb_disabled(self):
        self.assertEqual(len(merge_segments(self._corner_fragment(), absorb_tol=0)), 3)


class TestFindCorners(unittest.TestCase):

    def test_l_shape(self):
        walls, corners = find_corners([LineSegment2([0, 0], [2, 0]), LineSegment2([2.1, 0.1], [2.1, 2])])
        np.testing.assert_allclose(walls[0].end, [2.1, 0])
        np.testing.assert_allclose(walls[1].start, [2.1, 0])
        self.assertEqual(len(corners), 3)
        self.assertTrue(any(np.allclose(corner, [2.1, 0]) for corner in corners))

    def test_input_unchanged(self):
        original = [LineSegment2([0, 0], [2, 0]), LineSegment2([2.1, 0.1], [2.1, 2])]
        find_corners(original)
        np.testing.assert_allclose(original[0].end, [2, 0])

    def test_far_apart(self):
        _, corners = find_corners([LineSegment2([0, 0], [1, 0]), LineSegment2([3, 1], [3, 2])])
        self.assertEqual(len(corners), 4)

    def test_shallow_angle(self):
        walls = [LineSegment2([0, 0], [1, 0]), LineSegment2([1, 0], [2, math.tan(math.radians(10))])]
        _, corners = find_corners(walls)
        self.assertEqual(len(corners), 3)

    def test_square(self):
        _, corners = find_corners(square_walls())
        self.assertEqual(len(corners), 4)


class TestIntegrateScans(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        world = make_world('square', noise=NoiseModel.none())
        cls.sequence = generate_sequence(world, max_frames=6, labels=False)
        cls.sequence.with_true_odometry()

    def test_square_room(self):
        plan = integrate_scans(self.sequence.frames, self.sequence.trajectory)
        self.assertEqual(len(plan.walls), 4)
        self.assertEqual(len(plan.corners), 4)
        for corner in [(-2.5, -2.5), (2.5, -2.5), (2.5, 2.5), (-2.5, 2.5)]:
            self.assertLess(np.min(np.linalg.norm(plan.corners - corner, axis=1)), 0.01)
        polygons = plan.to_polygons()
        self.assertEqual(len(polygons), 1)
        self.assertAlmostEqual(polygons[0].area, 25.0, delta=0.2)

    def test_single_scan_any_heading(self):
        world = self.sequence.world
        truth = world.plan().corners
        for degrees in range(0, 360, 5):
            with self.subTest(heading=degrees):
                pose = Pose2(0.3, 0.2, math.radians(degrees))
                plan = integrate_scans([frame(0, simulate_scan(world, pose))], Trajectory([pose]))
                self.assertEqual(len(plan.walls), 4)
                self.assertEqual(len(plan.corners), 4)
                for corner in truth:
                    self.assertLess(np.min(np.linalg.norm(plan.corners - corner, axis=1)), 0.01)

    def test_odometry_trajectory(self):
        trajectory = Trajectory.from_frames(self.sequence.frames, start=self.sequence.poses[0])
        plan = integrate_scans(self.sequence.frames, trajectory)
        self.assertEqual(len(plan.walls), 4)

    def test_short_trajectory(self):
        with self.assertRaises(ValueError):
            integrate_scans(self.sequence.frames, Trajectory([Pose2()]))

    def test_no_segments(self):
        plan = integrate_scans([frame(0)], Trajectory([Pose2()]))
        self.assertEqual(plan.walls, [])


class TestNoisyIntegration(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.sequence = generate_sequence(make_world('square'), max_frames=30, labels=False)

    def test_square_room(self):
        plan = integrate_scans(self.sequence.frames, self.sequence.trajectory)
        self.assertEqual(len(plan.walls), 4)
        self.assertEqual(len(plan.corners), 4)
        for corner in self.sequence.world.plan().corners:
            self.assertLess(np.min(np.linalg.norm(plan.corners - corner, axis=1)), 0.05)

    def test_single_scans(self):
        extractor = LineExtractor()
        for frame_ in self.sequence.frames[:10]:
            with self.subTest(frame=frame_.index):
                segments = extractor.extract(frame_.scan)
                self.assertLessEqual(len(segments), 5)
                self.assertGreaterEqual(sum(segment.length > 3.0 for segment in segments), 4)


class TestFreeSpace(unittest.TestCase):

    def setUp(self):
        self.scan = simulate_scan(make_world('square', noise=NoiseModel.none()), Pose2())

    def test_inside(self):
        mask = free_space_mask([[1, 0], [0, -2.0], [2.52, 0]], self.scan, tolerance=0.05)
        self.assertTrue(mask.all())

    def test_behind_wall(self):
        mask = free_space_mask([[3.0, 0], [0, 4.0]], self.scan, tolerance=0.05)
        self.assertFalse(mask.any())

    def test_no_returns(self):
        scan = LidarScan(0.0, [[1.0, 0.0]])
        mask = free_space_mask([[3.0, 0], [0, 7.0]], scan, max_range=6.0)
        np.testing.assert_array_equal(mask, [True, False])


class TestFusedRefinement(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        world = make_world('square')
        cls.sequence = generate_sequence(world, seed=1, max_frames=8, labels=False)
        cls.sequence.with_true_odometry()
        cls.trajectory = cls.sequence.trajectory

    def test_jacobian(self):
        refiner = FusedRefiner(point_stride=9)
        problem = refiner.problem(self.sequence.frames, self.trajectory, self.sequence.alignment,
                                  self.sequence.world.intrinsics)
        self.assertGreater(len(problem.lidar_points), 0)
        self.assertGreater(len(problem.epi_first), 0)
        self.assertGreater(len(problem.tr_first), 0)
        rng = np.random.default_rng(0)
        params = problem.initial() + rng.normal(0, 0.01, problem.size)
        analytic = problem.jacobian(params).toarray()
        numeric = central_difference_jacobian(problem.residuals, params)
        self.assertEqual(analytic.shape, (len(problem.residuals(params)), problem.size))
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-4)

    def test_initial_parameters(self):
        problem = FusedRefiner().problem(self.sequence.frames, self.trajectory, self.sequence.alignment,
                                         self.sequence.world.intrinsics)
        poses = problem.poses(problem.initial())
        np.testing.assert_allclose(Trajectory(poses).as_array(), self.trajectory.as_array(), atol=1e-12)

    def test_refine(self):
        refiner = FusedRefiner()
        refined, plan = refiner.refine(self.sequence.frames, self.trajectory, self.sequence.alignment,
                                       self.sequence.world.intrinsics)
        self.assertEqual(len(refined), len(self.trajectory))
        self.assertEqual(refined[0], self.trajectory[0])
        self.assertIn(refiner.report['status'], ('converged', 'stopped'))
        self.assertLessEqual(refiner.report['final_cost'], refiner.report['initial_cost'])
        self.assertGreater(refiner.report['lidar_residuals'], 0)
        self.assertGreater(len(plan.walls), 0)

    def _refine(self, hypothesis, **kwargs):
        refiner = FusedRefiner(**kwargs)
        refined, plan = refiner.refine(self.sequence.frames, self.trajectory, hypothesis,
                                       self.sequence.world.intrinsics)
        return refiner, refined, plan

    def test_camera_terms_accepted(self):
        refiner, _, _ = self._refine(self.sequence.alignment)
        self.assertTrue(refiner.report['camera'])
        self.assertEqual(refiner.report['gate'], 'accepted')
        self.assertGreater(refiner.report['epipolar_support'], 0.9)
        self.assertGreater(refiner.report['transfer_support'], 0.9)
        self.assertLessEqual(refiner.report['fused_lidar_cost'], 1.5 * refiner.report['lidar_cost'])

    def test_low_score_hypothesis(self):
        hypothesis = Hypothesis(self.sequence.alignment, inlier_count=5, pairs_evaluated=10, frames_evaluated=5)
        refiner, _, _ = self._refine(hypothesis)
        self.assertFalse(refiner.report['camera'])
        self.assertEqual(refiner.report['gate'], 'score')
        self.assertNotIn('epipolar_support', refiner.report)

    def test_wrong_alignment_falls_back(self):
        truth = self.sequence.alignment
        wrong = SimilarityTransform2(truth.delta, truth.phi + math.radians(30), truth.origin)
        refiner, refined, _ = self._refine(wrong)
        self.assertFalse(refiner.report['camera'])
        untrusted = Hypothesis(truth, inlier_count=0, pairs_evaluated=10)
        _, lidar_only, _ = self._refine(untrusted)
        np.testing.assert_allclose(refined.as_array(), lidar_only.as_array())

    def test_optimized_walls(self):
        refiner, _, plan = self._refine(self.sequence.alignment)
        problem = refiner.problem(self.sequence.frames, self.trajectory, self.sequence.alignment,
                                  self.sequence.world.intrinsics)
        _, _, alphas, offsets = problem.unpack(refiner.result.x)
        self.assertEqual(len(plan.walls), len(alphas))
        for wall, alpha, offset in zip(plan.walls, alphas, offsets):
            np.testing.assert_allclose(wall.normal, [math.cos(alpha), math.sin(alpha)], atol=1e-9)
            self.assertAlmostEqual(wall.offset, offset, places=9)
            self.assertGreater(wall.inlier_count, 0)

    def test_single_frame(self):
        refiner = FusedRefiner()
        refined, _ = refiner.refine(self.sequence.frames[:1], self.trajectory, self.sequence.alignment,
                                    self.sequence.world.intrinsics)
        self.assertEqual(refiner.report['status'], 'skipped')
        self.assertIs(refined, self.trajectory)

    def test_function(self):
        refined, _ = fused_refine(self.sequence.frames[:3], Trajectory(self.trajectory.poses[:3]),
                                  self.sequence.alignment, self.sequence.world.intrinsics, max_iter=2)
        self.assertEqual(len(refined), 3)
