import dataclasses
import math
import unittest

import numpy as np

from layoutfusion import NoValidMotion, RankDeficient, SkippedPair
from layoutfusion.features import ImageLineSet, LidarScan, SensorFrame
from layoutfusion.geometry import LidarMotion, Pose2, SimilarityTransform2
from layoutfusion.rransac import *
from layoutfusion.simulation import NoiseModel, generate_sequence, make_world


def noise_free_sequence(frames=30, seed=0):
    world = make_world('square', seed=seed, noise=NoiseModel.none())
    sequence = generate_sequence(world, seed=seed, max_frames=frames, labels=False)
    sequence.with_true_odometry()
    return sequence


class TestHypothesis(unittest.TestCase):

    def test_score(self):
        hypothesis = Hypothesis(SimilarityTransform2.identity())
        self.assertEqual(hypothesis.score, 0.0)
        hypothesis = dataclasses.replace(hypothesis, inlier_count=3, pairs_evaluated=4)
        self.assertAlmostEqual(hypothesis.score, 0.75)

    def test_dict(self):
        hypothesis = Hypothesis(SimilarityTransform2(2.0, 0.5, [1, 2]), 7, 3, 4, 2, 11, frozenset({'optimized'}))
        record = hypothesis.to_dict()
        self.assertEqual(record['flags'], ['optimized'])
        self.assertEqual(record['score'], 0.75)
        restored = Hypothesis.from_dict(record)
        self.assertEqual(restored.to_dict(), record)


class TestGenerateHypotheses(unittest.TestCase):

    def _frames(self, motions):
        vp = make_world('square').mount.vanishing_point(make_world('square').intrinsics)
        return [SensorFrame(num, LidarScan(0.1 * num, np.zeros((0, 2))), {}, ImageLineSet(), vp, motion)
                for num, motion in enumerate(motions)]

    def test_zero_budget(self):
        frames = self._frames([LidarMotion.identity()] * 3)
        self.assertEqual(generate_hypotheses(frames, 0, np.random.default_rng(0), None, 1080), [])

    def test_too_few_frames(self):
        frames = self._frames([LidarMotion.identity()] * 2)
        with self.assertRaises(NoValidMotion):
            generate_hypotheses(frames, 5, np.random.default_rng(0), make_world('square').intrinsics, 1080)

    def test_straight_line(self):
        frames = self._frames([LidarMotion(0.0, [-0.1, 0.0])] * 5)
        with self.assertRaises(NoValidMotion):
            generate_hypotheses(frames, 5, np.random.default_rng(0), make_world('square').intrinsics, 1080)

    def test_exact_hypotheses(self):
        sequence = noise_free_sequence()
        frames = sequence.frames[10:18]
        hypotheses = generate_hypotheses(frames, 25, np.random.default_rng(0), sequence.world.intrinsics, 1080)
        self.assertEqual([hyp.hypothesis_id for hyp in hypotheses], list(range(len(hypotheses))))
        self.assertGreater(len(hypotheses), 0)
        self.assertTrue(any(hyp.transform.close_to(sequence.alignment, 1e-6, 1e-6, 1e-6) for hyp in hypotheses))
        for hypothesis in hypotheses:
            self.assertEqual(hypothesis.last_support_frame, frames[-1].index)


class TestEvaluateHypothesis(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.sequence = noise_free_sequence()

    def test_true_alignment(self):
        frames = self.sequence.frames
        hypothesis = Hypothesis(self.sequence.alignment)
        hypothesis = evaluate_hypothesis(hypothesis, frames[3], frames[4], self.sequence.world.intrinsics)
        self.assertEqual(hypothesis.frames_evaluated, 1)
        self.assertGreater(hypothesis.pairs_evaluated, 8)
        self.assertEqual(hypothesis.inlier_count, hypothesis.pairs_evaluated)
        self.assertEqual(hypothesis.last_support_frame, 4)

    def test_wrong_alignment(self):
        frames = self.sequence.frames
        truth = self.sequence.alignment
        wrong = SimilarityTransform2(truth.delta * 1.5, truth.phi + 0.3, truth.origin + [0.5, -0.3])
        hypothesis = evaluate_hypothesis(Hypothesis(wrong), frames[3], frames[4], self.sequence.world.intrinsics)
        self.assertLess(hypothesis.score, 0.5)
        self.assertEqual(hypothesis.last_support_frame, -1)

    def test_too_few_tracks(self):
        frames = self.sequence.frames
        with self.assertRaises(SkippedPair):
            evaluate_hypothesis(Hypothesis(self.sequence.alignment), frames[3], frames[4],
                                self.sequence.world.intrinsics, min_pairs=100000)

    def test_missing_motion(self):
        frames = self.sequence.frames
        with self.assertRaises(ValueError):
            evaluate_hypothesis(Hypothesis(self.sequence.alignment), frames[3], frames[5],
                                self.sequence.world.intrinsics)

    def test_small_baseline_skipped(self):
        frames = self.sequence.frames
        truth = self.sequence.alignment
        origin = np.asarray(truth.origin, dtype=float)
        rotation = LidarMotion(0.2, [0.0, 0.0]).rotation
        motion = LidarMotion(0.2, origin - rotation @ origin + [0.02, 0.0])
        with self.assertRaises(SkippedPair):
            evaluate_hypothesis(Hypothesis(truth), frames[3], frames[4], self.sequence.world.intrinsics,
                                motion=motion, min_baseline=0.05)
        hypothesis = evaluate_hypothesis(Hypothesis(truth), frames[3], frames[4], self.sequence.world.intrinsics,
                                         motion=motion)
        self.assertEqual(hypothesis.frames_evaluated, 1)


def noisy_sequence(frames=40, seed=0, noise=None):
    world = make_world('square', seed=seed, noise=noise)
    sequence = generate_sequence(world, seed=seed, max_frames=frames, labels=False)
    sequence.with_true_odometry()
    return sequence


def sequence_support(sequence, transform, settings=None):
    """Inlier fraction of a fixed transform over consecutive frames"""
    settings = TrackerSettings() if settings is None else settings
    hypothesis = Hypothesis(transform)
    frames = sequence.frames
    for previous, frame in zip(frames[:-1], frames[1:]):
        try:
            hypothesis = evaluate_hypothesis(hypothesis, previous, frame, sequence.world.intrinsics, settings.tau,
                                             min_pairs=settings.min_pairs, min_baseline=settings.min_baseline)
        except SkippedPair:
            continue
    return hypothesis


class TestInlierThreshold(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.sequence = noisy_sequence()

    def test_true_alignment_supported(self):
        hypothesis = sequence_support(self.sequence, self.sequence.alignment)
        self.assertGreaterEqual(hypothesis.frames_evaluated, 20)
        self.assertGreaterEqual(hypothesis.score, 0.9)

    def test_one_pixel_noise(self):
        sequence = noisy_sequence(noise=NoiseModel(0.01, 1.0, 0.1))
        self.assertGreaterEqual(sequence_support(sequence, sequence.alignment).score, 0.9)

    def test_rotated_alignment_rejected(self):
        truth = self.sequence.alignment
        rotated = SimilarityTransform2(truth.delta, truth.phi + math.radians(30), truth.origin)
        self.assertLess(sequence_support(self.sequence, rotated).score, 0.3)

    def test_calibrate(self):
        frames = self.sequence.frames
        tau = calibrate_tau(frames, self.sequence.alignment, self.sequence.world.intrinsics)
        self.assertGreater(tau, 0.0)
        settings = TrackerSettings(tau=tau)
        self.assertGreaterEqual(sequence_support(self.sequence, self.sequence.alignment, settings).score, 0.94)

    def test_calibrate_noise_free(self):
        sequence = noise_free_sequence()
        self.assertLess(calibrate_tau(sequence.frames, sequence.alignment, sequence.world.intrinsics), 1e-12)

    def test_calibrate_without_pairs(self):
        with self.assertRaises(NoValidMotion):
            calibrate_tau(self.sequence.frames[:1], self.sequence.alignment, self.sequence.world.intrinsics)


class TestRefitHypothesis(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.sequence = noise_free_sequence()
        cls.frames = cls.sequence.frames[12:20]
        poses = [Pose2()]
        for frame in cls.frames[1:]:
            poses.append(poses[-1].advance(frame.odometry))
        cls.transfers = ground_transfers(cls.frames, poses, cls.sequence.world.intrinsics)

    def test_transfers_of_truth(self):
        self.assertGreater(len(self.transfers), 16)
        errors = self.transfers.residuals(self.sequence.alignment)
        self.assertGreater(np.count_nonzero(errors < 1e-6), 16)

    def test_recovers_perturbed(self):
        truth = self.sequence.alignment
        start = SimilarityTransform2(truth.delta * 1.03, truth.phi + math.radians(0.5), truth.origin + [0.03, -0.02])
        result = refit_hypothesis(Hypothesis(start, 5), self.transfers, iterations=5)
        self.assertEqual(result.hypothesis_id, 5)
        self.assertIn('refit', result.flags)
        self.assertTrue(result.transform.close_to(truth, 1e-3, math.radians(0.1), 5e-3))

    def test_too_few_inliers(self):
        hypothesis = Hypothesis(self.sequence.alignment)
        self.assertIs(refit_hypothesis(hypothesis, self.transfers, min_inliers=10 ** 6), hypothesis)
        empty = ground_transfers(self.frames[:1], [Pose2()], self.sequence.world.intrinsics)
        self.assertEqual(len(empty), 0)
        self.assertIs(refit_hypothesis(hypothesis, empty), hypothesis)


class TestSelectBest(unittest.TestCase):

    def setUp(self):
        self.state = TrackerState(None, 1080)

    def _add(self, hypothesis_id, inliers, pairs, frames):
        self.state.hypotheses.append(Hypothesis(SimilarityTransform2.identity(), hypothesis_id, inliers, pairs,
                                                frames))

    def test_empty(self):
        self.assertIsNone(select_best(self.state))

    def test_immature(self):
        self._add(0, 10, 10, 4)
        self.assertIsNone(select_best(self.state))
        self.assertEqual(select_best(self.state, min_maturity=4).hypothesis_id, 0)

    def test_highest_score(self):
        self._add(0, 5, 10, 5)
        self._add(1, 9, 10, 5)
        self._add(2, 10, 10, 1)
        self.assertEqual(select_best(self.state).hypothesis_id, 1)

    def test_ties(self):
        self._add(0, 5, 10, 5)
        self._add(1, 10, 20, 5)
        self._add(2, 10, 20, 6)
        self.assertEqual(select_best(self.state).hypothesis_id, 1)


class TestRansacStep(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.sequence = noise_free_sequence()

    def test_true_hypothesis_survives(self):
        world = self.sequence.world
        state = TrackerState(world.intrinsics, world.image_size[1])
        state.hypotheses.append(Hypothesis(self.sequence.alignment, 0, last_support_frame=0))
        state.next_id = 1
        for frame in self.sequence.frames:
            state = rransac_step(state, frame)
            self.assertLessEqual(len(state.hypotheses), state.settings.capacity)
            self.assertIn(0, [hyp.hypothesis_id for hyp in state.hypotheses])
        truth = [hyp for hyp in state.hypotheses if hyp.hypothesis_id == 0][0]
        self.assertGreaterEqual(truth.frames_evaluated, 15)
        self.assertGreater(truth.score, 0.9)
        self.assertEqual(len(state.frames), state.settings.window)

    def test_first_frames(self):
        world = self.sequence.world
        state = TrackerState(world.intrinsics, world.image_size[1])
        for frame in self.sequence.frames[:2]:
            rransac_step(state, frame)
        self.assertEqual(state.hypotheses, [])
        self.assertEqual(state.next_id, 0)


class TestTracker(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.sequence = noise_free_sequence()

    def _tracker(self, seed=0, **settings):
        world = self.sequence.world
        return AlignmentTracker(world.intrinsics, world.image_size, seed=seed, **settings)

    def test_recovers_alignment(self):
        tracker = self._tracker()
        best = tracker.run(self.sequence.frames)
        self.assertIsNotNone(best)
        self.assertTrue(best.transform.close_to(self.sequence.alignment, 1e-3, math.radians(0.1), 1e-3))
        self.assertGreaterEqual(best.frames_evaluated, 5)
        self.assertGreater(best.score, 0.9)

    def test_deterministic(self):
        first = self._tracker(seed=3).run(self.sequence.frames)
        second = self._tracker(seed=3).run(self.sequence.frames)
        self.assertEqual(first.to_dict(), second.to_dict())

    def test_capacity(self):
        tracker = self._tracker(capacity=3, promote_thresh=1.1)
        for frame in self.sequence.frames:
            state = tracker.step(frame)
            self.assertLessEqual(len(state.hypotheses), 3)

    def test_telemetry(self):
        tracker = self._tracker()
        tracker.run(self.sequence.frames)
        self.assertGreater(len(tracker.telemetry), 0)
        record = tracker.telemetry[-1]
        self.assertEqual(set(record), {'frame', 'id', 'score', 'inliers', 'pairs', 'frames', 'transform'})

    def test_reset(self):
        tracker = self._tracker()
        tracker.run(self.sequence.frames[:20])
        telemetry = len(tracker.telemetry)
        tracker.reset()
        self.assertEqual(tracker.state.hypotheses, [])
        self.assertEqual(len(tracker.state.frames), 0)
        self.assertEqual(len(tracker.telemetry), telemetry)
        self.assertIsNone(tracker.best())

    def test_zero_budget(self):
        tracker = self._tracker(budget=0)
        self.assertIsNone(tracker.run(self.sequence.frames))
        self.assertEqual(tracker.state.next_id, 0)


class TestOptimizeHypothesis(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.sequence = noise_free_sequence()
        world = cls.sequence.world
        truth = Hypothesis(cls.sequence.alignment)
        cls.associations = []
        for frame in cls.sequence.frames[:4]:
            cls.associations.extend(identify_boundaries(truth, frame, world.intrinsics, world.image_size))

    def test_associations(self):
        self.assertGreater(len(self.associations), 1)
        for assoc in self.associations:
            self.assertLess(assoc.distance, 0.5)

    def test_recovers_from_perturbation(self):
        truth = self.sequence.alignment
        start = SimilarityTransform2(truth.delta * 1.05, truth.phi + math.radians(2), truth.origin + [0.05, -0.03])
        result = optimize_hypothesis(Hypothesis(start, 4), self.associations)
        self.assertIn('optimized', result.flags)
        self.assertEqual(result.hypothesis_id, 4)
        self.assertTrue(result.transform.close_to(truth, 1e-6, 1e-6, 1e-6))

    def test_no_associations(self):
        hypothesis = Hypothesis(self.sequence.alignment, 2)
        with self.assertRaises(RankDeficient) as context:
            optimize_hypothesis(hypothesis, [])
        self.assertIn('rank_deficient', context.exception.hypothesis.flags)
        self.assertIs(context.exception.hypothesis.transform, hypothesis.transform)

    def test_parallel_lines(self):
        normals = {}
        for assoc in self.associations:
            normals.setdefault(round(abs(math.cos(assoc.segment.angle)), 3), []).append(assoc)
        parallel = max(normals.values(), key=len)
        with self.assertRaises(RankDeficient):
            optimize_hypothesis(Hypothesis(self.sequence.alignment), parallel)
