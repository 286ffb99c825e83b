"""Recursive RANSAC over camera/LiDAR alignment hypotheses"""

import collections
import dataclasses
import logging
import math

import numpy as np
from tqdm import tqdm

from . import CoincidentPoints, DegenerateVanishingPoint, NoValidMotion, RankDeficient, SkippedPair, ZeroTranslation
from .features import LineExtractor, LineSegment2, TrackStore
from .geometry import J2, HORIZON_EPSILON, ROTATION_EPSILON, LidarMotion, PointPair2, Pose2, \
    SimilarityTransform2, camera_motion_from_hypothesis, epipolar_residuals, fundamental_matrix, \
    motion_constraint_pair, project_topdown_many, rot2, similarity_from_pairs, topdown_frame, wrap_angle
from .solver import LevenbergMarquardt


logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True, eq=False)
class Hypothesis:
    """Alignment hypothesis with its accumulated epipolar support"""

    transform: SimilarityTransform2
    hypothesis_id: int = 0
    inlier_count: int = 0
    pairs_evaluated: int = 0
    frames_evaluated: int = 0
    last_support_frame: int = -1
    flags: frozenset = frozenset()

    @property
    def score(self):
        """Inliers per evaluated feature pair"""
        if not self.pairs_evaluated:
            return 0.0
        return self.inlier_count / self.pairs_evaluated

    def to_dict(self):
        return {'id': self.hypothesis_id, 'transform': self.transform.to_dict(),
                'inlier_count': self.inlier_count, 'pairs_evaluated': self.pairs_evaluated,
                'frames_evaluated': self.frames_evaluated, 'last_support_frame': self.last_support_frame,
                'score': self.score, 'flags': sorted(self.flags)}

    @classmethod
    def from_dict(cls, data):
        return cls(SimilarityTransform2.from_dict(data['transform']), data.get('id', 0),
                   data.get('inlier_count', 0), data.get('pairs_evaluated', 0),
                   data.get('frames_evaluated', 0), data.get('last_support_frame', -1),
                   frozenset(data.get('flags', [])))


@dataclasses.dataclass
class TrackerSettings:
    """Thresholds of the hypothesis tracker"""

    window: int = 8
    budget: int = 25
    capacity: int = 20
    stale_age: int = 10
    promote_thresh: float = 0.7
    min_maturity: int = 5
    min_pairs: int = 8
    tau: float = 3e-7
    min_baseline: float = 0.05
    support_fraction: float = 0.5
    rotation_epsilon: float = 0.5
    gamma: float = 2.0
    duplicate_scale: float = 0.01
    duplicate_angle: float = 0.5
    duplicate_origin: float = 0.02
    assoc_thresh: float = 5.0
    refit: bool = True
    refit_thresh: float = 0.03
    refit_floor: float = 0.002
    refit_min_inliers: int = 16
    refit_rotation: float = 2.0
    refit_iterations: int = 3


@dataclasses.dataclass(eq=False)
class TrackerState:
    """Hypothesis bank and the recent frames it is evaluated on"""

    intrinsics: object
    image_height: int
    settings: TrackerSettings = dataclasses.field(default_factory=TrackerSettings)
    seed: int = 0
    hypotheses: list = dataclasses.field(default_factory=list)
    next_id: int = 0
    last_pose: Pose2 = None
    telemetry: list = dataclasses.field(default_factory=list)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self.frames = collections.deque(maxlen=self.settings.window)
        self.poses = collections.deque(maxlen=self.settings.window)
        self.tracks = TrackStore(self.image_height, self.settings.gamma)


def _integrate(frames):
    poses = [Pose2()]
    for frame in frames[1:]:
        poses.append(poses[-1].advance(frame.odometry if frame.odometry is not None else LidarMotion.identity()))
    return poses


def _topdown(frame, intrinsics, cache=None):
    if cache is not None and frame.index in cache:
        return cache[frame.index]
    try:
        value = topdown_frame(frame.vp, intrinsics)
    except DegenerateVanishingPoint as err:
        logger.debug("frame %s: %s", frame.index, err)
        value = None
    if cache is not None:
        cache[frame.index] = value
    return value


@dataclasses.dataclass(eq=False)
class _ScanPair:
    first: int
    second: int
    motion: LidarMotion
    shared: list

    @property
    def rotation(self):
        return abs(self.motion.angle)

    @property
    def center(self):
        return np.linalg.solve(np.eye(2) - self.motion.rotation, self.motion.translation)


def _scan_pairs(frames, poses, topdowns, rotation_epsilon):
    pairs = []
    for first in range(len(frames)):
        for second in range(first + 1, len(frames)):
            motion = poses[first].motion_to(poses[second])
            if abs(motion.angle) <= rotation_epsilon:
                continue
            if topdowns[first] is None or topdowns[second] is None:
                continue
            shared = TrackStore.shared(frames[first], frames[second])
            if shared:
                pairs.append(_ScanPair(first, second, motion, shared))
    pairs.sort(key=lambda pair: (-pair.rotation, pair.first, pair.second))
    return pairs


def generate_hypotheses(frames, budget, rng, intrinsics, image_height, tracks=None, gamma=2.0,
                        rotation_epsilon=ROTATION_EPSILON, start_id=0):
    """Hypotheses from motion-constrained minimal subsets

    The two scan pairs are the one with the largest rotation and the one
    whose instantaneous center of rotation is farthest from the first's,
    weighted by rotation. Each draw takes one tracked feature per pair,
    sampled by weight_track. Draws with a feature at or above the horizon
    or with coincident points are discarded; at most 4 x budget draws are
    made.

    """
    if budget <= 0:
        return []
    frames = list(frames)
    if len(frames) < 3:
        raise NoValidMotion(f"{len(frames)} frames given, at least 3 needed")
    poses = _integrate(frames)
    topdowns = [_topdown(frame, intrinsics) for frame in frames]
    pairs = _scan_pairs(frames, poses, topdowns, rotation_epsilon)
    if len(pairs) < 2:
        raise NoValidMotion(f"{len(pairs)} scan pairs rotate more than {math.degrees(rotation_epsilon):.2f} deg "
                            f"in frames {frames[0].index}-{frames[-1].index}")
    first = pairs[0]
    second = max(pairs[1:], key=lambda pair: np.linalg.norm(pair.center - first.center)
                 * min(pair.rotation, first.rotation))
    if tracks is None:
        tracks = TrackStore(image_height, gamma)
        for frame in frames:
            tracks.update(frame)
    probabilities = []
    for pair in (first, second):
        weights = tracks.weights(pair.shared)
        if weights.sum() <= 0:
            weights = np.ones(len(pair.shared))
        probabilities.append(weights / weights.sum())
    hypotheses = []
    draws = 0
    while len(hypotheses) < budget and draws < 4 * budget:
        draws += 1
        point_pairs = []
        for pair, prob in zip((first, second), probabilities):
            track_id = pair.shared[rng.choice(len(pair.shared), p=prob)]
            source, depth_i = project_topdown_many(frames[pair.first].pixels([track_id]), topdowns[pair.first])
            target, depth_j = project_topdown_many(frames[pair.second].pixels([track_id]), topdowns[pair.second])
            if depth_i[0] <= HORIZON_EPSILON or depth_j[0] <= HORIZON_EPSILON:
                break
            point_pairs.append(motion_constraint_pair(pair.motion, source[0], target[0], rotation_epsilon))
        if len(point_pairs) < 2:
            continue
        try:
            transform = similarity_from_pairs(*point_pairs)
        except CoincidentPoints as err:
            logger.debug("discarded draw: %s", err)
            continue
        hypotheses.append(Hypothesis(transform, start_id + len(hypotheses),
                                     last_support_frame=frames[-1].index))
    logger.debug("generated %s hypotheses in %s draws", len(hypotheses), draws)
    return hypotheses


def _line_intersections(lines, min_angle):
    """Intersections of pairs of (N, 4) lines crossing at least min_angle"""
    points = []
    for idx in range(len(lines)):
        for jdx in range(idx + 1, len(lines)):
            a1, a2 = lines[idx, :2], lines[idx, 2:]
            b1, b2 = lines[jdx, :2], lines[jdx, 2:]
            da, db = a2 - a1, b2 - b1
            cross = da[0] * db[1] - da[1] * db[0]
            sine = abs(cross) / max(np.linalg.norm(da) * np.linalg.norm(db), 1e-300)
            if sine < math.sin(min_angle):
                continue
            along = ((b1 - a1)[0] * db[1] - (b1 - a1)[1] * db[0]) / cross
            points.append(a1 + along * da)
    return np.array(points).reshape(-1, 2)


def generate_baseline_hypotheses(frame, budget, rng, intrinsics, segments=None, min_angle=30.0):
    """Hypotheses from random boundary-intersection / LiDAR-corner pairings

    Two intersections of horizontal boundary candidates, lifted to the
    top-down plane, are paired with two randomly chosen intersections of
    the frame's LiDAR segments.

    """
    if budget <= 0:
        return []
    topdown = topdown_frame(frame.vp, intrinsics)
    lines = frame.lines.horizontal
    if len(lines):
        starts, depth_s = project_topdown_many(lines[:, :2], topdown)
        ends, depth_e = project_topdown_many(lines[:, 2:], topdown)
        valid = (depth_s > HORIZON_EPSILON) & (depth_e > HORIZON_EPSILON)
        lifted = np.hstack([starts, ends])[valid]
    else:
        lifted = np.zeros((0, 4))
    sources = _line_intersections(lifted, math.radians(min_angle))
    if segments is None:
        segments = frame.segments if frame.segments is not None else LineExtractor().extract(frame.scan)
    corners = _line_intersections(np.array([seg.as_array() for seg in segments]).reshape(-1, 4),
                                  math.radians(min_angle))
    if len(sources) < 2 or len(corners) < 2:
        return []
    hypotheses = []
    for _ in range(budget):
        src = rng.choice(len(sources), size=2, replace=False)
        dst = rng.choice(len(corners), size=2, replace=False)
        try:
            transform = similarity_from_pairs(PointPair2(sources[src[0]], corners[dst[0]]),
                                              PointPair2(sources[src[1]], corners[dst[1]]))
        except CoincidentPoints:
            continue
        hypotheses.append(Hypothesis(transform, len(hypotheses), last_support_frame=frame.index))
    return hypotheses


def _pair_scores(transform, frame_i, frame_j, intrinsics, motion, min_pairs, min_baseline, topdown):
    if motion is None:
        if frame_j.odometry is None or frame_j.index != frame_i.index + 1:
            raise ValueError(f"no motion given between frames {frame_i.index} and {frame_j.index}")
        motion = frame_j.odometry
    shared = TrackStore.shared(frame_i, frame_j)
    if len(shared) < min_pairs:
        raise SkippedPair(f"frames {frame_i.index}-{frame_j.index} share {len(shared)} tracks")
    baseline = np.linalg.norm(motion.rotation @ transform.origin + motion.translation - transform.origin)
    if baseline < min_baseline:
        raise SkippedPair(f"frames {frame_i.index}-{frame_j.index}: camera moves {baseline:.3f} m")
    if topdown is None:
        try:
            topdown = topdown_frame(frame_i.vp, intrinsics)
        except DegenerateVanishingPoint as err:
            raise SkippedPair(f"frame {frame_i.index}: {err}") from err
    rotation, translation = camera_motion_from_hypothesis(transform, topdown, motion)
    try:
        fmatrix = fundamental_matrix(rotation, translation, intrinsics)
    except ZeroTranslation as err:
        raise SkippedPair(f"frames {frame_i.index}-{frame_j.index}: {err}") from err
    return shared, epipolar_residuals(transform, fmatrix, frame_i.pixels(shared), frame_j.pixels(shared))


def evaluate_hypothesis(hypothesis, frame_i, frame_j, intrinsics, tau=3e-7, motion=None, min_pairs=8,
                        support_fraction=0.5, topdown=None, min_baseline=0.0):
    """Accumulate the epipolar inliers of a frame pair into the hypothesis

    The motion defaults to the odometry of frame_j, which must then
    directly follow frame_i. Raises SkippedPair when the pair shares fewer
    than min_pairs tracks or the camera, placed by the hypothesis, moves
    less than min_baseline metres.

    """
    shared, scores = _pair_scores(hypothesis.transform, frame_i, frame_j, intrinsics, motion, min_pairs,
                                  min_baseline, topdown)
    inliers = int(np.count_nonzero(scores < tau))
    supported = inliers >= support_fraction * len(shared)
    return dataclasses.replace(
        hypothesis, inlier_count=hypothesis.inlier_count + inliers,
        pairs_evaluated=hypothesis.pairs_evaluated + len(shared),
        frames_evaluated=hypothesis.frames_evaluated + 1,
        last_support_frame=frame_j.index if supported else hypothesis.last_support_frame)


def calibrate_tau(frames, transform, intrinsics, percentile=95.0, min_pairs=8, min_baseline=0.05):
    """Epipolar score under which the given percentile of correct matches falls

    Scores are collected over consecutive frames with the correct
    alignment, usually that of a simulated sequence.

    """
    scores = []
    for previous, frame in zip(frames[:-1], frames[1:]):
        try:
            scores.append(_pair_scores(transform, previous, frame, intrinsics, None, min_pairs, min_baseline,
                                       None)[1])
        except SkippedPair as err:
            logger.debug("%s", err)
    if not scores:
        raise NoValidMotion(f"no frame pair of {len(frames)} frames can be scored")
    return float(np.percentile(np.concatenate(scores), percentile))


def _evaluate(state, hypothesis, frame_i, frame_j, motion, topdowns):
    settings = state.settings
    topdown = _topdown(frame_i, state.intrinsics, topdowns)
    if topdown is None:
        return hypothesis
    try:
        return evaluate_hypothesis(hypothesis, frame_i, frame_j, state.intrinsics, settings.tau, motion,
                                   settings.min_pairs, settings.support_fraction, topdown, settings.min_baseline)
    except SkippedPair as err:
        logger.debug("hypothesis %s: %s", hypothesis.hypothesis_id, err)
        return hypothesis


@dataclasses.dataclass(eq=False)
class GroundTransfers:
    """Ground features seen in two window frames

    Under the similarity (S, o) with S = delta R(phi), a ground feature at
    p_i and p_j in the top-down planes of the frames satisfies
    S (p_j - R_l p_i) + (I - R_l) o = t_l for the LiDAR motion (R_l, t_l).

    """

    track_ids: np.ndarray
    source: np.ndarray
    system: np.ndarray
    target: np.ndarray
    angles: np.ndarray

    def __len__(self):
        return len(self.track_ids)

    def residuals(self, transform):
        """Transfer errors in metres"""
        predicted = transform.delta * self.source @ transform.rotation.T + self.system @ transform.origin
        return np.linalg.norm(predicted - self.target, axis=1)


def ground_transfers(frames, poses, intrinsics, topdowns=None):
    """Ground transfers of the tracks shared by every pair of frames"""
    ids, sources, systems, targets, angles = [], [], [], [], []
    planes = [_topdown(frame, intrinsics, topdowns) for frame in frames]
    for first in range(len(frames)):
        for second in range(first + 1, len(frames)):
            if planes[first] is None or planes[second] is None:
                continue
            shared = TrackStore.shared(frames[first], frames[second])
            if not shared:
                continue
            motion = poses[first].motion_to(poses[second])
            points_i, depth_i = project_topdown_many(frames[first].pixels(shared), planes[first])
            points_j, depth_j = project_topdown_many(frames[second].pixels(shared), planes[second])
            ground = (depth_i > HORIZON_EPSILON) & (depth_j > HORIZON_EPSILON)
            count = int(np.count_nonzero(ground))
            if not count:
                continue
            ids.append(np.asarray(shared)[ground])
            sources.append(points_j[ground] - points_i[ground] @ motion.rotation.T)
            systems.append(np.repeat((np.eye(2) - motion.rotation)[None], count, axis=0))
            targets.append(np.repeat(np.asarray(motion.translation, dtype=float)[None], count, axis=0))
            angles.append(np.full(count, motion.angle))
    if not ids:
        return GroundTransfers(np.zeros(0, dtype=int), np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros((0, 2)),
                               np.zeros(0))
    return GroundTransfers(np.concatenate(ids), np.vstack(sources), np.concatenate(systems), np.vstack(targets),
                           np.concatenate(angles))


def refit_hypothesis(hypothesis, transfers, inlier_thresh=0.03, floor=0.002, min_inliers=16, min_rotation=2.0,
                     iterations=3):
    """Refit a hypothesis to the ground transfers it explains

    A track is an inlier when all of its transfers are within the
    threshold. The threshold starts at inlier_thresh and then follows three
    robust standard deviations of the inlier errors, never below floor.
    The scale and angle are solved by linear least squares, the origin too
    when the inlier frame pairs rotate enough (root sum of squared angles
    at least min_rotation radians). The hypothesis is returned unchanged
    when fewer than min_inliers transfers agree with it.

    """
    transform = hypothesis.transform
    thresh = inlier_thresh
    for _ in range(iterations):
        errors = transfers.residuals(transform)
        inliers = ~np.isin(transfers.track_ids, transfers.track_ids[errors > thresh])
        if np.count_nonzero(inliers) < min_inliers:
            break
        source, system, target = transfers.source[inliers], transfers.system[inliers], transfers.target[inliers]
        design = np.vstack([np.column_stack([source[:, 0], -source[:, 1]]),
                            np.column_stack([source[:, 1], source[:, 0]])])
        rhs = np.concatenate([target[:, 0], target[:, 1]])
        fit_origin = math.sqrt(float(np.sum(transfers.angles[inliers] ** 2))) >= min_rotation
        if fit_origin:
            design = np.hstack([design, np.vstack([system[:, 0, :], system[:, 1, :]])])
        else:
            rhs = rhs - np.concatenate([system[:, 0, :] @ transform.origin, system[:, 1, :] @ transform.origin])
        solution, _, rank, _ = np.linalg.lstsq(design, rhs, rcond=None)
        if rank < design.shape[1] or not math.hypot(solution[0], solution[1]) > 0:
            break
        origin = solution[2:4] if fit_origin else transform.origin
        transform = SimilarityTransform2(math.hypot(solution[0], solution[1]), math.atan2(solution[1], solution[0]),
                                         origin)
        spread = 1.4826 * float(np.median(transfers.residuals(transform)[inliers]))
        thresh = min(inlier_thresh, max(floor, 3 * spread))
    if transform is hypothesis.transform:
        return hypothesis
    logger.debug("hypothesis %s refitted to %s", hypothesis.hypothesis_id, transform.to_dict())
    return dataclasses.replace(hypothesis, transform=transform, flags=hypothesis.flags | {'refit'})


def _refit(state, hypotheses, transfers):
    settings = state.settings
    return [refit_hypothesis(hyp, transfers, settings.refit_thresh, settings.refit_floor,
                             settings.refit_min_inliers, settings.refit_rotation,
                             settings.refit_iterations) for hyp in hypotheses]


def _dedupe(hypotheses, settings):
    kept = []
    for hyp in sorted(hypotheses, key=_rank, reverse=True):
        if not _is_duplicate(hyp, kept, settings):
            kept.append(hyp)
    return sorted(kept, key=lambda hyp: hyp.hypothesis_id)


def _is_duplicate(hypothesis, bank, settings):
    return any(hypothesis.transform.close_to(other.transform, settings.duplicate_scale,
                                             math.radians(settings.duplicate_angle), settings.duplicate_origin)
               for other in bank)


def _rank(hypothesis):
    return (hypothesis.score, hypothesis.inlier_count, -hypothesis.hypothesis_id)


def rransac_step(state, frame):
    """Feed one frame to the tracker

    Stored hypotheses are evaluated on the (previous, new) frame pair and,
    with refit enabled, refitted to the ground transfers of the window. If
    none scores at least promote_thresh, new hypotheses are generated from
    the window, refitted, back-evaluated over it, and added unless they
    duplicate a stored one. Of duplicate stored hypotheses the best ranked
    is kept. Hypotheses unsupported for stale_age frames and those beyond
    capacity are pruned.

    """
    settings = state.settings
    if state.last_pose is None:
        pose = Pose2()
    else:
        pose = state.last_pose.advance(frame.odometry if frame.odometry is not None else LidarMotion.identity())
    previous = state.frames[-1] if state.frames else None
    state.frames.append(frame)
    state.poses.append(pose)
    state.last_pose = pose
    state.tracks.update(frame)
    topdowns = {}
    frames, poses = list(state.frames), list(state.poses)
    transfers = None
    if settings.refit and len(frames) >= 2:
        transfers = ground_transfers(frames, poses, state.intrinsics, topdowns)
    if previous is not None:
        motion = state.poses[-2].motion_to(pose)
        state.hypotheses = [_evaluate(state, hyp, previous, frame, motion, topdowns) for hyp in state.hypotheses]
        if transfers is not None:
            state.hypotheses = _dedupe(_refit(state, state.hypotheses, transfers), settings)
    best = max((hyp.score for hyp in state.hypotheses if hyp.frames_evaluated), default=0.0)
    if best < settings.promote_thresh and len(frames) >= 3:
        try:
            new = generate_hypotheses(frames, settings.budget, state.rng, state.intrinsics,
                                      state.image_height, tracks=state.tracks, gamma=settings.gamma,
                                      rotation_epsilon=math.radians(settings.rotation_epsilon),
                                      start_id=state.next_id)
        except NoValidMotion as err:
            logger.debug("frame %s: %s", frame.index, err)
            new = []
        state.next_id += len(new)
        if transfers is not None:
            new = _refit(state, new, transfers)
        evaluated = []
        for hyp in new:
            for num in range(1, len(frames)):
                hyp = _evaluate(state, hyp, frames[num - 1], frames[num], poses[num - 1].motion_to(poses[num]),
                                topdowns)
            evaluated.append(hyp)
        evaluated.sort(key=_rank, reverse=True)
        for hyp in evaluated:
            if not _is_duplicate(hyp, state.hypotheses, settings):
                state.hypotheses.append(hyp)
    state.hypotheses = [hyp for hyp in state.hypotheses
                        if frame.index - hyp.last_support_frame <= settings.stale_age]
    if len(state.hypotheses) > settings.capacity:
        kept = sorted(state.hypotheses, key=_rank, reverse=True)[:settings.capacity]
        state.hypotheses = sorted(kept, key=lambda hyp: hyp.hypothesis_id)
    for hyp in state.hypotheses:
        record = {'frame': frame.index, 'id': hyp.hypothesis_id, 'score': hyp.score,
                  'inliers': hyp.inlier_count, 'pairs': hyp.pairs_evaluated, 'frames': hyp.frames_evaluated,
                  'transform': hyp.transform.to_dict()}
        state.telemetry.append(record)
        logger.debug("frame %s: hypothesis %s score %.3f over %s frames", frame.index, hyp.hypothesis_id,
                     hyp.score, hyp.frames_evaluated)
    return state


def select_best(state, min_maturity=None):
    """Highest scoring mature hypothesis or None

    Ties go to the larger inlier count and then to the lower id.

    """
    min_maturity = state.settings.min_maturity if min_maturity is None else min_maturity
    mature = [hyp for hyp in state.hypotheses if hyp.frames_evaluated >= min_maturity]
    if not mature:
        return None
    return max(mature, key=_rank)


@dataclasses.dataclass(eq=False)
class BoundaryAssociation:
    """LiDAR segment matched to a horizontal image line"""

    frame_index: int
    segment: LineSegment2
    image_line: np.ndarray
    distance: float
    lidar_points: np.ndarray
    topdown: object


def identify_boundaries(hypothesis, frame, intrinsics, image_size, assoc_thresh=5.0, spacing=0.05):
    """Associate the LiDAR segments of a frame with ground-wall boundary candidates

    Segment samples are mapped by the inverse similarity to the top-down
    plane and on to the image; samples behind the camera or outside the
    image are dropped. A segment is associated with the horizontal line
    closest in mean pixel distance, if that is below assoc_thresh.

    """
    lines = frame.lines.horizontal
    if not len(lines):
        return []
    try:
        topdown = topdown_frame(frame.vp, intrinsics)
    except DegenerateVanishingPoint as err:
        logger.warning("frame %s: %s", frame.index, err)
        return []
    segments = frame.segments if frame.segments is not None else LineExtractor().extract(frame.scan)
    inverse = hypothesis.transform.inverse()
    width, height = image_size
    image_lines = [LineSegment2(line[:2], line[2:]) for line in lines]
    associations = []
    for segment in segments:
        samples = segment.sample(spacing)
        pixels, in_front = topdown.to_image(inverse.apply(samples))
        with np.errstate(invalid='ignore'):
            inside = in_front & np.all(np.isfinite(pixels), axis=1) & (pixels[:, 0] >= 0) & \
                (pixels[:, 0] <= width) & (pixels[:, 1] >= 0) & (pixels[:, 1] <= height)
        if np.count_nonzero(inside) < 2:
            continue
        distances = [float(line.distances(pixels[inside]).mean()) for line in image_lines]
        best = int(np.argmin(distances))
        if distances[best] < assoc_thresh:
            associations.append(BoundaryAssociation(frame.index, segment, lines[best], distances[best],
                                                    samples[inside], topdown))
    logger.debug("frame %s: %s of %s segments associated", frame.index, len(associations), len(segments))
    return associations


class PointToLineProblem:
    """Top-down point-to-line distances of LiDAR points under a similarity

    Parameters are (delta, phi, o_x, o_y); a LiDAR point p maps to the
    top-down plane as R(-phi) (p - o) / delta and its residual is the
    signed distance to the lifted image line it is associated with.

    """

    def __init__(self, associations):
        points, anchors, normals = [], [], []
        for assoc in associations:
            ends, depth = project_topdown_many(assoc.image_line.reshape(2, 2), assoc.topdown)
            if np.any(depth <= HORIZON_EPSILON):
                continue
            direction = ends[1] - ends[0]
            direction /= np.linalg.norm(direction)
            points.append(assoc.lidar_points)
            anchors.append(np.repeat(ends[:1], len(assoc.lidar_points), axis=0))
            normals.append(np.repeat((J2 @ direction)[None], len(assoc.lidar_points), axis=0))
        self.points = np.vstack(points) if points else np.zeros((0, 2))
        self.anchors = np.vstack(anchors) if anchors else np.zeros((0, 2))
        self.normals = np.vstack(normals) if normals else np.zeros((0, 2))

    def directions(self):
        """Line directions as angles modulo pi"""
        return np.unique(np.round(np.mod(np.arctan2(self.normals[:, 1], self.normals[:, 0]), math.pi), 9))

    def _topdown(self, params):
        delta, phi, origin = params[0], params[1], params[2:4]
        return (self.points - origin) @ rot2(-phi).T / delta

    def residuals(self, params):
        return np.einsum('ij,ij->i', self.normals, self._topdown(params) - self.anchors)

    def jacobian(self, params):
        delta, phi = params[0], params[1]
        points = self._topdown(params)
        jac = np.empty((len(points), 4))
        jac[:, 0] = -np.einsum('ij,ij->i', self.normals, points) / delta
        jac[:, 1] = -np.einsum('ij,ij->i', self.normals, points @ J2.T)
        jac[:, 2:] = -(self.normals @ rot2(-phi)) / delta
        return jac


def optimize_hypothesis(hypothesis, associations, min_direction_angle=5.0, max_iter=50):
    """Refine (delta, phi, o) by minimizing point-to-line distances

    When the associated lines are all parallel, or the problem is
    otherwise rank deficient, raises RankDeficient holding the unchanged
    hypothesis with the 'rank_deficient' flag.

    """
    problem = PointToLineProblem(associations)
    start = np.array([hypothesis.transform.delta, hypothesis.transform.phi, *hypothesis.transform.origin])
    angles = problem.directions()
    spread = 0.0
    for angle in angles:
        spread = max(spread, float(np.max(np.abs(np.sin(angles - angle)), initial=0.0)))
    rank = np.linalg.matrix_rank(problem.jacobian(start)) if len(problem.points) >= 4 else 0
    if spread < math.sin(math.radians(min_direction_angle)) or rank < 4:
        raise RankDeficient(f"hypothesis {hypothesis.hypothesis_id}: associated line directions span "
                            f"{math.degrees(math.asin(min(spread, 1.0))):.2f} deg, jacobian rank {rank}",
                            dataclasses.replace(hypothesis, flags=hypothesis.flags | {'rank_deficient'}))
    result = LevenbergMarquardt(max_iter=max_iter).solve(problem, start)
    logger.info("hypothesis %s: point-to-line cost %.6g -> %.6g in %s iterations", hypothesis.hypothesis_id,
                result.initial_cost, result.final_cost, result.iterations)
    transform = SimilarityTransform2(float(result.x[0]), wrap_angle(result.x[1]), result.x[2:4])
    return dataclasses.replace(hypothesis, transform=transform, flags=hypothesis.flags | {'optimized'})


class AlignmentTracker:
    """Streaming interface around TrackerState"""

    def __init__(self, intrinsics, image_size, seed=0, **settings):
        self.intrinsics = intrinsics
        self.image_size = tuple(image_size)
        self.seed = seed
        self.settings = TrackerSettings(**settings)
        self.state = None
        self.reset()

    def reset(self):
        """Forget all hypotheses and frames"""
        telemetry = self.state.telemetry if self.state is not None else []
        self.state = TrackerState(self.intrinsics, self.image_size[1], self.settings, self.seed)
        self.state.telemetry = telemetry

    @property
    def telemetry(self):
        return self.state.telemetry

    def step(self, frame):
        rransac_step(self.state, frame)
        return self.state

    def run(self, frames, reset_at=None):
        """Process frames in order, resetting at frame index reset_at"""
        for frame in tqdm(frames, desc='align', disable=None):
            if reset_at is not None and frame.index == reset_at:
                logger.info("resetting tracker at frame %s", frame.index)
                self.reset()
            self.step(frame)
        return self.best()

    def best(self):
        return select_best(self.state)

    def refine(self, hypothesis, frames=None, min_direction_angle=5.0, max_iter=50):
        """Optimize a hypothesis on boundary associations of recent frames"""
        frames = list(self.state.frames) if frames is None else list(frames)[-self.settings.window:]
        associations = []
        for frame in frames:
            associations.extend(identify_boundaries(hypothesis, frame, self.intrinsics, self.image_size,
                                                    self.settings.assoc_thresh))
        return optimize_hypothesis(hypothesis, associations, min_direction_angle, max_iter)
