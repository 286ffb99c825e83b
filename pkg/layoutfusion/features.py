"""Sensor features: LiDAR lines, scan matching, feature tracks and image line groups"""

import dataclasses
import logging
import math

import numpy as np
from scipy.spatial import cKDTree
from tqdm import tqdm

from . import IcpDiverged
from .geometry import J2, LidarMotion, fit_line, rot2, topdown_frame


logger = logging.getLogger(__name__)


@dataclasses.dataclass(eq=False)
class LidarScan:
    """One 2D scan in the sensor frame, ordered by bearing"""

    timestamp: float
    points: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if self.valid is None:
            self.valid = np.ones(len(self.points), dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)

    @classmethod
    def from_points(cls, timestamp, points, min_range=0.0, max_range=np.inf):
        """Sort points by bearing and flag those within the range limits"""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        order = np.argsort(np.arctan2(points[:, 1], points[:, 0]), kind='stable')
        points = points[order]
        ranges = np.linalg.norm(points, axis=1)
        return cls(timestamp, points, (ranges >= min_range) & (ranges <= max_range))

    @property
    def valid_points(self):
        return self.points[self.valid]

    @property
    def ranges(self):
        return np.linalg.norm(self.points, axis=1)

    @property
    def bearings(self):
        return np.arctan2(self.points[:, 1], self.points[:, 0])


@dataclasses.dataclass(eq=False)
class LineSegment2:
    """Line segment with its inlier points"""

    start: np.ndarray
    end: np.ndarray
    inlier_count: int = 0
    rms: float = 0.0
    points: np.ndarray = None

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.end = np.asarray(self.end, dtype=float)
        if self.points is None:
            self.points = np.vstack([self.start, self.end])

    @property
    def length(self):
        return float(np.linalg.norm(self.end - self.start))

    @property
    def direction(self):
        return (self.end - self.start) / self.length

    @property
    def normal(self):
        return J2 @ self.direction

    @property
    def offset(self):
        """Signed distance of the line from the origin along the normal"""
        return float(self.normal @ self.start)

    @property
    def angle(self):
        return math.atan2(self.direction[1], self.direction[0])

    def as_array(self):
        """(x1, y1, x2, y2)"""
        return np.concatenate([self.start, self.end])

    def transformed(self, pose):
        """Segment mapped by a Pose2"""
        return LineSegment2(pose.transform(self.start), pose.transform(self.end),
                            self.inlier_count, self.rms, pose.transform(self.points))

    def sample(self, spacing):
        """Points along the segment, endpoints included"""
        count = max(2, int(math.ceil(self.length / spacing)) + 1)
        weights = np.linspace(0.0, 1.0, count)[:, None]
        return (1 - weights) * self.start + weights * self.end

    def distances(self, points):
        """Euclidean distances from points to the segment"""
        edge = self.end - self.start
        along = np.clip((np.asarray(points) - self.start) @ edge / (edge @ edge), 0.0, 1.0)
        return np.linalg.norm(points - (self.start + along[:, None] * edge), axis=1)

    def line_distances(self, points):
        """Distances from points to the infinite line through the segment"""
        return np.abs((np.asarray(points, dtype=float) - self.start) @ self.normal)


@dataclasses.dataclass(eq=False)
class FeatureTrack:
    """Pixel observations of one tracked image feature"""

    track_id: int
    observations: list = dataclasses.field(default_factory=list)
    image_row_weight: float = 0.0

    def add(self, frame_index, pixel):
        """Append an observation; frame indices must increase"""
        if self.observations and frame_index <= self.observations[-1][0]:
            raise ValueError(f"track {self.track_id}: frame {frame_index} not after {self.observations[-1][0]}")
        self.observations.append((frame_index, np.asarray(pixel, dtype=float)))

    @property
    def usable(self):
        return len(self.observations) >= 2

    def mean_row(self):
        return float(np.mean([pixel[1] for _, pixel in self.observations]))


@dataclasses.dataclass(eq=False)
class ImageLineSet:
    """Image line segments (x1, y1, x2, y2) grouped by orientation"""

    horizontal: np.ndarray = None
    vertical: np.ndarray = None
    discarded: np.ndarray = None

    def __post_init__(self):
        for name in ('horizontal', 'vertical', 'discarded'):
            value = getattr(self, name)
            setattr(self, name, np.zeros((0, 4)) if value is None else np.asarray(value, dtype=float).reshape(-1, 4))


@dataclasses.dataclass(eq=False)
class SensorFrame:
    """Everything observed at one timestep"""

    index: int
    scan: LidarScan
    observations: dict
    lines: ImageLineSet
    vp: object
    odometry: LidarMotion = None
    segments: list = None

    @property
    def timestamp(self):
        return self.scan.timestamp

    def pixels(self, track_ids):
        """(N, 2) pixels of the given tracks in this frame"""
        return np.array([self.observations[tid] for tid in track_ids], dtype=float).reshape(-1, 2)


class LineExtractor:
    """Split-and-merge line extraction from bearing-ordered scans"""

    def __init__(self, dist_thresh=0.03, min_len=0.15, min_points=5, break_distance=0.3,
                 break_range_factor=0.1, merge_angle=5.0, merge_support=0.95, fold_len=0.5):
        self.dist_thresh = dist_thresh
        self.min_len = min_len
        self.min_points = min_points
        self.break_distance = break_distance
        self.break_range_factor = break_range_factor
        self.merge_angle = math.radians(merge_angle)
        self.merge_support = merge_support
        self.fold_len = fold_len

    def _gap_limits(self, points, following):
        ranges = np.maximum(np.linalg.norm(points, axis=1), np.linalg.norm(following, axis=1))
        return self.break_distance + self.break_range_factor * ranges

    def _chunks(self, points):
        """Split into runs without range gaps; returns (chunks, cyclic)"""
        gaps = np.linalg.norm(np.diff(points, axis=0), axis=1)
        breaks = np.flatnonzero(gaps > self._gap_limits(points[:-1], points[1:])) + 1
        chunks = np.split(points, breaks)
        wraps = len(points) > 2 and (np.linalg.norm(points[-1] - points[0])
                                     <= self._gap_limits(points[-1:], points[:1])[0])
        if not wraps:
            return chunks, False
        if len(chunks) == 1:
            return chunks, True
        return [np.vstack([chunks[-1], chunks[0]])] + chunks[1:-1], False

    @staticmethod
    def _open_cycle(points):
        """Unroll a closed scan so that it starts and ends at the same corner

        The point of a polygonal chain farthest from a given point is a
        vertex, so the farthest point from the first one is a corner.

        """
        start = int(np.argmax(np.linalg.norm(points - points[0], axis=1)))
        return np.vstack([points[start:], points[:start + 1]])

    def _breaks(self, points, first, last):
        """Indices strictly between first and last where the chain turns"""
        if last - first < 2:
            return []
        chunk = points[first:last + 1]
        chord = chunk[-1] - chunk[0]
        length = np.linalg.norm(chord)
        if length < 1e-12:
            dist = np.linalg.norm(chunk - chunk[0], axis=1)
        else:
            dist = np.abs((chunk - chunk[0]) @ (J2 @ chord) / length)
        split = int(np.argmax(dist))
        if dist[split] <= self.dist_thresh or not 0 < split < len(chunk) - 1:
            return []
        split += first
        return self._breaks(points, first, split) + [split] + self._breaks(points, split, last)

    def _split(self, points):
        """Pieces between breakpoints; pieces under min_points are dropped"""
        bounds = [0] + self._breaks(points, 0, len(points) - 1) + [len(points) - 1]
        pieces = [points[low:high + 1] for low, high in zip(bounds[:-1], bounds[1:])]
        return [piece for piece in pieces if len(piece) >= self.min_points]

    def _fit(self, points):
        """Fit a segment, trimming ends that disagree with the interior"""
        if len(points) < self.min_points:
            return None
        centroid, _, normal, rms = fit_line(points[1:-1] if len(points) > 3 else points)
        tolerance = max(1e-6, 3 * rms)
        keep = np.ones(len(points), dtype=bool)
        keep[[0, -1]] = np.abs((points[[0, -1]] - centroid) @ normal) <= tolerance
        points = points[keep]
        centroid, direction, normal, rms = fit_line(points)
        inliers = np.abs((points - centroid) @ normal) <= self.dist_thresh
        if not inliers.all():
            points = points[inliers]
            if len(points) < self.min_points:
                return None
            centroid, direction, normal, rms = fit_line(points)
        if direction @ (points[-1] - points[0]) < 0:
            direction = -direction
        along = (points - centroid) @ direction
        start = centroid + along.min() * direction
        end = centroid + along.max() * direction
        if np.linalg.norm(end - start) < self.min_len or len(points) < self.min_points:
            return None
        return LineSegment2(start, end, len(points), rms, points)

    def _mergeable(self, first, second):
        cos = abs(first.direction @ second.direction)
        if math.acos(min(1.0, cos)) >= self.merge_angle:
            return None
        gap = np.linalg.norm(second.start - first.end)
        if gap > self._gap_limits(first.end[None], second.start[None])[0]:
            return None
        points = np.vstack([first.points, second.points])
        centroid, _, normal, rms = fit_line(points)
        if rms >= self.dist_thresh / 2:
            return None
        if np.mean(np.abs((points - centroid) @ normal) < self.dist_thresh) < self.merge_support:
            return None
        return self._fit(points)

    def _joined(self, first, second):
        return np.linalg.norm(second.start - first.end) <= self._gap_limits(first.end[None], second.start[None])[0]

    def _fold(self, segments, cyclic):
        """Hand the points of short fragments over to their neighbours

        A fragment shorter than fold_len whose points mostly lie on the
        lines of longer adjacent segments is removed, and each of its
        points close to one of those lines joins the closer one.

        """
        segments = list(segments)
        num = 0
        while num < len(segments) and len(segments) > 1:
            count = len(segments)
            fragment = segments[num]
            previous = (num - 1) % count if num > 0 or cyclic else None
            following = (num + 1) % count if num + 1 < count or cyclic else None
            neighbours = []
            if previous is not None and self._joined(segments[previous], fragment):
                neighbours.append(previous)
            if following is not None and following not in neighbours and \
                    self._joined(fragment, segments[following]):
                neighbours.append(following)
            neighbours = [idx for idx in neighbours if segments[idx].length > fragment.length]
            if fragment.length >= self.fold_len or not neighbours:
                num += 1
                continue
            dist = np.column_stack([segments[idx].line_distances(fragment.points) for idx in neighbours])
            owner = np.argmin(dist, axis=1)
            close = dist[np.arange(len(owner)), owner] <= self.dist_thresh
            refits = {}
            if close.mean() > 0.5:
                for pos, idx in enumerate(neighbours):
                    taken = fragment.points[close & (owner == pos)]
                    if idx == previous:
                        refits[idx] = self._fit(np.vstack([segments[idx].points, taken]))
                    else:
                        refits[idx] = self._fit(np.vstack([taken, segments[idx].points]))
            if not refits or any(refit is None for refit in refits.values()):
                num += 1
                continue
            for idx, refit in refits.items():
                segments[idx] = refit
            del segments[num]
            num = max(num - 1, 0)
        return segments

    def _merge(self, segments, cyclic):
        merged = []
        for segment in segments:
            if merged:
                joined = self._mergeable(merged[-1], segment)
                if joined is not None:
                    merged[-1] = joined
                    continue
            merged.append(segment)
        if cyclic and len(merged) > 2:
            joined = self._mergeable(merged[-1], merged[0])
            if joined is not None:
                merged = merged[1:-1] + [joined]
        return merged

    def extract(self, scan):
        """Return line segments ordered by bearing"""
        points = scan.valid_points
        if len(points) < 2:
            return []
        chunks, cyclic = self._chunks(points)
        if cyclic:
            chunks = [self._open_cycle(chunks[0])]
        segments = []
        for chunk in chunks:
            for piece in self._split(chunk):
                segment = self._fit(piece)
                if segment is not None:
                    segments.append(segment)
        return self._merge(self._fold(segments, cyclic), cyclic)


def extract_lines(scan, **kwargs):
    """Extract line segments from a scan; empty list for degenerate scans"""
    return LineExtractor(**kwargs).extract(scan)


@dataclasses.dataclass(eq=False)
class IcpResult:
    """Scan matching outcome"""

    motion: LidarMotion
    iterations: int
    inlier_fraction: float
    converged: bool


class ScanMatcher:
    """Point-to-line ICP against the line segments of the target scan

    Directions the geometry does not constrain (parallel walls only) keep
    their initial value: the update is the minimum-norm least squares
    solution with small singular values truncated.

    """

    def __init__(self, max_iter=50, tolerance=1e-6, overlap_frac=0.5, max_correspondence=0.3,
                 neighbors=5, neighbor_radius=1.0, rcond=1e-2, extractor=None):
        self.max_iter = max_iter
        self.tolerance = tolerance
        self.overlap_frac = overlap_frac
        self.max_correspondence = max_correspondence
        self.neighbors = neighbors
        self.neighbor_radius = neighbor_radius
        self.rcond = rcond
        self.extractor = LineExtractor() if extractor is None else extractor

    def _correspondences(self, tree, labels, normals, offsets, moved):
        count = min(self.neighbors, len(labels))
        dist, index = tree.query(moved, k=count)
        dist = dist.reshape(len(moved), -1)
        candidates = labels[index.reshape(len(moved), -1)]
        residuals = np.einsum('nkj,nj->nk', normals[candidates], moved) - offsets[candidates]
        scores = np.where(dist < self.neighbor_radius, np.abs(residuals), np.inf)
        best = np.argmin(scores, axis=1)
        rows = np.arange(len(moved))
        residual = residuals[rows, best]
        inliers = scores[rows, best] < self.max_correspondence
        return candidates[rows, best], residual, inliers

    def match(self, scan_a, scan_b, init=None, target_segments=None):
        """Estimate the motion mapping scan_a coordinates onto scan_b"""
        init = LidarMotion.identity() if init is None else init
        segments = self.extractor.extract(scan_b) if target_segments is None else target_segments
        source = scan_a.valid_points
        if not segments or not len(source):
            raise IcpDiverged(f"no target lines in scan at t={scan_b.timestamp}")
        target = np.vstack([segment.points for segment in segments])
        labels = np.repeat(np.arange(len(segments)), [len(segment.points) for segment in segments])
        normals = np.array([segment.normal for segment in segments])
        offsets = np.array([segment.offset for segment in segments])
        tree = cKDTree(target)
        angle, translation = init.angle, init.translation.copy()
        converged = False
        iteration = 0
        for iteration in range(1, self.max_iter + 1):
            rotated = source @ rot2(angle).T
            seg_index, residual, inliers = self._correspondences(tree, labels, normals, offsets,
                                                                 rotated + translation)
            if not inliers.any():
                break
            normal = normals[seg_index[inliers]]
            jacobian = np.column_stack([np.einsum('nj,nj->n', normal, rotated[inliers] @ J2.T), normal])
            step = np.linalg.lstsq(jacobian, -residual[inliers], rcond=self.rcond)[0]
            angle += step[0]
            translation += step[1:]
            if np.linalg.norm(step) < self.tolerance:
                converged = True
                break
        _, _, inliers = self._correspondences(tree, labels, normals, offsets, source @ rot2(angle).T + translation)
        fraction = float(inliers.mean())
        if fraction < self.overlap_frac:
            raise IcpDiverged(f"inlier fraction {fraction:.2f} below {self.overlap_frac} "
                              f"matching t={scan_a.timestamp} to t={scan_b.timestamp}")
        return IcpResult(LidarMotion(angle, translation), iteration, fraction, converged)

    def register(self, scan_a, scan_b, init=None, target_segments=None):
        """Motion from scan_a to scan_b"""
        return self.match(scan_a, scan_b, init, target_segments).motion


def icp_register(scan_a, scan_b, init=None, **kwargs):
    """Point-to-line ICP estimate of the motion a -> b"""
    return ScanMatcher(**kwargs).register(scan_a, scan_b, init)


def group_lines(lines, vp, intrinsics, angle_thresh=2.0):
    """Split raw image segments into vertical lines, horizontal boundary candidates and the rest

    A segment is vertical when its extension passes the vanishing point
    within angle_thresh degrees, horizontal when both endpoints lie below
    the rectified horizon, and discarded otherwise.

    """
    lines = np.asarray(lines, dtype=float).reshape(-1, 4)
    if not len(lines):
        return ImageLineSet()
    frame = topdown_frame(vp, intrinsics)
    start, end = lines[:, :2], lines[:, 2:]
    direction = end - start
    to_vp = np.array([vp.u, vp.v]) - (start + end) / 2
    cos = np.abs(np.einsum('ij,ij->i', direction, to_vp)) / np.maximum(
        np.linalg.norm(direction, axis=1) * np.linalg.norm(to_vp, axis=1), 1e-300)
    vertical = np.degrees(np.arccos(np.clip(cos, 0.0, 1.0))) < angle_thresh
    below = frame.below_horizon(start) & frame.below_horizon(end)
    horizontal = ~vertical & below
    return ImageLineSet(horizontal=lines[horizontal], vertical=lines[vertical],
                        discarded=lines[~vertical & ~horizontal])


def weight_track(track, image_height, gamma=2.0):
    """Sampling weight (mean row / image height)^gamma, favouring features low in the image"""
    row = track.mean_row() / max(image_height, 1)
    return float(np.clip(row, 0.0, 1.0) ** gamma)


class TrackStore:
    """Feature tracks accumulated frame by frame"""

    def __init__(self, image_height, gamma=2.0):
        self.image_height = image_height
        self.gamma = gamma
        self.tracks = {}

    def update(self, frame):
        """Add the observations of a frame"""
        for track_id, pixel in frame.observations.items():
            track = self.tracks.setdefault(track_id, FeatureTrack(track_id))
            track.add(frame.index, pixel)
            track.image_row_weight = weight_track(track, self.image_height, self.gamma)

    def clear(self):
        self.tracks = {}

    def weights(self, track_ids):
        """Sampling weights for track ids"""
        return np.array([self.tracks[tid].image_row_weight if tid in self.tracks else 0.0
                         for tid in track_ids])

    @staticmethod
    def shared(frame_i, frame_j):
        """Sorted ids of tracks observed in both frames"""
        return sorted(set(frame_i.observations) & set(frame_j.observations))


class FrameBuilder:
    """Scan-to-scan odometry over a frame sequence

    Each scan is matched to the previous one starting from a
    constant-velocity prediction; when matching fails the prediction is
    used as is.

    """

    def __init__(self, extractor=None, matcher=None):
        self.extractor = LineExtractor() if extractor is None else extractor
        self.matcher = ScanMatcher(extractor=self.extractor) if matcher is None else matcher

    def extract(self, frames):
        """Attach extracted line segments to frames"""
        for frame in frames:
            if frame.segments is None:
                frame.segments = self.extractor.extract(frame.scan)
        return frames

    def odometry(self, frames):
        """Set frame.odometry (motion from the previous frame) for every frame"""
        self.extract(frames)
        previous_motion = LidarMotion.identity()
        for num, frame in enumerate(tqdm(frames, desc='odometry', disable=None)):
            if num == 0:
                frame.odometry = LidarMotion.identity()
                continue
            try:
                result = self.matcher.match(frames[num - 1].scan, frame.scan, previous_motion, frame.segments)
                motion = result.motion
                logger.debug("frame %s: icp %s iterations, inliers %.2f", frame.index,
                             result.iterations, result.inlier_fraction)
            except IcpDiverged as err:
                logger.warning("frame %s: %s; using constant velocity", frame.index, err)
                motion = previous_motion
            frame.odometry = motion
            previous_motion = motion
        return frames
