"""Floor plan integration and joint pose/wall refinement"""

import copy
import dataclasses
import logging
import math

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from shapely.geometry import LineString, Polygon
from shapely.ops import unary_union

from . import DegenerateVanishingPoint, SolverDiverged
from .features import LineExtractor, LineSegment2, TrackStore
from .geometry import HORIZON_EPSILON, J2, LidarMotion, Pose2, fit_line, homogeneous, project_topdown_many, \
    rot3z, topdown_frame
from .solver import LevenbergMarquardt, huber_cost


logger = logging.getLogger(__name__)


@dataclasses.dataclass(eq=False)
class Trajectory:
    """World poses of the LiDAR, one per frame"""

    poses: list

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, index):
        return self.poses[index]

    @classmethod
    def from_frames(cls, frames, start=None):
        """Chain the odometry of frames starting from start (identity by default)"""
        poses = []
        for frame in frames:
            if not poses:
                poses.append(Pose2() if start is None else start)
                continue
            odometry = frame.odometry if frame.odometry is not None else LidarMotion.identity()
            poses.append(poses[-1].advance(odometry))
        return cls(poses)

    def anchored(self, pose):
        """Trajectory expressed in a frame where the identity maps to pose"""
        return Trajectory([pose.compose(item) for item in self.poses])

    def odometry(self):
        """Motions between consecutive poses"""
        return [LidarMotion.identity()] + [self.poses[num - 1].motion_to(self.poses[num])
                                           for num in range(1, len(self.poses))]

    def as_array(self):
        return np.array([pose.to_list() for pose in self.poses]).reshape(-1, 3)

    def to_dict(self):
        return {'poses': [pose.to_list() for pose in self.poses]}

    @classmethod
    def from_dict(cls, data):
        return cls([Pose2.from_list(values) for values in data['poses']])


def _segment_dict(segment):
    return {'start': [float(x) for x in segment.start], 'end': [float(x) for x in segment.end],
            'inlier_count': int(segment.inlier_count), 'rms': float(segment.rms)}


@dataclasses.dataclass(eq=False)
class FloorPlan:
    """Wall segments and corners in the world frame"""

    walls: list = dataclasses.field(default_factory=list)
    corners: np.ndarray = None

    def __post_init__(self):
        self.corners = np.zeros((0, 2)) if self.corners is None else np.asarray(self.corners, dtype=float).reshape(-1, 2)

    def wall_array(self):
        """(N, 4) wall endpoints"""
        return np.array([wall.as_array() for wall in self.walls]).reshape(-1, 4)

    def transformed(self, pose):
        return FloorPlan([wall.transformed(pose) for wall in self.walls], pose.transform(self.corners))

    def to_polygons(self, close_gap=0.1, min_area=1.0):
        """Floor regions enclosed by the walls

        Walls are buffered by close_gap / 2 to bridge small openings; the
        enclosed holes are grown back by the same amount. Holes smaller
        than min_area (closed furniture outlines) are dropped.

        """
        if not self.walls:
            return []
        outline = unary_union([LineString([wall.start, wall.end]) for wall in self.walls])
        outline = outline.buffer(close_gap / 2, join_style=2)
        parts = getattr(outline, 'geoms', [outline])
        regions = []
        for part in parts:
            for interior in part.interiors:
                region = Polygon(interior).buffer(close_gap / 2, join_style=2)
                if region.area >= min_area:
                    regions.append(region)
        return sorted(regions, key=lambda region: -region.area)

    def to_dict(self):
        return {'walls': [_segment_dict(wall) for wall in self.walls],
                'corners': [[float(x), float(y)] for x, y in self.corners]}

    @classmethod
    def from_dict(cls, data):
        walls = [LineSegment2(item['start'], item['end'], item.get('inlier_count', 0), item.get('rms', 0.0))
                 for item in data['walls']]
        return cls(walls, data.get('corners'))


def _wall(points):
    centroid, direction, _, rms = fit_line(points)
    if direction[0] < -1e-12 or (abs(direction[0]) <= 1e-12 and direction[1] < 0):
        direction = -direction
    along = (points - centroid) @ direction
    return LineSegment2(centroid + along.min() * direction, centroid + along.max() * direction,
                        len(points), rms, points)


def _absorb(walls, point_tol, gap_tol):
    """Dissolve short walls whose points mostly lie on longer walls

    Walls are visited shortest first. Each point of a visited wall goes to
    the nearest line among the longer walls when it lies within point_tol
    of it and within gap_tol of its extent. When more than half of the
    points find a home the wall is removed and the receiving walls are
    refitted; its remaining points are dropped.

    """
    walls = sorted(walls, key=lambda wall: wall.length)
    num = 0
    while num < len(walls) - 1:
        fragment, longer = walls[num], walls[num + 1:]
        points = fragment.points
        dist = np.column_stack([wall.line_distances(points) for wall in longer])
        for col, wall in enumerate(longer):
            along = (points - wall.start) @ wall.direction
            dist[(along < -gap_tol) | (along > wall.length + gap_tol), col] = np.inf
        owner = np.argmin(dist, axis=1)
        close = dist[np.arange(len(points)), owner] <= point_tol
        if close.mean() <= 0.5:
            num += 1
            continue
        for col in np.unique(owner[close]):
            wall = longer[col]
            walls[num + 1 + col] = _wall(np.vstack([wall.points, points[close & (owner == col)]]))
        del walls[num]
        walls[num:] = sorted(walls[num:], key=lambda wall: wall.length)
    return walls


def merge_segments(segments, direction_tol=3.0, offset_tol=0.10, gap_tol=0.5, absorb_tol=0.05):
    """Cluster world-frame segments by direction, offset and gap and fit one wall per cluster

    Short walls left over from corner fragments are then absorbed into the
    longer walls their points lie on (see _absorb); absorb_tol=0 disables
    this.

    """
    if not segments:
        return []
    angles = np.array([segment.angle for segment in segments])
    directions = np.column_stack([np.cos(angles), np.sin(angles)])
    normals = directions @ J2.T
    starts = np.array([segment.start for segment in segments])
    ends = np.array([segment.end for segment in segments])
    offsets = np.einsum('ij,ij->i', normals, starts)
    mids = (starts + ends) / 2
    angle_diff = np.abs(np.angle(np.exp(2j * (angles[:, None] - angles[None, :])))) / 2
    offset_diff = np.abs(normals @ mids.T - offsets[:, None])
    offset_diff = np.maximum(offset_diff, offset_diff.T)
    lo_own = np.einsum('ij,ij->i', directions, starts)
    hi_own = np.einsum('ij,ij->i', directions, ends)
    proj_start = directions @ starts.T
    proj_end = directions @ ends.T
    lo_other = np.minimum(proj_start, proj_end)
    hi_other = np.maximum(proj_start, proj_end)
    gap = np.maximum(lo_other - hi_own[:, None], lo_own[:, None] - hi_other)
    adjacency = (angle_diff <= math.radians(direction_tol)) & (offset_diff <= offset_tol) & (gap <= gap_tol)
    count, labels = connected_components(sp.csr_matrix(adjacency), directed=False)
    walls = [_wall(np.vstack([segments[idx].points for idx in np.flatnonzero(labels == label)]))
             for label in range(count)]
    if absorb_tol > 0:
        walls = _absorb(walls, absorb_tol, gap_tol)
    return walls


def _intersection(first, second):
    system = np.column_stack([first.direction, -second.direction])
    along = np.linalg.solve(system, second.start - first.start)
    return first.start + along[0] * first.direction


def find_corners(walls, snap=0.3, min_angle=30.0, merge_distance=0.05):
    """Corners of a set of walls

    Two walls crossing at min_angle or more form a corner where their
    lines intersect within snap of both segments and of an endpoint of at
    least one; those endpoints are moved onto the corner. Endpoints left
    unsnapped are free corners. Returns (walls, corners) with new wall
    objects.

    """
    walls = [LineSegment2(wall.start.copy(), wall.end.copy(), wall.inlier_count, wall.rms, wall.points)
             for wall in walls]
    snapped = np.zeros((len(walls), 2), dtype=bool)
    corners = []

    def add(point):
        if all(np.linalg.norm(point - corner) > merge_distance for corner in corners):
            corners.append(point)

    for idx in range(len(walls)):
        for jdx in range(idx + 1, len(walls)):
            first, second = walls[idx], walls[jdx]
            if abs(first.direction @ (J2 @ second.direction)) < math.sin(math.radians(min_angle)):
                continue
            point = _intersection(first, second)
            if first.distances(point[None])[0] > snap or second.distances(point[None])[0] > snap:
                continue
            moved = False
            for num, wall in ((idx, first), (jdx, second)):
                gaps = [np.linalg.norm(point - wall.start), np.linalg.norm(point - wall.end)]
                end = int(np.argmin(gaps))
                if gaps[end] <= snap:
                    if end == 0:
                        wall.start = point.copy()
                    else:
                        wall.end = point.copy()
                    snapped[num, end] = True
                    moved = True
            if moved:
                add(point)
    for num, wall in enumerate(walls):
        for end, point in enumerate((wall.start, wall.end)):
            if not snapped[num, end]:
                add(point.copy())
    return walls, np.array(corners).reshape(-1, 2)


def integrate_scans(frames, trajectory, extractor=None, direction_tol=3.0, offset_tol=0.10, gap_tol=0.5,
                    corner_snap=0.3, min_corner_angle=30.0, absorb_tol=0.05):
    """Floor plan from scans placed by the trajectory"""
    frames = list(frames)
    if len(trajectory) < len(frames):
        raise ValueError(f"trajectory has {len(trajectory)} poses for {len(frames)} frames")
    extractor = LineExtractor() if extractor is None else extractor
    segments = []
    for frame, pose in zip(frames, trajectory.poses):
        local = frame.segments if frame.segments is not None else extractor.extract(frame.scan)
        segments.extend(segment.transformed(pose) for segment in local)
    if not segments:
        return FloorPlan()
    walls = merge_segments(segments, direction_tol, offset_tol, gap_tol, absorb_tol)
    walls, corners = find_corners(walls, corner_snap, min_corner_angle)
    logger.info("integrated %s segments from %s scans into %s walls and %s corners", len(segments), len(frames),
                len(walls), len(corners))
    return FloorPlan(walls, corners)


def free_space_mask(points, scan, tolerance=0.05, max_range=np.inf):
    """Mask of sensor-frame points not farther than the scan return along their bearing

    Bearings without a return accept points within max_range.

    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    ranges = np.linalg.norm(points, axis=1)
    valid = scan.valid_points
    if len(valid) < 2:
        return ranges <= max_range
    scan_bearings = np.arctan2(valid[:, 1], valid[:, 0])
    order = np.argsort(scan_bearings)
    scan_bearings = scan_bearings[order]
    scan_ranges = np.linalg.norm(valid, axis=1)[order]
    resolution = 2 * math.pi / max(len(scan.points), 1)
    bearings = np.arctan2(points[:, 1], points[:, 0])
    upper = np.searchsorted(scan_bearings, bearings) % len(scan_bearings)
    lower = (upper - 1) % len(scan_bearings)
    diff_upper = np.abs(np.angle(np.exp(1j * (scan_bearings[upper] - bearings))))
    diff_lower = np.abs(np.angle(np.exp(1j * (scan_bearings[lower] - bearings))))
    nearest = np.where(diff_upper < diff_lower, upper, lower)
    has_return = np.minimum(diff_upper, diff_lower) <= 1.5 * resolution
    return np.where(has_return, ranges <= scan_ranges[nearest] + tolerance, ranges <= max_range)


def _rotate(points, angles):
    cos, sin = np.cos(angles), np.sin(angles)
    return np.column_stack([cos * points[:, 0] - sin * points[:, 1], sin * points[:, 0] + cos * points[:, 1]])


class FusedProblem:
    """Joint residuals over poses 1..N-1 and wall lines

    Three residual families, each divided by its robust width:
    LiDAR point-to-wall distances, epipolar residuals of tracked features
    with camera motion derived from the poses, and world-frame agreement
    of ground features transferred through the alignment. Pose 0 is held
    fixed.

    """

    def __init__(self, poses, walls, origin, lidar=None, epipolar=None, transfers=None,
                 lidar_sigma=0.05, ground_sigma=0.05):
        self.anchor = poses[0]
        self.initial_poses = list(poses)
        self.initial_walls = [(math.atan2(wall.normal[1], wall.normal[0]), wall.offset) for wall in walls]
        self.origin = np.asarray(origin, dtype=float)
        self.count = len(poses)
        self.lidar_sigma = lidar_sigma
        self.ground_sigma = ground_sigma
        empty2 = np.zeros((0, 2))
        self.lidar_frames, self.lidar_points, self.lidar_walls = lidar or (np.zeros(0, int), empty2, np.zeros(0, int))
        (self.epi_first, self.epi_second, self.epi_bearings_i, self.epi_bearings_j,
         self.epi_scale) = epipolar or (np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3)), np.zeros((0, 3)),
                                        np.zeros(0))
        (self.tr_first, self.tr_second, self.tr_points_i,
         self.tr_points_j) = transfers or (np.zeros(0, int), np.zeros(0, int), empty2, empty2)

    def lidar_only(self):
        """Copy of the problem without camera terms"""
        problem = copy.copy(self)
        problem.epi_first, problem.epi_second = np.zeros(0, int), np.zeros(0, int)
        problem.epi_bearings_i = problem.epi_bearings_j = np.zeros((0, 3))
        problem.epi_scale = np.zeros(0)
        problem.tr_first, problem.tr_second = np.zeros(0, int), np.zeros(0, int)
        problem.tr_points_i = problem.tr_points_j = np.zeros((0, 2))
        return problem

    @property
    def size(self):
        return 3 * (self.count - 1) + 2 * len(self.initial_walls)

    def initial(self):
        values = [pose.to_list() for pose in self.initial_poses[1:]] + [list(wall) for wall in self.initial_walls]
        return np.array([value for item in values for value in item], dtype=float)

    def unpack(self, params):
        poses = np.vstack([np.array(self.anchor.to_list()), params[:3 * (self.count - 1)].reshape(-1, 3)])
        walls = params[3 * (self.count - 1):].reshape(-1, 2)
        return poses[:, :2], poses[:, 2], walls[:, 0], walls[:, 1]

    def poses(self, params):
        translations, headings, _, _ = self.unpack(params)
        return [Pose2(float(x), float(y), float(heading)) for (x, y), heading in zip(translations, headings)]

    def _pose_columns(self, frames):
        return 3 * (frames - 1)

    def _wall_columns(self, walls):
        return 3 * (self.count - 1) + 2 * walls

    def _lidar(self, params):
        translations, headings, alphas, offsets = self.unpack(params)
        frames, walls = self.lidar_frames, self.lidar_walls
        world = _rotate(self.lidar_points, headings[frames]) + translations[frames]
        normals = np.column_stack([np.cos(alphas[walls]), np.sin(alphas[walls])])
        return world, normals, (np.einsum('ij,ij->i', normals, world) - offsets[walls]) / self.lidar_sigma

    def _transfer(self, params):
        translations, headings, _, _ = self.unpack(params)
        rotated_i = _rotate(self.tr_points_i, headings[self.tr_first])
        rotated_j = _rotate(self.tr_points_j, headings[self.tr_second])
        diff = rotated_i + translations[self.tr_first] - rotated_j - translations[self.tr_second]
        return rotated_i, rotated_j, diff / self.ground_sigma

    def _epipolar(self, params):
        translations, headings, _, _ = self.unpack(params)
        first, second = self.epi_first, self.epi_second
        angles = headings[first] - headings[second]
        relative = translations[first] - translations[second]
        lidar_translation = _rotate(relative, -headings[second])
        rotated_origin = _rotate(np.repeat(self.origin[None], len(first), axis=0), angles)
        offset = rotated_origin + lidar_translation - self.origin
        rotated_bearings = np.column_stack([_rotate(self.epi_bearings_i[:, :2], angles), self.epi_bearings_i[:, 2]])
        cross = np.cross(rotated_bearings, self.epi_bearings_j)
        values = self.epi_scale * np.einsum('ij,ij->i', offset, cross[:, :2])
        return angles, lidar_translation, rotated_origin, offset, rotated_bearings, cross, values

    def residuals(self, params):
        return np.concatenate([self._lidar(params)[2], self._epipolar(params)[-1],
                               self._transfer(params)[2].ravel()])

    def jacobian(self, params):
        translations, headings, alphas, offsets = self.unpack(params)
        rows, cols, vals = [], [], []

        def add(row, frames, values, axis):
            mask = frames > 0
            rows.append(row[mask])
            cols.append(self._pose_columns(frames[mask]) + axis)
            vals.append(values[mask])

        # LiDAR point-to-wall
        world, normals, _ = self._lidar(params)
        frames = self.lidar_frames
        row = np.arange(len(frames))
        lever = world - translations[frames]
        add(row, frames, normals[:, 0] / self.lidar_sigma, 0)
        add(row, frames, normals[:, 1] / self.lidar_sigma, 1)
        add(row, frames, np.einsum('ij,ij->i', normals, lever @ J2.T) / self.lidar_sigma, 2)
        walls = self._wall_columns(self.lidar_walls)
        rows.extend([row, row])
        cols.extend([walls, walls + 1])
        vals.extend([np.einsum('ij,ij->i', normals @ J2.T, world) / self.lidar_sigma,
                     np.full(len(row), -1.0 / self.lidar_sigma)])
        base = len(row)
        # epipolar
        angles, lidar_translation, rotated_origin, offset, rotated_bearings, cross, _ = self._epipolar(params)
        first, second = self.epi_first, self.epi_second
        scale = self.epi_scale
        row = base + np.arange(len(first))
        turned = np.column_stack([-rotated_bearings[:, 1], rotated_bearings[:, 0], np.zeros(len(first))])
        d_cross = np.cross(turned, self.epi_bearings_j)[:, :2]
        d_first = scale * (np.einsum('ij,ij->i', rotated_origin @ J2.T, cross[:, :2])
                           + np.einsum('ij,ij->i', offset, d_cross))
        d_second = -d_first - scale * np.einsum('ij,ij->i', lidar_translation @ J2.T, cross[:, :2])
        d_translation = scale[:, None] * _rotate(cross[:, :2], headings[second])
        add(row, first, d_first, 2)
        add(row, second, d_second, 2)
        for axis in (0, 1):
            add(row, first, d_translation[:, axis], axis)
            add(row, second, -d_translation[:, axis], axis)
        base += len(first)
        # ground transfer
        rotated_i, rotated_j, _ = self._transfer(params)
        inv = 1.0 / self.ground_sigma
        for axis in (0, 1):
            row = base + 2 * np.arange(len(self.tr_first)) + axis
            add(row, self.tr_first, np.full(len(row), inv), axis)
            add(row, self.tr_second, np.full(len(row), -inv), axis)
            add(row, self.tr_first, inv * (rotated_i @ J2.T)[:, axis], 2)
            add(row, self.tr_second, -inv * (rotated_j @ J2.T)[:, axis], 2)
        total = base + 2 * len(self.tr_first)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(total, self.size))


class FusedRefiner:
    """Joint refinement of a LiDAR trajectory and its floor plan with image features

    The LiDAR-only problem is always solved. Camera terms are added only
    for a hypothesis scoring at least min_score (bare transforms are
    trusted) whose epipolar residuals at the initial poses are mostly
    within epipolar_gate, and the fused solution is kept only when most
    ground transfers agree within transfer_gate metres and its LiDAR cost
    stays below max_lidar_ratio times the LiDAR-only cost. Otherwise the
    LiDAR-only solution is returned.

    After refine() the attribute report holds solver diagnostics, residual
    counts and the gate decision, and result the chosen SolverResult.

    """

    def __init__(self, lidar_sigma=0.05, pixel_sigma=2.0, ground_sigma=0.05, point_stride=3, max_iter=50,
                 free_space_tol=0.05, assoc_gate=0.15, transfer_offsets=(1, 2), min_score=0.8, epipolar_gate=3.0,
                 transfer_gate=0.10, min_support=0.6, max_lidar_ratio=1.5, max_range=6.0, mapping=None):
        self.lidar_sigma = lidar_sigma
        self.pixel_sigma = pixel_sigma
        self.ground_sigma = ground_sigma
        self.point_stride = point_stride
        self.max_iter = max_iter
        self.free_space_tol = free_space_tol
        self.assoc_gate = assoc_gate
        self.transfer_offsets = tuple(transfer_offsets)
        self.min_score = min_score
        self.epipolar_gate = epipolar_gate
        self.transfer_gate = transfer_gate
        self.min_support = min_support
        self.max_lidar_ratio = max_lidar_ratio
        self.max_range = max_range
        self.mapping = {} if mapping is None else dict(mapping)
        self.report = {}
        self.result = None

    def _lidar_terms(self, frames, trajectory, walls, stride=None):
        if not walls:
            return None
        stride = self.point_stride if stride is None else stride
        normals = np.array([wall.normal for wall in walls])
        offsets = np.array([wall.offset for wall in walls])
        directions = np.array([wall.direction for wall in walls])
        lo = np.einsum('ij,ij->i', directions, np.array([wall.start for wall in walls]))
        hi = np.einsum('ij,ij->i', directions, np.array([wall.end for wall in walls]))
        frame_ids, points, wall_ids = [], [], []
        for num, (frame, pose) in enumerate(zip(frames, trajectory.poses)):
            local = frame.scan.valid_points[::stride]
            if not len(local):
                continue
            world = pose.transform(local)
            distance = np.abs(world @ normals.T - offsets)
            along = world @ directions.T
            distance[(along < lo - self.assoc_gate) | (along > hi + self.assoc_gate)] = np.inf
            best = np.argmin(distance, axis=1)
            keep = distance[np.arange(len(world)), best] <= self.assoc_gate
            frame_ids.append(np.full(np.count_nonzero(keep), num))
            points.append(local[keep])
            wall_ids.append(best[keep])
        if not points:
            return None
        return np.concatenate(frame_ids), np.vstack(points), np.concatenate(wall_ids)

    def _bearings(self, frame, transform, topdown, intrinsics, track_ids):
        rays = homogeneous(frame.pixels(track_ids)) @ intrinsics.inverse.T
        return rays @ (rot3z(transform.phi) @ topdown.rotation).T

    def _epipolar_terms(self, frames, trajectory, transform, topdowns, intrinsics):
        focal = (intrinsics.fx + intrinsics.fy) / 2
        firsts, seconds, bearings_i, bearings_j, scales = [], [], [], [], []
        for num in range(1, len(frames)):
            if topdowns[num - 1] is None or topdowns[num] is None:
                continue
            shared = TrackStore.shared(frames[num - 1], frames[num])
            if not shared:
                continue
            motion = trajectory[num - 1].motion_to(trajectory[num])
            offset = motion.rotation @ transform.origin + motion.translation - transform.origin
            b_i = self._bearings(frames[num - 1], transform, topdowns[num - 1], intrinsics, shared)
            b_j = self._bearings(frames[num], transform, topdowns[num], intrinsics, shared)
            norms = np.linalg.norm(b_i, axis=1) * np.linalg.norm(b_j, axis=1)
            firsts.append(np.full(len(shared), num - 1))
            seconds.append(np.full(len(shared), num))
            bearings_i.append(b_i)
            bearings_j.append(b_j)
            scales.append(focal / (self.pixel_sigma * max(np.linalg.norm(offset), 1e-3) * norms))
        if not firsts:
            return None
        return (np.concatenate(firsts), np.concatenate(seconds), np.vstack(bearings_i), np.vstack(bearings_j),
                np.concatenate(scales))

    def _ground_points(self, frame, transform, topdown):
        """Ground features of a frame in its LiDAR coordinates, gated by free space"""
        if topdown is None or not frame.observations:
            return {}
        ids = sorted(frame.observations)
        points, depths = project_topdown_many(frame.pixels(ids), topdown)
        above = depths > HORIZON_EPSILON
        lidar = np.full_like(points, np.nan)
        lidar[above] = transform.apply(points[above])
        keep = above.copy()
        keep[above] = free_space_mask(lidar[above], frame.scan, self.free_space_tol, self.max_range)
        return {tid: lidar[num] for num, tid in enumerate(ids) if keep[num]}

    def _transfer_terms(self, frames, transform, topdowns):
        ground = [self._ground_points(frame, transform, topdown) for frame, topdown in zip(frames, topdowns)]
        firsts, seconds, points_i, points_j = [], [], [], []
        for num in range(len(frames)):
            for step in self.transfer_offsets:
                if num - step < 0:
                    continue
                shared = sorted(set(ground[num - step]) & set(ground[num]))
                if not shared:
                    continue
                firsts.append(np.full(len(shared), num - step))
                seconds.append(np.full(len(shared), num))
                points_i.append(np.array([ground[num - step][tid] for tid in shared]))
                points_j.append(np.array([ground[num][tid] for tid in shared]))
        if not firsts:
            return None
        return np.concatenate(firsts), np.concatenate(seconds), np.vstack(points_i), np.vstack(points_j)

    def problem(self, frames, trajectory, hypothesis, intrinsics, plan=None):
        """Build the FusedProblem of a sequence"""
        transform = getattr(hypothesis, 'transform', hypothesis)
        plan = integrate_scans(frames, trajectory, **self.mapping) if plan is None else plan
        topdowns = []
        for frame in frames:
            try:
                topdowns.append(topdown_frame(frame.vp, intrinsics))
            except DegenerateVanishingPoint as err:
                logger.warning("frame %s: %s", frame.index, err)
                topdowns.append(None)
        return FusedProblem(trajectory.poses, plan.walls, transform.origin,
                            lidar=self._lidar_terms(frames, trajectory, plan.walls),
                            epipolar=self._epipolar_terms(frames, trajectory, transform, topdowns, intrinsics),
                            transfers=self._transfer_terms(frames, transform, topdowns),
                            lidar_sigma=self.lidar_sigma, ground_sigma=self.ground_sigma)

    def _gate(self, hypothesis, problem):
        """Reason to leave the camera terms out, or None"""
        if getattr(hypothesis, 'pairs_evaluated', 0) > 0 and hypothesis.score < self.min_score:
            return 'score'
        if not len(problem.epi_first) and not len(problem.tr_first):
            return 'no_features'
        if len(problem.epi_first):
            support = float(np.mean(np.abs(problem._epipolar(problem.initial())[-1]) <= self.epipolar_gate))
            self.report['epipolar_support'] = support
            if support < self.min_support:
                return 'epipolar'
        return None

    def _transfer_support(self, problem, params):
        if not len(problem.tr_first):
            return 1.0
        diff = problem._transfer(params)[2] * problem.ground_sigma
        return float(np.mean(np.linalg.norm(diff, axis=1) <= self.transfer_gate))

    def _solve_fused(self, solver, problem, lidar_problem, lidar_result):
        """Fused SolverResult, or the reason to reject it"""
        try:
            result = solver.solve(problem, problem.initial())
        except SolverDiverged as err:
            logger.warning("fused refinement failed: %s", err)
            return None, 'diverged'
        lidar_cost = huber_cost(lidar_problem._lidar(lidar_result.x)[2], 1.0)
        fused_cost = huber_cost(problem._lidar(result.x)[2], 1.0)
        support = self._transfer_support(problem, result.x)
        self.report.update({'lidar_cost': lidar_cost, 'fused_lidar_cost': fused_cost, 'transfer_support': support})
        if support < self.min_support:
            return None, 'transfer'
        if fused_cost > self.max_lidar_ratio * lidar_cost + 1e-12:
            return None, 'lidar_cost'
        return result, None

    def _refined_plan(self, frames, trajectory, problem, params, plan):
        """Floor plan of the optimized wall lines clipped to the points supporting them"""
        if not plan.walls:
            return FloorPlan()
        _, _, alphas, offsets = problem.unpack(params)
        normals = np.column_stack([np.cos(alphas), np.sin(alphas)])
        directions = normals @ J2
        walls = []
        for old, normal, direction, offset in zip(plan.walls, normals, directions, offsets):
            ends = np.array([old.start @ direction, old.end @ direction])
            walls.append(LineSegment2(offset * normal + ends.min() * direction,
                                      offset * normal + ends.max() * direction, old.inlier_count, old.rms, old.points))
        terms = self._lidar_terms(frames, trajectory, walls, stride=1)
        if terms is not None:
            frame_ids, local, wall_ids = terms
            poses = trajectory.as_array()
            world = _rotate(local, poses[frame_ids, 2]) + poses[frame_ids, :2]
            for num, (normal, direction, offset) in enumerate(zip(normals, directions, offsets)):
                members = world[wall_ids == num]
                if len(members) < 2:
                    continue
                along = members @ direction
                if np.ptp(along) <= 0:
                    continue
                rms = float(np.sqrt(np.mean((members @ normal - offset) ** 2)))
                walls[num] = LineSegment2(offset * normal + along.min() * direction,
                                          offset * normal + along.max() * direction, len(members), rms, members)
        walls, corners = find_corners(walls, self.mapping.get('corner_snap', 0.3),
                                      self.mapping.get('min_corner_angle', 30.0))
        return FloorPlan(walls, corners)

    def refine(self, frames, trajectory, hypothesis, intrinsics):
        """Return the refined (Trajectory, FloorPlan)"""
        frames = list(frames)
        plan = integrate_scans(frames, trajectory, **self.mapping)
        self.result = None
        if len(frames) < 2:
            self.report = {'status': 'skipped', 'frames': len(frames)}
            return trajectory, plan
        problem = self.problem(frames, trajectory, hypothesis, intrinsics, plan)
        lidar_problem = problem.lidar_only()
        self.report = {'frames': len(frames), 'lidar_residuals': len(problem.lidar_points),
                       'epipolar_residuals': len(problem.epi_first), 'transfer_residuals': len(problem.tr_first)}
        solver = LevenbergMarquardt(max_iter=self.max_iter, huber=1.0)
        try:
            result = solver.solve(lidar_problem, lidar_problem.initial())
        except SolverDiverged as err:
            logger.warning("LiDAR refinement failed: %s", err)
            self.report['status'] = 'diverged'
            self.report['message'] = str(err)
            return trajectory, plan
        chosen = lidar_problem
        gate = self._gate(hypothesis, problem)
        if gate is None:
            fused, gate = self._solve_fused(solver, problem, lidar_problem, result)
            if fused is not None:
                result, chosen = fused, problem
        if gate is not None:
            logger.info("fused refinement without camera terms: %s", gate)
        self.report['camera'] = chosen is problem
        self.report['gate'] = gate or 'accepted'
        self.report.update(result.to_dict())
        self.report['status'] = 'converged' if result.converged else 'stopped'
        logger.info("fused refinement: cost %.6g -> %.6g in %s iterations (%s lidar, %s epipolar, %s transfer)",
                    result.initial_cost, result.final_cost, result.iterations, self.report['lidar_residuals'],
                    self.report['epipolar_residuals'] if self.report['camera'] else 0,
                    self.report['transfer_residuals'] if self.report['camera'] else 0)
        self.result = result
        refined = Trajectory(chosen.poses(result.x))
        return refined, self._refined_plan(frames, refined, chosen, result.x, plan)


def fused_refine(frames, trajectory, hypothesis, intrinsics, **kwargs):
    """Jointly refine poses and walls; returns (Trajectory, FloorPlan)"""
    return FusedRefiner(**kwargs).refine(frames, trajectory, hypothesis, intrinsics)

