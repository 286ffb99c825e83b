"""Synthetic indoor scenes with LiDAR, camera features and ground truth

Worlds are sets of full-height vertical walls on a single floor. A robot
carries a 2D LiDAR and a camera on a fixed mount; the simulator casts
LiDAR rays, projects floor and wall landmarks as feature tracks, emits
clipped image lines and the exact vertical vanishing point, and renders
ground-truth pixel labels.

"""

import dataclasses
import logging
import math

import numpy as np
from matplotlib.path import Path
from shapely.geometry import Point, Polygon
from shapely.ops import unary_union
from tqdm import tqdm

from . import ConfigurationError, DegenerateVanishingPoint, PoseOutsideWorld
from .dataset import write_dataset
from .evaluation import label_image
from .features import ImageLineSet, LidarScan, LineSegment2, SensorFrame, group_lines
from .geometry import CameraIntrinsics, Pose2, SimilarityTransform2, VanishingPoint, raycast_segments, rot2, \
    topdown_frame, wrap_angle
from .mapping import FloorPlan, Trajectory, find_corners


logger = logging.getLogger(__name__)

NEAR_PLANE = 0.05

# LiDAR_from_camera for a camera looking along the LiDAR x axis
BASE_ROTATION = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def _rx(angle):
    cos, sin = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, cos, -sin], [0.0, sin, cos]])


def _rz(angle):
    rotation = np.eye(3)
    rotation[:2, :2] = rot2(angle)
    return rotation


PRESETS = {
    'square': {
        'rooms': [[(-2.5, -2.5), (2.5, -2.5), (2.5, 2.5), (-2.5, 2.5)]],
        'obstacles': [],
        'waypoints': [(-1.2, -1.0), (1.0, -1.0), (1.0, 1.2)],
        'max_range': 6.0,
        'feature_walls': [],
    },
    'cluttered': {
        'rooms': [[(-3.0, -2.5), (3.0, -2.5), (3.0, 2.5), (-3.0, 2.5)]],
        'obstacles': [[(1.8, 1.2), (2.6, 1.2), (2.6, 2.1), (1.8, 2.1)],
                      [(-2.6, -2.2), (-1.6, -2.2), (-1.6, -1.6), (-2.6, -1.6)]],
        'waypoints': [(-1.6, -0.6), (1.0, -0.6), (1.0, 0.9)],
        'max_range': 6.0,
        'feature_walls': [],
    },
    'corridor': {
        'rooms': [[(0.0, -1.0), (12.0, -1.0), (12.0, 1.0), (0.0, 1.0)]],
        'obstacles': [],
        'waypoints': [(0.8, 0.5), (1.8, -0.2), (11.2, -0.2)],
        'max_range': 3.5,
        'feature_walls': [1, 3],
    },
}


@dataclasses.dataclass(frozen=True)
class CameraMount:
    """Camera pose relative to the LiDAR; angles in degrees"""

    height: float = 1.0
    pitch: float = 20.0
    roll: float = 3.0
    yaw: float = 4.0
    offset: tuple = (0.10, 0.05)
    min_pitch: float = 5.0

    def __post_init__(self):
        if not self.height > 0:
            raise ConfigurationError(f"camera height must be positive, got {self.height}")
        if abs(self.pitch) < self.min_pitch:
            raise ConfigurationError(f"camera pitch {self.pitch} deg below the minimum of {self.min_pitch} deg")
        object.__setattr__(self, 'offset', tuple(float(x) for x in self.offset))

    @property
    def rotation(self):
        """Camera-to-LiDAR rotation; positive pitch looks down"""
        return (_rz(math.radians(self.yaw)) @ BASE_ROTATION @ _rx(-math.radians(self.pitch))
                @ _rz(math.radians(self.roll)))

    @property
    def center(self):
        """Camera centre in the LiDAR frame"""
        return np.array([self.offset[0], self.offset[1], -self.height])

    def vanishing_point(self, intrinsics):
        """Image of the downward vertical direction"""
        down = self.rotation.T @ np.array([0.0, 0.0, 1.0])
        if abs(down[2]) < 1e-12:
            raise DegenerateVanishingPoint(f"vertical vanishing point at infinity for pitch {self.pitch} deg")
        return VanishingPoint(intrinsics.fx * down[0] / down[2] + intrinsics.cx,
                              intrinsics.fy * down[1] / down[2] + intrinsics.cy)

    def alignment(self, intrinsics):
        """True similarity between the top-down frame and the LiDAR frame"""
        frame = topdown_frame(self.vanishing_point(intrinsics), intrinsics)
        relative = self.rotation @ frame.rotation.T
        return SimilarityTransform2(self.height, math.atan2(relative[1, 0], relative[0, 0]), self.offset[:2])


@dataclasses.dataclass(frozen=True)
class NoiseModel:
    """Sensor noise levels"""

    range_sigma: float = 0.01
    pixel_sigma: float = 0.5
    dropout: float = 0.1

    @classmethod
    def none(cls):
        return cls(0.0, 0.0, 0.0)


def _rings_to_walls(rings):
    walls = []
    for ring in rings:
        for num, start in enumerate(ring):
            end = ring[(num + 1) % len(ring)]
            walls.append([start[0], start[1], end[0], end[1]])
    return walls


def _inside(polygon, points):
    """Vectorized point-in-polygon test honouring holes"""
    parts = getattr(polygon, 'geoms', [polygon])
    inside = np.zeros(len(points), dtype=bool)
    for part in parts:
        mask = Path(np.asarray(part.exterior.coords)).contains_points(points)
        for interior in part.interiors:
            mask &= ~Path(np.asarray(interior.coords)).contains_points(points)
        inside |= mask
    return inside


@dataclasses.dataclass(eq=False)
class World:
    """Static scene, sensors and mount"""

    name: str
    walls: np.ndarray
    floor: Polygon
    landmarks: np.ndarray
    distractors: np.ndarray
    waypoints: np.ndarray
    mount: CameraMount = dataclasses.field(default_factory=CameraMount)
    intrinsics: CameraIntrinsics = dataclasses.field(
        default_factory=lambda: CameraIntrinsics(800.0, 800.0, 960.0, 540.0))
    image_size: tuple = (1920, 1080)
    noise: NoiseModel = dataclasses.field(default_factory=NoiseModel)
    wall_height: float = 2.5
    beams: int = 360
    min_range: float = 0.1
    max_range: float = 6.0

    @property
    def alignment(self):
        return self.mount.alignment(self.intrinsics)

    @property
    def landmark_on_floor(self):
        return np.abs(self.landmarks[:, 2]) < 1e-12

    def contains(self, pose):
        return self.floor.contains(Point(pose.x, pose.y))

    def plan(self):
        """Ground-truth floor plan"""
        walls = [LineSegment2(wall[:2], wall[2:]) for wall in self.walls]
        walls, corners = find_corners(walls, snap=1e-6)
        return FloorPlan(walls, corners)

    def vertical_edges(self):
        """Unique wall endpoints"""
        points = []
        for point in self.walls.reshape(-1, 2):
            if all(np.linalg.norm(point - other) > 1e-9 for other in points):
                points.append(point)
        return np.array(points).reshape(-1, 2)

    def meta(self):
        """Dataset meta record"""
        width, height = self.image_size
        return {'intrinsics': self.intrinsics.to_dict(), 'image_width': int(width), 'image_height': int(height),
                'lidar_min_range': float(self.min_range), 'lidar_max_range': float(self.max_range),
                'lidar_beams': int(self.beams), 'world': self.name}


def make_world(name='square', seed=0, mount=None, noise=None, intrinsics=None, image_size=(1920, 1080),
               wall_height=2.5, beams=360, min_range=0.1, max_range=None, floor_density=6.0,
               base_spacing=0.4, wall_density=2.0, feature_wall_factor=4.0, distractors_per_wall=3):
    """Build a preset world with randomly placed landmarks and distractor lines"""
    if name not in PRESETS:
        raise ConfigurationError(f"unknown world '{name}', expected one of {sorted(PRESETS)}")
    preset = PRESETS[name]
    mount = CameraMount() if mount is None else mount
    if wall_height <= mount.height:
        raise ConfigurationError(f"wall height {wall_height} must exceed camera height {mount.height}")
    rng = np.random.default_rng(seed)
    walls = np.array(_rings_to_walls(preset['rooms'] + preset['obstacles']), dtype=float)
    floor = unary_union([Polygon(room) for room in preset['rooms']])
    if preset['obstacles']:
        floor = floor.difference(unary_union([Polygon(item) for item in preset['obstacles']]))
    # floor texture
    minx, miny, maxx, maxy = floor.bounds
    count = int(round(floor.area * floor_density))
    candidates = rng.uniform([minx, miny], [maxx, maxy], size=(4 * count + 16, 2))
    floor_points = candidates[_inside(floor, candidates)][:count]
    landmarks = [np.column_stack([floor_points, np.zeros(len(floor_points))])]
    lines = []
    for num, (x1, y1, x2, y2) in enumerate(walls):
        start, end = np.array([x1, y1]), np.array([x2, y2])
        length = np.linalg.norm(end - start)
        factor = feature_wall_factor if num in preset['feature_walls'] else 1.0
        base = np.arange(base_spacing / 2, length, base_spacing / factor) / length
        base = np.clip(base + rng.uniform(-0.1, 0.1, len(base)) * base_spacing / length, 0.0, 1.0)
        landmarks.append(np.column_stack([start + base[:, None] * (end - start), np.zeros(len(base))]))
        interior = int(round(length * wall_density * factor))
        along = rng.uniform(0.0, 1.0, interior)
        heights = rng.uniform(0.3, min(2.0, wall_height - 0.1), interior)
        landmarks.append(np.column_stack([start + along[:, None] * (end - start), -heights]))
        for _ in range(distractors_per_wall):
            span = rng.uniform(0.3, 0.8)
            first = rng.uniform(0.0, 1.0 - span)
            height = rng.uniform(0.15, mount.height - 0.15)
            a, b = start + first * (end - start), start + (first + span) * (end - start)
            lines.append([a[0], a[1], -height, b[0], b[1], -height])
    return World(name, walls, floor, np.vstack(landmarks), np.array(lines).reshape(-1, 6),
                 np.array(preset['waypoints'], dtype=float), mount,
                 CameraIntrinsics(800.0, 800.0, 960.0, 540.0) if intrinsics is None else intrinsics,
                 tuple(image_size), NoiseModel() if noise is None else noise, wall_height, beams, min_range,
                 preset['max_range'] if max_range is None else max_range)


def simulate_scan(world, pose, rng=None, timestamp=0.0):
    """Ray-cast LiDAR scan at uniform bearings from -pi"""
    if not world.contains(pose):
        raise PoseOutsideWorld(f"pose ({pose.x:.3f}, {pose.y:.3f}) is outside world '{world.name}'")
    bearings = -math.pi + 2 * math.pi * np.arange(world.beams) / world.beams
    angles = bearings + pose.heading
    ranges, _ = raycast_segments(pose.translation, np.column_stack([np.cos(angles), np.sin(angles)]), world.walls)
    if rng is not None and world.noise.range_sigma > 0:
        ranges = ranges + rng.normal(0.0, world.noise.range_sigma, len(ranges))
    valid = np.isfinite(ranges) & (ranges >= world.min_range) & (ranges <= world.max_range)
    points = ranges[valid, None] * np.column_stack([np.cos(bearings[valid]), np.sin(bearings[valid])])
    return LidarScan(timestamp, points)


@dataclasses.dataclass(eq=False)
class CameraView:
    """Everything the camera yields at one pose"""

    observations: dict
    raw_lines: np.ndarray
    line_kinds: list
    vp: VanishingPoint
    labels: np.ndarray = None


class _Camera:
    """True camera at a robot pose"""

    def __init__(self, world, pose):
        self.world = world
        self.pose = pose
        self.rotation = world.mount.rotation
        self.center = world.mount.center
        self.origin = pose.transform(self.center[:2])

    def to_camera(self, points):
        """World (x, y, z) to camera coordinates"""
        points = np.atleast_2d(points)
        local = np.column_stack([self.pose.inverse_transform(points[:, :2]), points[:, 2]])
        return (local - self.center) @ self.rotation

    def project(self, camera_points):
        k = self.world.intrinsics
        return np.column_stack([k.fx * camera_points[:, 0] / camera_points[:, 2] + k.cx,
                                k.fy * camera_points[:, 1] / camera_points[:, 2] + k.cy])

    def visible(self, points):
        """Mask of world xy points with an unobstructed line of sight"""
        diff = np.atleast_2d(points) - self.origin
        dist = np.linalg.norm(diff, axis=1)
        mask = dist > 1e-9
        hits = np.full(len(diff), np.inf)
        if mask.any():
            hits[mask], _ = raycast_segments(self.origin, diff[mask] / dist[mask, None], self.world.walls)
        return mask & (hits >= dist - 1e-6)

    def interval(self, start, end):
        """Parameter range of a 3D segment in front of the camera and inside the image"""
        k = self.world.intrinsics
        width, height = self.world.image_size
        q0 = self.to_camera(start[None])[0]
        q1 = self.to_camera(end[None])[0] - q0
        constraints = []
        for coeff in (np.array([0.0, 0.0, 1.0]), np.array([k.fx, 0.0, k.cx]),
                      np.array([-k.fx, 0.0, width - k.cx]), np.array([0.0, k.fy, k.cy]),
                      np.array([0.0, -k.fy, height - k.cy])):
            constraints.append((coeff @ q0, coeff @ q1))
        constraints[0] = (constraints[0][0] - NEAR_PLANE, constraints[0][1])
        low, high = 0.0, 1.0
        for offset, slope in constraints:
            if abs(slope) < 1e-15:
                if offset < 0:
                    return None
                continue
            bound = -offset / slope
            if slope > 0:
                low = max(low, bound)
            else:
                high = min(high, bound)
        return (low, high) if high - low > 1e-12 else None

    def segment_runs(self, start, end, spacing=0.01, min_pixels=10.0, vertical=False):
        """Visible image pieces of a 3D segment as (N, 4) pixel lines"""
        limits = self.interval(start, end)
        if limits is None:
            return []
        low, high = limits
        if vertical:
            if not self.visible(start[None, :2])[0]:
                return []
            runs = [(low, high)]
        else:
            length = np.linalg.norm((end - start)[:2]) * (high - low)
            count = int(np.clip(math.ceil(length / spacing) + 1, 2, 2000))
            params = np.linspace(low, high, count)
            samples = start[:2] + params[:, None] * (end - start)[:2]
            visible = self.visible(samples)
            runs = []
            num = 0
            while num < count:
                if not visible[num]:
                    num += 1
                    continue
                first = num
                while num + 1 < count and visible[num + 1]:
                    num += 1
                runs.append((params[first], params[num]))
                num += 1
        lines = []
        for first, last in runs:
            ends = np.vstack([start + first * (end - start), start + last * (end - start)])
            pixels = self.project(self.to_camera(ends))
            if np.linalg.norm(pixels[1] - pixels[0]) >= min_pixels:
                lines.append(pixels.ravel())
        return lines


def simulate_camera(world, pose, rng=None, labels=True, label_stride=8):
    """Feature tracks, raw image lines, vanishing point and labels at a pose"""
    if not world.contains(pose):
        raise PoseOutsideWorld(f"pose ({pose.x:.3f}, {pose.y:.3f}) is outside world '{world.name}'")
    camera = _Camera(world, pose)
    width, height = world.image_size
    points = camera.to_camera(world.landmarks)
    with np.errstate(divide='ignore', invalid='ignore'):
        pixels = camera.project(points)
    seen = (points[:, 2] > NEAR_PLANE) & (pixels[:, 0] >= 0) & (pixels[:, 0] <= width) & \
        (pixels[:, 1] >= 0) & (pixels[:, 1] <= height)
    seen &= camera.visible(world.landmarks[:, :2])
    if rng is not None:
        if world.noise.pixel_sigma > 0:
            pixels = pixels + rng.normal(0.0, world.noise.pixel_sigma, pixels.shape)
        if world.noise.dropout > 0:
            seen &= rng.random(len(pixels)) >= world.noise.dropout
    observations = {int(tid): pixels[tid] for tid in np.flatnonzero(seen)}
    lines, kinds = [], []

    def emit(start, end, kind, vertical=False):
        for line in camera.segment_runs(np.asarray(start, dtype=float), np.asarray(end, dtype=float),
                                        vertical=vertical):
            lines.append(line)
            kinds.append(kind)

    for x1, y1, x2, y2 in world.walls:
        emit((x1, y1, 0.0), (x2, y2, 0.0), 'boundary')
        emit((x1, y1, -world.wall_height), (x2, y2, -world.wall_height), 'ceiling')
    for segment in world.distractors:
        emit(segment[:3], segment[3:], 'distractor')
    for x, y in world.vertical_edges():
        emit((x, y, 0.0), (x, y, -world.wall_height), 'vertical', vertical=True)
    raw = np.array(lines).reshape(-1, 4)
    if rng is not None and world.noise.pixel_sigma > 0 and len(raw):
        raw = raw + rng.normal(0.0, world.noise.pixel_sigma, raw.shape)
    truth = None
    if labels:
        truth = label_image(world.walls, camera.rotation, camera.center, pose, world.intrinsics,
                            world.image_size, label_stride, world.wall_height)
    return CameraView(observations, raw, kinds, world.mount.vanishing_point(world.intrinsics), truth)


@dataclasses.dataclass
class TrajectorySpec:
    """Waypoint path and sampling of frames along it"""

    waypoints: list
    spacing: tuple = (0.10, 0.20)
    heading_wobble: float = 1.0
    lateral_wobble: float = 0.01
    max_turn: float = 12.0


def sample_trajectory(spec, rng, max_frames=None):
    """Frame poses along a waypoint path

    Every waypoint is a frame and carries the heading of the leg leaving
    it; frames in between are spaced randomly within spec.spacing. Where
    the heading changes by more than max_turn degrees between frames, the
    robot turns on the spot through intermediate frames.

    """
    waypoints = np.asarray(spec.waypoints, dtype=float).reshape(-1, 2)
    legs = [(waypoints[num], waypoints[num + 1]) for num in range(len(waypoints) - 1)
            if np.linalg.norm(waypoints[num + 1] - waypoints[num]) > 1e-9]
    if not legs:
        return [Pose2(float(waypoints[0, 0]), float(waypoints[0, 1]), 0.0)]
    low, high = spec.spacing
    positions, headings = [], []
    for start, end in legs:
        length = np.linalg.norm(end - start)
        direction = (end - start) / length
        heading = math.atan2(direction[1], direction[0])
        if headings and spec.max_turn:
            turn = wrap_angle(heading - headings[-1])
            steps = int(math.ceil(abs(turn) / math.radians(spec.max_turn)))
            for step in range(1, steps):
                positions.append(start.copy())
                headings.append(headings[-1] + turn / steps)
        positions.append(start.copy())
        headings.append(heading)
        along = rng.uniform(low, high)
        while along < length - low / 2:
            positions.append(start + along * direction)
            headings.append(heading)
            along += rng.uniform(low, high)
    positions.append(legs[-1][1].copy())
    headings.append(headings[-1])
    if max_frames is not None:
        positions, headings = positions[:max_frames], headings[:max_frames]
    poses = []
    for position, heading in zip(positions, headings):
        wobble = rng.normal(0.0, math.radians(spec.heading_wobble)) if spec.heading_wobble else 0.0
        lateral = rng.normal(0.0, spec.lateral_wobble) if spec.lateral_wobble else 0.0
        shifted = position + lateral * np.array([-math.sin(heading), math.cos(heading)])
        poses.append(Pose2(float(shifted[0]), float(shifted[1]), wrap_angle(heading + wobble)))
    return poses


@dataclasses.dataclass(eq=False)
class SimulatedSequence:
    """Frames of a simulated run with its ground truth"""

    world: World
    frames: list
    poses: list
    labels: list = None
    seed: int = 0

    @property
    def alignment(self):
        return self.world.alignment

    @property
    def trajectory(self):
        return Trajectory(list(self.poses))

    def with_true_odometry(self):
        """Set every frame's odometry from the ground-truth poses"""
        for frame, odometry in zip(self.frames, self.trajectory.odometry()):
            frame.odometry = odometry
        return self.frames

    def ground_tracks(self):
        """Ids of tracks that lie on the floor"""
        return set(int(tid) for tid in np.flatnonzero(self.world.landmark_on_floor))

    def truth(self):
        """Ground-truth record of the dataset format"""
        return {'poses': [pose.to_list() for pose in self.poses], 'alignment': self.alignment.to_dict(),
                'plan': self.world.plan().to_dict(),
                'floor': [[list(map(float, xy)) for xy in np.asarray(part.exterior.coords)]
                          for part in getattr(self.world.floor, 'geoms', [self.world.floor])],
                'holes': [[list(map(float, xy)) for xy in np.asarray(hole.coords)]
                          for part in getattr(self.world.floor, 'geoms', [self.world.floor])
                          for hole in part.interiors],
                'ground_tracks': sorted(self.ground_tracks()), 'world': self.world.name, 'seed': self.seed}

    def write(self, directory, compress=False):
        """Write as a dataset directory"""
        return write_dataset(directory, self.world.meta(), self.frames, self.truth(), self.labels, compress)


def generate_sequence(world, spec=None, seed=0, max_frames=None, labels=True, label_stride=8, group_angle=2.0):
    """Simulate frames along a trajectory

    All randomness is drawn from one generator seeded by seed, in the
    order trajectory, then per frame scan and camera.

    """
    spec = TrajectorySpec(world.waypoints.tolist()) if spec is None else spec
    rng = np.random.default_rng(seed)
    poses = sample_trajectory(spec, rng, max_frames)
    frames, label_images = [], []
    vp = world.mount.vanishing_point(world.intrinsics)
    for index, pose in enumerate(tqdm(poses, desc='simulate', disable=None)):
        scan = simulate_scan(world, pose, rng, timestamp=0.1 * index)
        view = simulate_camera(world, pose, rng, labels, label_stride)
        lines = group_lines(view.raw_lines, vp, world.intrinsics, group_angle) if len(view.raw_lines) else ImageLineSet()
        frames.append(SensorFrame(index, scan, view.observations, lines, view.vp))
        label_images.append(view.labels)
    logger.info("simulated %s frames in world '%s'", len(frames), world.name)
    return SimulatedSequence(world, frames, poses, label_images if labels else None, seed)
