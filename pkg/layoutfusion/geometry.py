"""Closed-form geometry of top-down rectification and similarity alignment

Planar frames are forward-right-down: x forward, y right and z pointing
to the floor. The camera frame is x right, y down, z along the optical
axis.

"""

import dataclasses
import logging
import math

import numpy as np

from . import CoincidentPoints, DegenerateMotion, DegenerateVanishingPoint, PointAtHorizon, ZeroTranslation


logger = logging.getLogger(__name__)

VP_EPSILON = 1e-6
ROTATION_EPSILON = math.radians(0.5)
POINT_EPSILON = 1e-9
HORIZON_EPSILON = 1e-9
TRANSLATION_EPSILON = 1e-9

J2 = np.array([[0.0, -1.0], [1.0, 0.0]])


def wrap_angle(angle):
    """Wrap angle to the interval (-pi, pi]"""
    angle = math.remainder(float(angle), 2 * math.pi)
    return math.pi if angle <= -math.pi else angle


def rot2(angle):
    """2x2 rotation matrix"""
    cos, sin = math.cos(angle), math.sin(angle)
    return np.array([[cos, -sin], [sin, cos]])


def rot3z(angle):
    """3x3 rotation about the z axis"""
    rotation = np.eye(3)
    rotation[:2, :2] = rot2(angle)
    return rotation


def skew(vector):
    """Cross-product matrix [v]x"""
    x, y, z = vector
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def homogeneous(points):
    """Append a unit coordinate to 2D points"""
    points = np.asarray(points, dtype=float)
    return np.concatenate([points, np.ones(points.shape[:-1] + (1,))], axis=-1)


def fit_line(points):
    """Total least squares line through points

    Returns (centroid, unit direction, unit normal, rms distance).

    """
    points = np.asarray(points, dtype=float)
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    direction = vt[0]
    normal = J2 @ direction
    rms = float(np.sqrt(np.mean(((points - centroid) @ normal) ** 2)))
    return centroid, direction, normal, rms


def raycast_segments(origin, directions, segments):
    """Cast 2D rays from origin against line segments

    directions is an (N, 2) array of unit vectors and segments an (M, 4)
    array of endpoints (x1, y1, x2, y2). Returns the hit distance and the
    index of the nearest segment per ray, inf and -1 where nothing is hit.

    """
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    segments = np.atleast_2d(np.asarray(segments, dtype=float))
    if not len(segments):
        return np.full(len(directions), np.inf), np.full(len(directions), -1)
    start = segments[:, :2] - np.asarray(origin, dtype=float)
    edge = segments[:, 2:] - segments[:, :2]
    dx, dy = directions[:, 0:1], directions[:, 1:2]
    denom = dx * edge[:, 1] - dy * edge[:, 0]
    with np.errstate(divide='ignore', invalid='ignore'):
        dist = (start[:, 0] * edge[:, 1] - start[:, 1] * edge[:, 0]) / denom
        along = (start[:, 0] * dy - start[:, 1] * dx) / denom
    valid = (np.abs(denom) > 1e-12) & (dist > 1e-12) & (along >= -1e-9) & (along <= 1.0 + 1e-9)
    dist = np.where(valid, dist, np.inf)
    index = np.argmin(dist, axis=1)
    nearest = dist[np.arange(len(directions)), index]
    return nearest, np.where(np.isfinite(nearest), index, -1)


@dataclasses.dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels"""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self):
        """Intrinsic matrix K"""
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self):
        """Inverse of K"""
        return np.array([[1 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self):
        """Return intrinsics as a plain dictionary"""
        return dataclasses.asdict(self)

    @classmethod
    def identity(cls):
        """K = I"""
        return cls(1.0, 1.0, 0.0, 0.0)


@dataclasses.dataclass(frozen=True)
class VanishingPoint:
    """Vertical vanishing point in pixels"""

    u: float
    v: float

    def homogeneous(self):
        """Homogeneous pixel coordinates"""
        return np.array([self.u, self.v, 1.0])

    def normalized(self, intrinsics):
        """Normalized coordinates (x_v, y_v)"""
        point = intrinsics.inverse @ self.homogeneous()
        return float(point[0]), float(point[1])


@dataclasses.dataclass(frozen=True, eq=False)
class TopDownFrame:
    """Rotation R_g (rows e_X, e_Y, e_Z) and homography H_g = R_g K^-1"""

    rotation: np.ndarray
    homography: np.ndarray

    @property
    def e_x(self):
        return self.rotation[0]

    @property
    def e_y(self):
        return self.rotation[1]

    @property
    def e_z(self):
        return self.rotation[2]

    def depths(self, pixels):
        """Third homogeneous coordinate h_g3 . p for pixels; positive below the horizon"""
        return homogeneous(pixels) @ self.homography[2]

    def below_horizon(self, pixels, epsilon=HORIZON_EPSILON):
        """Mask of pixels whose viewing ray points toward the floor"""
        return self.depths(pixels) > epsilon

    def to_image(self, points):
        """Map top-down points back to pixels

        Returns (pixels, in_front) where in_front marks points that lie in
        front of the camera.

        """
        rays = homogeneous(points) @ np.linalg.inv(self.homography).T
        in_front = rays[..., 2] > 0
        with np.errstate(divide='ignore', invalid='ignore'):
            pixels = rays[..., :2] / rays[..., 2:3]
        return pixels, in_front


def vertical_direction(vp, intrinsics):
    """Unit vertical direction n_v = K^-1 p_v / h_v"""
    ray = intrinsics.inverse @ vp.homogeneous()
    return ray / np.linalg.norm(ray)


def topdown_frame(vp, intrinsics, epsilon=VP_EPSILON):
    """Top-down reference frame in camera space from the vertical vanishing point

    e_Z is the vertical direction signed to point to the floor: the one of
    +-n_v that points downward in the image. e_X is orthogonal to it with
    no camera-y component and e_Y completes a right-handed frame.

    """
    x_v, y_v = vp.normalized(intrinsics)
    if abs(x_v) <= epsilon or abs(y_v) <= epsilon:
        raise DegenerateVanishingPoint(
            f"vanishing point ({vp.u}, {vp.v}) has normalized coordinates ({x_v}, {y_v})")
    e_z = math.copysign(1.0, y_v) * vertical_direction(vp, intrinsics)
    e_x = np.array([-1.0 / x_v, 0.0, 1.0])
    e_x /= np.linalg.norm(e_x)
    e_y = np.cross(e_z, e_x)
    rotation = np.vstack([e_x, e_y, e_z])
    return TopDownFrame(rotation=rotation, homography=rotation @ intrinsics.inverse)


def project_topdown(pixel, frame, epsilon=HORIZON_EPSILON):
    """Project one pixel to top-down coordinates p^g"""
    ray = frame.homography @ homogeneous(pixel)
    if abs(ray[2]) < epsilon:
        raise PointAtHorizon(f"pixel {tuple(pixel)} is on the rectified horizon")
    return ray[:2] / ray[2]


def project_topdown_many(pixels, frame):
    """Project an (N, 2) pixel array; returns (points, depths)

    Points with non-positive depth are at or above the horizon and are not
    ground points; their coordinates are nan.

    """
    rays = homogeneous(pixels) @ frame.homography.T
    depths = rays[:, 2]
    points = np.full((len(rays), 2), np.nan)
    valid = depths > HORIZON_EPSILON
    points[valid] = rays[valid, :2] / depths[valid, None]
    return points, depths


@dataclasses.dataclass(frozen=True, eq=False)
class SimilarityTransform2:
    """Similarity p^l = delta R_phi p^g + origin"""

    delta: float
    phi: float
    origin: np.ndarray

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"scale must be positive, got {self.delta}")
        object.__setattr__(self, 'phi', wrap_angle(self.phi))
        object.__setattr__(self, 'origin', np.asarray(self.origin, dtype=float).reshape(2))

    @property
    def rotation(self):
        """R_phi"""
        return rot2(self.phi)

    def apply(self, points):
        """Map top-down points to the LiDAR frame"""
        return self.delta * np.asarray(points, dtype=float) @ self.rotation.T + self.origin

    def inverse(self):
        """Similarity mapping LiDAR points to top-down points"""
        back = rot2(-self.phi)
        return SimilarityTransform2(1.0 / self.delta, -self.phi, -(back @ self.origin) / self.delta)

    def close_to(self, other, scale_tol, angle_tol, origin_tol):
        """Whether other is within relative scale, angle and origin tolerances"""
        return (abs(self.delta - other.delta) <= scale_tol * other.delta
                and abs(wrap_angle(self.phi - other.phi)) <= angle_tol
                and np.linalg.norm(self.origin - other.origin) <= origin_tol)

    def to_dict(self):
        """Return as a plain dictionary"""
        return {'delta': float(self.delta), 'phi': float(self.phi), 'origin': [float(x) for x in self.origin]}

    @classmethod
    def from_dict(cls, data):
        """Create from to_dict output"""
        return cls(data['delta'], data['phi'], data['origin'])

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, np.zeros(2))


def apply_similarity(transform, point):
    """p^l = delta R_phi p^g + o"""
    return transform.apply(point)


@dataclasses.dataclass(frozen=True, eq=False)
class PointPair2:
    """Corresponding source and destination points"""

    source: np.ndarray
    destination: np.ndarray


def similarity_from_pairs(first, second, epsilon=POINT_EPSILON):
    """Similarity mapping both sources onto both destinations

    Scale and angle come from the difference vectors, so the result is
    never a reflection.

    """
    source_diff = np.asarray(second.source, dtype=float) - first.source
    dest_diff = np.asarray(second.destination, dtype=float) - first.destination
    source_len = np.linalg.norm(source_diff)
    dest_len = np.linalg.norm(dest_diff)
    if source_len < epsilon or dest_len < epsilon:
        raise CoincidentPoints(f"point distances {source_len:g} and {dest_len:g} below {epsilon:g}")
    delta = dest_len / source_len
    phi = math.atan2(dest_diff[1], dest_diff[0]) - math.atan2(source_diff[1], source_diff[0])
    rotation = rot2(phi)
    source_mean = (np.asarray(first.source, dtype=float) + second.source) / 2
    dest_mean = (np.asarray(first.destination, dtype=float) + second.destination) / 2
    return SimilarityTransform2(delta, phi, dest_mean - delta * rotation @ source_mean)


@dataclasses.dataclass(frozen=True, eq=False)
class LidarMotion:
    """Rigid motion mapping scan-i coordinates to scan-j coordinates"""

    angle: float
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'angle', wrap_angle(self.angle))
        object.__setattr__(self, 'translation', np.asarray(self.translation, dtype=float).reshape(2))

    @property
    def rotation(self):
        """R^l"""
        return rot2(self.angle)

    def apply(self, points):
        """Map frame-i points to frame j"""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def then(self, other):
        """Motion applying self first and other second"""
        return LidarMotion(self.angle + other.angle, other.rotation @ self.translation + other.translation)

    def inverse(self):
        return LidarMotion(-self.angle, -(rot2(-self.angle) @ self.translation))

    def to_list(self):
        """[angle, tx, ty]"""
        return [float(self.angle), float(self.translation[0]), float(self.translation[1])]

    @classmethod
    def from_list(cls, values):
        return cls(values[0], values[1:3])

    @classmethod
    def identity(cls):
        return cls(0.0, np.zeros(2))


@dataclasses.dataclass(frozen=True)
class Pose2:
    """Planar pose of the LiDAR in the world frame"""

    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0

    @property
    def rotation(self):
        return rot2(self.heading)

    @property
    def translation(self):
        return np.array([self.x, self.y])

    def transform(self, points):
        """Map sensor-frame points to world"""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse_transform(self, points):
        """Map world points to the sensor frame"""
        return (np.asarray(points, dtype=float) - self.translation) @ self.rotation

    def compose(self, other):
        """self o other"""
        x, y = self.transform(other.translation)
        return Pose2(float(x), float(y), wrap_angle(self.heading + other.heading))

    def inverse(self):
        x, y = -(self.rotation.T @ self.translation)
        return Pose2(float(x), float(y), wrap_angle(-self.heading))

    def motion_to(self, other):
        """LidarMotion mapping coordinates in this frame to coordinates in other"""
        return LidarMotion(self.heading - other.heading,
                           other.rotation.T @ (self.translation - other.translation))

    def advance(self, odometry):
        """Next pose given odometry mapping this frame's coordinates to the next"""
        step = odometry.inverse()
        return self.compose(Pose2(float(step.translation[0]), float(step.translation[1]), step.angle))

    def to_list(self):
        """[x, y, heading]"""
        return [float(self.x), float(self.y), float(self.heading)]

    @classmethod
    def from_list(cls, values):
        return cls(float(values[0]), float(values[1]), wrap_angle(values[2]))


def motion_constraint_pair(motion, pg_i, pg_j, epsilon=ROTATION_EPSILON):
    """Point pair from one tracked ground feature seen in scans i and j

    The destination is the instantaneous center of rotation of the LiDAR
    motion, (I - R)^-1 t, and the source is the corresponding point of the
    top-down motion, (I - R)^-1 (p^g_j - R p^g_i).

    """
    if abs(motion.angle) <= epsilon:
        raise DegenerateMotion(f"rotation {math.degrees(motion.angle):.4f} deg below threshold")
    system = np.eye(2) - motion.rotation
    destination = np.linalg.solve(system, motion.translation)
    source = np.linalg.solve(system, np.asarray(pg_j, dtype=float) - motion.rotation @ pg_i)
    return PointPair2(source=source, destination=destination)


def camera_motion_from_hypothesis(transform, frame, motion):
    """Camera rotation and scale-normalized translation between views"""
    rotation = frame.rotation.T @ rot3z(motion.angle) @ frame.rotation
    offset = motion.rotation @ transform.origin + motion.translation - transform.origin
    translation = frame.rotation.T @ rot3z(transform.phi).T @ np.append(offset, 0.0) / transform.delta
    return rotation, translation


def fundamental_matrix(rotation, translation, intrinsics, intrinsics2=None, epsilon=TRANSLATION_EPSILON):
    """F = K'^-T [t]x R K^-1"""
    if np.linalg.norm(translation) < epsilon:
        raise ZeroTranslation(f"camera translation norm {np.linalg.norm(translation):g}")
    intrinsics2 = intrinsics if intrinsics2 is None else intrinsics2
    return intrinsics2.inverse.T @ skew(translation) @ rotation @ intrinsics.inverse


def epipolar_residual(transform, fmatrix, pixel, pixel2):
    """Scale-free epipolar score delta^2 (p'^T F p)^2"""
    value = homogeneous(pixel2) @ fmatrix @ homogeneous(pixel)
    return float(transform.delta ** 2 * value ** 2)


def epipolar_residuals(transform, fmatrix, pixels, pixels2):
    """Vectorized epipolar_residual over (N, 2) pixel arrays"""
    values = np.einsum('ij,jk,ik->i', homogeneous(pixels2), fmatrix, homogeneous(pixels))
    return transform.delta ** 2 * values ** 2
