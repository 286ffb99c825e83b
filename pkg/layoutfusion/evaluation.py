"""Segmentation, corner and floor area metrics"""

import dataclasses
import logging
import math

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from shapely.geometry import Polygon
from shapely.ops import unary_union

from . import DimensionMismatch, InvalidPolygon, NoCorners
from .geometry import homogeneous, raycast_segments, rot3z, wrap_angle


logger = logging.getLogger(__name__)

UNKNOWN = 0
GROUND = 1
WALL = 2


def label_grid(image_size, stride):
    """Pixel centres of the label grid; returns (us, vs)"""
    width, height = image_size
    return np.arange(stride / 2, width, stride), np.arange(stride / 2, height, stride)


def label_image(walls, camera_rotation, camera_center, pose, intrinsics, image_size, stride=8, wall_height=None):
    """Per-pixel labels by casting viewing rays against the floor and walls

    camera_rotation maps camera coordinates to the LiDAR frame and
    camera_center is the camera position in it (z down, floor at z = 0).
    A pixel is ground when its ray meets the floor before any wall, and
    wall k (label 2 + k) when it meets wall k first below wall_height.
    Everything else is unknown.

    """
    us, vs = label_grid(image_size, stride)
    grid_u, grid_v = np.meshgrid(us, vs)
    pixels = np.column_stack([grid_u.ravel(), grid_v.ravel()])
    rays = homogeneous(pixels) @ intrinsics.inverse.T @ np.asarray(camera_rotation).T
    rays = rays @ rot3z(pose.heading).T
    center = np.asarray(camera_center, dtype=float)
    origin = pose.transform(center[:2])
    horizontal = np.linalg.norm(rays[:, :2], axis=1)
    flat = horizontal > 1e-12
    labels = np.full(len(rays), UNKNOWN, dtype=np.int32)
    wall_dist = np.full(len(rays), np.inf)
    wall_index = np.full(len(rays), -1)
    walls = np.asarray(walls, dtype=float).reshape(-1, 4)
    if len(walls) and flat.any():
        dist, index = raycast_segments(origin, rays[flat, :2] / horizontal[flat, None], walls)
        wall_dist[flat] = dist
        wall_index[flat] = index
    with np.errstate(divide='ignore', invalid='ignore'):
        floor_dist = np.where(rays[:, 2] > 1e-12, -center[2] / rays[:, 2] * horizontal, np.inf)
        hit_height = center[2] + rays[:, 2] * wall_dist / np.where(flat, horizontal, 1.0)
    ground = (rays[:, 2] > 1e-12) & (floor_dist < wall_dist)
    wall = ~ground & np.isfinite(wall_dist)
    if wall_height is not None:
        wall &= hit_height >= -wall_height
    labels[ground] = GROUND
    labels[wall] = WALL + wall_index[wall]
    return labels.reshape(len(vs), len(us))


def render_segmentation(plan, pose, hypothesis, topdown, intrinsics, image_size, stride=8):
    """Label image of a floor plan seen through an alignment hypothesis

    The camera rotation is R_phi R_g and its centre lies delta above the
    floor at the hypothesis origin; walls are unbounded in height.

    """
    transform = getattr(hypothesis, 'transform', hypothesis)
    rotation = rot3z(transform.phi) @ topdown.rotation
    center = np.append(transform.origin, -transform.delta)
    return label_image(plan.wall_array(), rotation, center, pose, intrinsics, image_size, stride)


def relabel_walls(labels, mapping):
    """Replace predicted wall labels by matched ground-truth labels; unmatched walls become unknown"""
    result = labels.copy()
    walls = labels >= WALL
    lookup = np.full(int(labels.max(initial=0)) + 1, UNKNOWN, dtype=labels.dtype)
    for pred, truth in mapping.items():
        if WALL + pred < len(lookup):
            lookup[WALL + pred] = WALL + truth
    result[walls] = lookup[labels[walls]]
    return result


def segmentation_accuracy(pred, truth):
    """Percentage of labelled truth pixels predicted correctly"""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionMismatch(f"prediction shape {pred.shape} differs from truth shape {truth.shape}")
    labelled = truth != UNKNOWN
    total = np.count_nonzero(labelled)
    if not total:
        logger.warning("no labelled pixels in ground truth")
        return 0.0
    return 100.0 * np.count_nonzero(pred[labelled] == truth[labelled]) / total


@dataclasses.dataclass
class CornerErrors:
    """Corner RMSE with match counts"""

    rmse: float
    matched: int
    unmatched_pred: int
    unmatched_truth: int

    def to_dict(self):
        return {'rmse': self.rmse if math.isfinite(self.rmse) else None, 'matched': self.matched,
                'unmatched_pred': self.unmatched_pred, 'unmatched_truth': self.unmatched_truth}


def corner_rmse(pred, truth, match_radius=1.0):
    """RMSE of greedily matched corners within match_radius

    Pairs are taken in order of increasing distance, each corner at most
    once. Unmatched corners are counted but do not enter the RMSE.

    """
    pred_corners = getattr(pred, 'corners', pred)
    truth_corners = getattr(truth, 'corners', truth)
    pred_corners = np.asarray(pred_corners, dtype=float).reshape(-1, 2)
    truth_corners = np.asarray(truth_corners, dtype=float).reshape(-1, 2)
    if not len(pred_corners) or not len(truth_corners):
        raise NoCorners(f"{len(pred_corners)} predicted and {len(truth_corners)} true corners")
    distances = cdist(pred_corners, truth_corners)
    order = np.argsort(distances, axis=None, kind='stable')
    used_pred, used_truth = set(), set()
    errors = []
    for flat in order:
        row, col = np.unravel_index(flat, distances.shape)
        if distances[row, col] > match_radius:
            break
        if row in used_pred or col in used_truth:
            continue
        used_pred.add(row)
        used_truth.add(col)
        errors.append(distances[row, col])
    rmse = float(np.sqrt(np.mean(np.square(errors)))) if errors else math.inf
    return CornerErrors(rmse, len(errors), len(pred_corners) - len(errors), len(truth_corners) - len(errors))


def _as_region(polygons):
    if isinstance(polygons, Polygon):
        polygons = [polygons]
    shapes = []
    for item in polygons:
        shape = item if hasattr(item, 'is_valid') else Polygon(np.asarray(item, dtype=float))
        if not shape.is_valid:
            raise InvalidPolygon(f"polygon with {len(np.asarray(shape.exterior.coords)) - 1} vertices is not simple")
        shapes.append(shape)
    return unary_union(shapes) if shapes else Polygon()


def fscore(pred, truth):
    """Area F-score 2 |A & B| / (|A| + |B|) of two polygon sets"""
    pred_region, truth_region = _as_region(pred), _as_region(truth)
    total = pred_region.area + truth_region.area
    if total <= 0:
        return 0.0
    return float(min(1.0, 2 * pred_region.intersection(truth_region).area / total))


def match_walls(pred, truth, angle_tol=10.0, offset_tol=0.3):
    """Map predicted wall indices to the closest compatible ground-truth wall"""
    mapping = {}
    for pidx, wall in enumerate(pred.walls):
        best, best_offset = None, offset_tol
        middle = (wall.start + wall.end) / 2
        for tidx, other in enumerate(truth.walls):
            angle = abs(wrap_angle(2 * (wall.angle - other.angle))) / 2
            if angle > math.radians(angle_tol):
                continue
            offset = float(other.distances(middle[None])[0])
            if offset <= best_offset:
                best, best_offset = tidx, offset
        if best is not None:
            mapping[pidx] = best
    return mapping


def alignment_error(estimate, truth):
    """Relative scale, angle (degrees) and origin errors of an alignment"""
    estimate = getattr(estimate, 'transform', estimate)
    return {'scale': abs(estimate.delta - truth.delta) / truth.delta,
            'angle': math.degrees(abs(wrap_angle(estimate.phi - truth.phi))),
            'origin': float(np.linalg.norm(estimate.origin - truth.origin))}


def summarize_telemetry(records):
    """Per-frame bank size and best hypothesis from tracker telemetry records"""
    if not records:
        return pd.DataFrame(columns=['frame', 'hypotheses', 'best_score', 'best_id'])
    frame = pd.json_normalize(records)
    frame = frame.sort_values(['frame', 'score', 'inliers', 'id'], ascending=[True, False, False, True])
    best = frame.groupby('frame', sort=True).first()
    summary = pd.DataFrame({'hypotheses': frame.groupby('frame').size(), 'best_score': best['score'],
                            'best_id': best['id'], 'best_delta': best['transform.delta'],
                            'best_phi': best['transform.phi']})
    return summary.reset_index()
