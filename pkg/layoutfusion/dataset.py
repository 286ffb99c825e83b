"""Dataset directories: meta.json, frames.jsonl and optional ground truth"""

import dataclasses
import json
import logging
import os

import numpy as np

from . import DatasetError
from .features import ImageLineSet, LidarScan, SensorFrame
from .geometry import CameraIntrinsics, LidarMotion, VanishingPoint
from .util import file_open, read_json, write_json, json_dumps


logger = logging.getLogger(__name__)

META_FILE = 'meta.json'
FRAMES_FILES = ('frames.jsonl', 'frames.jsonl.gz')
TRUTH_FILE = 'gt.json'
LABEL_DIR = 'labels'


def label_filename(index):
    return f'frame_{index:04d}.npy'


def frame_to_record(frame):
    """Dataset record of a SensorFrame"""
    record = {'index': int(frame.index), 'timestamp': float(frame.timestamp),
              'scan': frame.scan.valid_points.tolist(),
              'tracks': [{'id': int(tid), 'px': [float(x) for x in frame.observations[tid]]}
                         for tid in sorted(frame.observations)],
              'lines': {'horizontal': frame.lines.horizontal.tolist(), 'vertical': frame.lines.vertical.tolist()},
              'vp': [float(frame.vp.u), float(frame.vp.v)]}
    if frame.odometry is not None:
        record['odometry'] = frame.odometry.to_list()
    return record


def record_to_frame(record, min_range=0.0, max_range=np.inf):
    """SensorFrame from a dataset record"""
    scan = LidarScan.from_points(float(record.get('timestamp', record['index'])), record['scan'],
                                 min_range, max_range)
    observations = {int(item['id']): np.asarray(item['px'], dtype=float) for item in record['tracks']}
    lines = record.get('lines', {})
    odometry = LidarMotion.from_list(record['odometry']) if 'odometry' in record else None
    return SensorFrame(int(record['index']), scan, observations,
                       ImageLineSet(lines.get('horizontal'), lines.get('vertical')),
                       VanishingPoint(*map(float, record['vp'])), odometry)


def write_dataset(directory, meta, frames, truth=None, labels=None, compress=False):
    """Write a dataset directory; returns its path"""
    os.makedirs(directory, exist_ok=True)
    write_json(meta, os.path.join(directory, META_FILE))
    with file_open(os.path.join(directory, FRAMES_FILES[1] if compress else FRAMES_FILES[0]), 'w') as fobj:
        for frame in frames:
            fobj.write(json_dumps(frame_to_record(frame)) + '\n')
    if labels is not None:
        os.makedirs(os.path.join(directory, LABEL_DIR), exist_ok=True)
        for frame, label in zip(frames, labels):
            np.save(os.path.join(directory, LABEL_DIR, label_filename(frame.index)), label)
    if truth is not None:
        truth = dict(truth)
        if labels is not None:
            truth['labels'] = LABEL_DIR
        write_json(truth, os.path.join(directory, TRUTH_FILE))
    logger.info("wrote %s frames to %s", len(frames), directory)
    return directory


@dataclasses.dataclass(eq=False)
class Dataset:
    """Frames of a capture with its sensor description and optional ground truth"""

    directory: str
    meta: dict
    frames: list
    truth: dict = None

    @property
    def intrinsics(self):
        return CameraIntrinsics(**{key: float(self.meta['intrinsics'][key]) for key in ('fx', 'fy', 'cx', 'cy')})

    @property
    def image_size(self):
        return int(self.meta['image_width']), int(self.meta['image_height'])

    @property
    def max_range(self):
        return float(self.meta['lidar_max_range'])

    @property
    def name(self):
        return self.meta.get('world', os.path.basename(os.path.normpath(self.directory)))

    def labels(self, index):
        """Ground-truth label grid of a frame, or None"""
        if not self.truth or 'labels' not in self.truth:
            return None
        path = os.path.join(self.directory, self.truth['labels'], label_filename(index))
        if not os.path.isfile(path):
            return None
        return np.load(path)


def _read_meta(directory):
    path = os.path.join(directory, META_FILE)
    if not os.path.isfile(path):
        raise DatasetError(f"missing dataset file '{path}'")
    try:
        meta = read_json(path)
        for key in ('fx', 'fy', 'cx', 'cy'):
            float(meta['intrinsics'][key])
        for key in ('image_width', 'image_height', 'lidar_min_range', 'lidar_max_range'):
            float(meta[key])
    except (ValueError, KeyError, TypeError) as err:
        raise DatasetError(f"malformed dataset file '{path}': {err!r}") from err
    return meta


def read_dataset(directory):
    """Read a dataset directory

    Raises DatasetError naming the offending file (and frame) when the
    directory, a required file or a record is missing or malformed.

    """
    if not os.path.isdir(directory):
        raise DatasetError(f"dataset directory '{directory}' does not exist")
    meta = _read_meta(directory)
    paths = [os.path.join(directory, name) for name in FRAMES_FILES if os.path.isfile(os.path.join(directory, name))]
    if not paths:
        raise DatasetError(f"missing dataset file '{os.path.join(directory, FRAMES_FILES[0])}'")
    frames = []
    with file_open(paths[0], 'r') as fobj:
        for num, line in enumerate(fobj):
            if not line.strip():
                continue
            try:
                frames.append(record_to_frame(json.loads(line), float(meta['lidar_min_range']),
                                              float(meta['lidar_max_range'])))
            except (ValueError, KeyError, TypeError) as err:
                raise DatasetError(f"malformed record in '{paths[0]}' at frame {num}: {err!r}") from err
    for num in range(1, len(frames)):
        if frames[num].index <= frames[num - 1].index:
            raise DatasetError(f"frames in '{paths[0]}' out of order at frame {frames[num].index}")
    truth = None
    truth_path = os.path.join(directory, TRUTH_FILE)
    if os.path.isfile(truth_path):
        try:
            truth = read_json(truth_path)
        except ValueError as err:
            raise DatasetError(f"malformed dataset file '{truth_path}': {err!r}") from err
    logger.info("read %s frames from %s", len(frames), directory)
    return Dataset(directory, meta, frames, truth)
