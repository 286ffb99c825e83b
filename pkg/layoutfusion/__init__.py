"""LayoutFusion package"""

import logging


logger = logging.getLogger(__name__)


class LayoutFusionError(Exception):
    """LayoutFusion error"""


class ConfigurationError(LayoutFusionError):
    """Configuration error for LayoutFusion"""


class DatasetError(LayoutFusionError):
    """Missing or malformed dataset file"""


class LayoutFusionRuntimeError(LayoutFusionError):
    """Runtime error for LayoutFusion"""


class DegenerateVanishingPoint(LayoutFusionRuntimeError):
    """Vertical vanishing point too close to an image axis"""


class PointAtHorizon(LayoutFusionRuntimeError):
    """Pixel maps to the rectified horizon or above it"""


class CoincidentPoints(LayoutFusionRuntimeError):
    """Two points of a minimal subset coincide"""


class DegenerateMotion(LayoutFusionRuntimeError):
    """LiDAR rotation too small for a motion constraint"""


class ZeroTranslation(LayoutFusionRuntimeError):
    """Camera translation vanishes and epipolar geometry is undefined"""


class IcpDiverged(LayoutFusionRuntimeError):
    """Scan matching ended with too few inliers"""


class NoValidMotion(LayoutFusionRuntimeError):
    """No scan pair in the window rotates enough"""


class NoMatureHypothesis(LayoutFusionRuntimeError):
    """No hypothesis has been evaluated over enough frames"""


class SkippedPair(LayoutFusionRuntimeError):
    """Frame pair could not be used for hypothesis evaluation"""


class RankDeficient(LayoutFusionRuntimeError):
    """Associated lines do not constrain all parameters

    The hypothesis attribute holds the unchanged input, flagged.

    """

    def __init__(self, message, hypothesis=None):
        super().__init__(message)
        self.hypothesis = hypothesis


class SolverDiverged(LayoutFusionRuntimeError):
    """Nonlinear least squares failed to decrease the cost"""


class PoseOutsideWorld(LayoutFusionRuntimeError):
    """Simulated pose is not inside the free space"""


class DimensionMismatch(LayoutFusionRuntimeError):
    """Label images differ in shape"""


class NoCorners(LayoutFusionRuntimeError):
    """Floor plan has no corners to compare"""


class InvalidPolygon(LayoutFusionRuntimeError):
    """Polygon is not simple"""
