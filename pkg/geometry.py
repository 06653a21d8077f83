"""Local reference frames, relative polar edge features and radius-limited neighbour queries."""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from sklearn.neighbors import KDTree

from errors import ArgumentError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi


def wrap_angle(angle):
    """Normalize to (-pi, pi]. Values already in range are returned untouched."""
    a = np.asarray(angle, dtype=np.float64)
    inside = (a > -np.pi) & (a <= np.pi)
    wrapped = np.pi - np.mod(np.pi - a, TWO_PI)
    wrapped = np.where(wrapped <= -np.pi, wrapped + TWO_PI, wrapped)
    out = np.where(inside, a, wrapped)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def position(self) -> Tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class RelEdgeFeature:
    dist: float
    edge_dir: float
    rel_heading: float
    time_gap: int
    attr: int


def local_polar(dx, dy, heading):
    """Distance and bearing of displacements (dx, dy) seen from frames with ``heading``"""
    dx = np.asarray(dx, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    c, s = np.cos(heading), np.sin(heading)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    dist = np.hypot(dx, dy)
    angle = np.where(dist > 0.0, wrap_angle(np.arctan2(ly, lx)), 0.0)
    return dist, angle


def to_local_polar(target: Sequence[float], frame: Pose) -> Tuple[float, float]:
    dist, angle = local_polar(target[0] - frame.x, target[1] - frame.y, frame.heading)
    return float(dist), float(angle)


def relative_edge(src: Pose, dst: Pose, time_gap: int = 0, attr: int = 0) -> RelEdgeFeature:
    dist, edge_dir = to_local_polar(src.position, dst)
    return RelEdgeFeature(dist, edge_dir, wrap_angle(src.heading - dst.heading), int(time_gap), int(attr))


def relative_edges(src_xy: np.ndarray, src_heading: np.ndarray, dst_xy: np.ndarray,
                   dst_heading: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized relative_edge over aligned source/destination arrays"""
    src_xy = np.asarray(src_xy, dtype=np.float64).reshape(-1, 2)
    dst_xy = np.asarray(dst_xy, dtype=np.float64).reshape(-1, 2)
    dist, edge_dir = local_polar(src_xy[:, 0] - dst_xy[:, 0], src_xy[:, 1] - dst_xy[:, 1], dst_heading)
    rel_heading = wrap_angle(np.asarray(src_heading) - np.asarray(dst_heading))
    return dist, edge_dir, np.asarray(rel_heading).reshape(dist.shape)


def edge_feature_matrix(dist: np.ndarray, edge_dir: np.ndarray, rel_heading: np.ndarray,
                        extra_columns: Sequence[np.ndarray] = ()) -> np.ndarray:
    """[dist, cos edge_dir, sin edge_dir, cos rel_heading, sin rel_heading, extras...]"""
    columns = [dist, np.cos(edge_dir), np.sin(edge_dir), np.cos(rel_heading), np.sin(rel_heading)]
    columns.extend(np.asarray(c, dtype=np.float64) for c in extra_columns)
    return np.stack([np.asarray(c, dtype=np.float64).reshape(-1) for c in columns], axis=-1)


def one_hot(codes: np.ndarray, num_classes: int) -> List[np.ndarray]:
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    return [(codes == c).astype(np.float64) for c in range(num_classes)]


def rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def to_local(points: np.ndarray, origin: Sequence[float], heading) -> np.ndarray:
    """Express global points [.., 2] in frames at ``origin`` with ``heading`` (broadcasting)"""
    points = np.asarray(points, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    dx = points[..., 0] - origin[..., 0]
    dy = points[..., 1] - origin[..., 1]
    c, s = np.cos(heading), np.sin(heading)
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def to_global(points: np.ndarray, origin: Sequence[float], heading) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    c, s = np.cos(heading), np.sin(heading)
    x = c * points[..., 0] - s * points[..., 1] + origin[..., 0]
    y = s * points[..., 0] + c * points[..., 1] + origin[..., 1]
    return np.stack([x, y], axis=-1)


class NeighborIndex:
    """KD-tree over fixed 2-D candidates answering inclusive radius queries"""

    def __init__(self, candidates: np.ndarray):
        self.points = np.asarray(candidates, dtype=np.float64).reshape(-1, 2)
        self._tree = KDTree(self.points) if len(self.points) else None

    def query(self, centers: np.ndarray, radius: float) -> List[np.ndarray]:
        if not radius > 0:
            raise ArgumentError(f"radius must be positive, got {radius}")
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
        if self._tree is None or len(centers) == 0:
            return [np.zeros(0, dtype=np.int64) for _ in range(len(centers))]
        hits = self._tree.query_radius(centers, r=radius)
        return [np.sort(h.astype(np.int64)) for h in hits]


def radius_neighbors(candidates: Sequence[Sequence[float]], center: Sequence[float], radius: float) -> List[int]:
    """Indices of candidates within ``radius`` of ``center`` (inclusive), ascending"""
    return [int(i) for i in NeighborIndex(np.asarray(candidates)).query(np.asarray(center), radius)[0]]
