"""Geometric substrate for graph construction on 2-D point clouds.

Coordinate normalization, trigonometric node features for periodic domains,
relative edge features, Delaunay triangulation, support radii derived from
triangle medians, and ghost-tile extension of periodic domains.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.spatial

from .errors import GeometryError

__all__ = [
    "Domain",
    "PointCloud",
    "Triangulation",
    "normalize_linear",
    "denormalize_linear",
    "angular_coords",
    "node_struct_features",
    "edge_struct_features",
    "edge_features_from_zeta_delta",
    "delaunay",
    "circumcircle_contains",
    "support_radii",
    "extend_periodic",
]


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box with per-dimension periodicity flags."""

    lower: np.ndarray
    upper: np.ndarray
    periodic: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=np.float64)
        upper = np.asarray(self.upper, dtype=np.float64)
        periodic = np.asarray(self.periodic, dtype=bool)
        if lower.shape != upper.shape or lower.shape != periodic.shape:
            raise ValueError("domain fields must share one shape of length d")
        if not np.all(lower < upper):
            raise ValueError("domain requires lower[k] < upper[k] for all k")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "periodic", periodic)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def extent(self) -> np.ndarray:
        return self.upper - self.lower


UNIT_SQUARE = Domain(np.zeros(2), np.ones(2), np.zeros(2, dtype=bool))
UNIT_TORUS = Domain(np.zeros(2), np.ones(2), np.ones(2, dtype=bool))


@dataclass(frozen=True)
class PointCloud:
    """Point coordinates (N, d) living inside a domain."""

    coords: np.ndarray
    domain: Domain

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != self.domain.dim:
            raise ValueError("coords must be (N, d) matching the domain dimension")
        if coords.shape[0] < 3:
            raise ValueError("a point cloud needs at least 3 points")
        object.__setattr__(self, "coords", coords)

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class Triangulation:
    """Simplices (T, 3) of vertex indices into ``points`` (N, d).

    Simplices are stored with sorted vertex indices and sorted rows, so two
    triangulations of the same point set compare equal independently of the
    construction order.
    """

    simplices: np.ndarray
    points: np.ndarray = field(repr=False)


def normalize_linear(coords: np.ndarray, domain: Domain) -> np.ndarray:
    """Map domain coordinates to [-1, 1]^d via the affine 2*(x - lower)/L - 1."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[-1] != domain.dim:
        raise ValueError(
            f"coords have dimension {coords.shape[-1]}, domain has {domain.dim}"
        )
    return 2.0 * (coords - domain.lower) / domain.extent - 1.0


def denormalize_linear(zeta: np.ndarray, domain: Domain) -> np.ndarray:
    """Inverse of :func:`normalize_linear`."""
    zeta = np.asarray(zeta, dtype=np.float64)
    return domain.lower + (zeta + 1.0) * domain.extent / 2.0


def angular_coords(zeta: np.ndarray) -> np.ndarray:
    """Map normalized coordinates in [-1, 1] to angles in [0, 2*pi]."""
    return np.pi * (np.asarray(zeta, dtype=np.float64) + 1.0)


def node_struct_features(zeta: np.ndarray, periodic: bool, k_freq: int) -> np.ndarray:
    """Structural features of nodes at normalized coordinates ``zeta`` (..., d).

    Non-periodic domains use the normalized coordinates themselves (width d).
    Periodic domains use sines and cosines of the angular coordinates at
    frequencies 1..k_freq (width 2*d*k_freq), which makes the features
    continuous across the wrap.
    """
    zeta = np.asarray(zeta, dtype=np.float64)
    if not periodic:
        return zeta.copy()
    if k_freq < 1:
        raise ValueError("periodic node features require k_freq >= 1")
    alpha = angular_coords(zeta)  # (..., d)
    ks = np.arange(1, k_freq + 1, dtype=np.float64)
    ka = alpha[..., :, None] * ks  # (..., d, K)
    sin = np.sin(ka).reshape(*zeta.shape[:-1], -1)
    cos = np.cos(ka).reshape(*zeta.shape[:-1], -1)
    return np.concatenate([sin, cos], axis=-1)


def edge_features_from_zeta_delta(dzeta: np.ndarray) -> np.ndarray:
    """Relative-coordinate edge features from zeta_receiver - zeta_sender.

    The displacement is scaled by the diameter 2*sqrt(d) of the normalized
    domain and concatenated with its Euclidean norm, giving width d + 1 with
    the norm component in [0, 1] for in-domain endpoints.
    """
    dzeta = np.asarray(dzeta, dtype=np.float64)
    d = dzeta.shape[-1]
    rel = dzeta / (2.0 * np.sqrt(d))
    norm = np.linalg.norm(rel, axis=-1, keepdims=True)
    return np.concatenate([rel, norm], axis=-1)


def edge_struct_features(zeta_i: np.ndarray, zeta_j: np.ndarray) -> np.ndarray:
    """Edge features for sender coordinates ``zeta_i`` and receiver ``zeta_j``."""
    zeta_i = np.asarray(zeta_i, dtype=np.float64)
    zeta_j = np.asarray(zeta_j, dtype=np.float64)
    return edge_features_from_zeta_delta(zeta_j - zeta_i)


def delaunay(points: np.ndarray) -> Triangulation:
    """Delaunay triangulation of ``points`` (N, 2), deterministic in input order.

    Raises :class:`GeometryError` for fewer than 3 points or degenerate
    (all collinear) input. Circumcircle tie-breaking for cocircular point sets
    follows the underlying Qhull construction, which is deterministic for a
    fixed input ordering.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise GeometryError("delaunay expects an (N, 2) coordinate matrix")
    if points.shape[0] < 3:
        raise GeometryError(f"delaunay needs >= 3 points, got {points.shape[0]}")
    try:
        qh = scipy.spatial.Delaunay(points)
    except scipy.spatial.QhullError as exc:
        raise GeometryError(f"degenerate point set: {exc}") from exc
    simplices = np.sort(qh.simplices, axis=1)
    order = np.lexsort((simplices[:, 2], simplices[:, 1], simplices[:, 0]))
    simplices = np.ascontiguousarray(simplices[order])
    if simplices.shape[0] == 0:
        raise GeometryError("triangulation produced no simplices (collinear input)")
    return Triangulation(simplices=simplices, points=points)


def circumcircle_contains(tri_pts: np.ndarray, query: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Whether each query point lies strictly inside the circumcircle of a triangle.

    ``tri_pts`` is (3, 2); ``query`` is (Q, 2). The strict-containment test uses
    a tolerance relative to the squared circumradius, avoiding exact predicates.
    """
    a, b, c = np.asarray(tri_pts, dtype=np.float64)
    ax, ay = a
    bx, by = b
    cx, cy = c
    dmat = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if dmat == 0.0:
        raise GeometryError("degenerate triangle in circumcircle test")
    a2, b2, c2 = np.dot(a, a), np.dot(b, b), np.dot(c, c)
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / dmat
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / dmat
    center = np.array([ux, uy])
    r2 = np.dot(a - center, a - center)
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    d2 = np.sum((q - center) ** 2, axis=-1)
    return d2 < r2 * (1.0 - tol)


def support_radii(regional_points: np.ndarray, tri: Triangulation, overlap: float) -> np.ndarray:
    """Support radius per node: overlap times the longest vertex-to-centroid
    distance over its incident simplices.

    The vertex-to-centroid distance equals two-thirds of the median emanating
    from that vertex, so with overlap >= 1 the disks of any simplex's vertices
    jointly contain its centroid.
    """
    points = np.asarray(regional_points, dtype=np.float64)
    if overlap <= 0:
        raise ValueError("overlap factor must be positive")
    simplices = tri.simplices
    centroids = points[simplices].mean(axis=1)  # (T, d)
    radii = np.zeros(points.shape[0], dtype=np.float64)
    for corner in range(simplices.shape[1]):
        idx = simplices[:, corner]
        dist = np.linalg.norm(points[idx] - centroids, axis=1)
        np.maximum.at(radii, idx, dist)
    if np.any(radii[np.unique(simplices)] <= 0.0):
        raise GeometryError("a triangulated node received a zero support radius")
    uncovered = np.setdiff1d(np.arange(points.shape[0]), np.unique(simplices))
    if uncovered.size:
        raise GeometryError(f"nodes {uncovered.tolist()} are incident to no simplex")
    return overlap * radii


def extend_periodic(cloud: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    """Ghost-tile a cloud along its periodic axes.

    Returns the extended coordinates and an origin index mapping every row to
    the source node it copies. The first N rows are the originals; each
    periodic axis contributes shifted copies at -L and +L, so a fully periodic
    2-D domain yields 9N points. Non-periodic domains are returned unchanged
    with the identity map.
    """
    coords = cloud.coords
    domain = cloud.domain
    n = coords.shape[0]
    if not domain.periodic.any():
        return coords.copy(), np.arange(n)
    multipliers = [(0, -1, 1) if p else (0,) for p in domain.periodic]
    blocks = []
    for combo in itertools.product(*multipliers):
        shift = np.asarray(combo, dtype=np.float64) * domain.extent
        blocks.append(coords + shift)
    extended = np.concatenate(blocks, axis=0)
    origin = np.tile(np.arange(n), len(blocks))
    return extended, origin
