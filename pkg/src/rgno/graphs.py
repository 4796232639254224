"""Assembly of the regional message-passing graph.

A graph bundles: randomly subsampled regional nodes, encoder edges from
physical nodes into regional support disks, multi-scale bidirectional edges
among regional nodes (union of Delaunay edge sets over progressively
subsampled node subsets), and decoder edges from regional disks back to the
physical nodes. On periodic domains every triangulation and radius query runs
on a ghost-tiled copy of the points; ghosts are remapped to their origin nodes
afterwards so that only wrap-aware cross-boundary edges remain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, GeometryError, GraphBuildError
from .geometry import (
    Domain,
    PointCloud,
    delaunay,
    edge_features_from_zeta_delta,
    extend_periodic,
    node_struct_features,
    normalize_linear,
    support_radii,
)

__all__ = [
    "DirectedEdgeSet",
    "RegionalGraph",
    "GraphConfig",
    "sample_regional",
    "build_radius_edges",
    "build_r2r_multiscale",
    "refine_mesh",
    "build_graph",
]


@dataclass(frozen=True)
class DirectedEdgeSet:
    """Directed edges as parallel arrays, sorted by (receiver, sender)."""

    senders: np.ndarray
    receivers: np.ndarray
    struct_feats: np.ndarray

    @property
    def n_edges(self) -> int:
        return self.senders.shape[0]


@dataclass(frozen=True)
class RegionalGraph:
    """All connectivity and structural features the network consumes."""

    physical: PointCloud
    regional_indices: np.ndarray | None
    regional_coords: np.ndarray
    radii_encoder: np.ndarray
    radii_decoder: np.ndarray
    p2r: DirectedEdgeSet
    r2r: DirectedEdgeSet
    r2p: DirectedEdgeSet
    node_feats_phys: np.ndarray
    node_feats_reg: np.ndarray

    @property
    def n_physical(self) -> int:
        return self.physical.n_points

    @property
    def n_regional(self) -> int:
        return self.regional_coords.shape[0]


@dataclass
class GraphConfig:
    subsample_factor: float = 4.0
    overlap_encoder: float = 1.0
    overlap_decoder: float = 2.0
    edge_levels: int = 6
    level_subsample: float = 2.0
    k_freq: int = 4
    rng_seed: int = 0

    def validate(self) -> None:
        if self.subsample_factor < 1.0:
            raise ConfigError("subsample_factor must be >= 1")
        if self.overlap_encoder <= 0 or self.overlap_decoder <= 0:
            raise ConfigError("overlap factors must be positive")
        if self.edge_levels < 1:
            raise ConfigError("edge_levels must be >= 1")
        if self.level_subsample <= 1.0:
            raise ConfigError("level_subsample must be > 1")
        if self.k_freq < 1:
            raise ConfigError("k_freq must be >= 1")


def sample_regional(cloud: PointCloud, factor: float, rng: np.random.Generator) -> np.ndarray:
    """Uniformly subsample floor(N/factor) distinct physical-node indices."""
    if factor < 1.0:
        raise ConfigError("subsample factor must be >= 1")
    n = cloud.n_points
    r = int(n // factor)
    if r < 3:
        raise ConfigError(f"regional node count {r} < 3 (N={n}, factor={factor})")
    idx = rng.choice(n, size=r, replace=False)
    idx.sort()
    return idx


def _radius_pairs(
    source_coords: np.ndarray, target_coords: np.ndarray, radii: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (source, target) with |x_s - x_t| <= radii[target], inclusive."""
    radii = np.asarray(radii, dtype=np.float64)
    if np.any(radii <= 0.0):
        raise ValueError("all query radii must be positive")
    tree = cKDTree(source_coords)
    balls = tree.query_ball_point(target_coords, r=radii, return_sorted=True)
    counts = np.fromiter((len(b) for b in balls), dtype=np.int64, count=len(balls))
    senders = (
        np.concatenate([np.asarray(b, dtype=np.int64) for b in balls])
        if counts.sum()
        else np.zeros(0, dtype=np.int64)
    )
    receivers = np.repeat(np.arange(len(balls), dtype=np.int64), counts)
    return senders, receivers


def build_radius_edges(
    source_coords: np.ndarray,
    target_coords: np.ndarray,
    radii: np.ndarray,
    domain: Domain,
) -> DirectedEdgeSet:
    """Directed edges source -> target for every source inside a target's disk."""
    senders, receivers = _radius_pairs(source_coords, target_coords, radii)
    disp = target_coords[receivers] - source_coords[senders]
    feats = edge_features_from_zeta_delta(2.0 * disp / domain.extent)
    return _sorted_edge_set(senders, receivers, feats)


def _sorted_edge_set(senders, receivers, feats) -> DirectedEdgeSet:
    order = np.lexsort((senders, receivers))
    return DirectedEdgeSet(
        senders=np.ascontiguousarray(senders[order]),
        receivers=np.ascontiguousarray(receivers[order]),
        struct_feats=np.ascontiguousarray(feats[order]),
    )


def _dedup_shortest(senders, receivers, disp, n_receiver_slots: int):
    """Keep one edge per (sender, receiver): the shortest displacement wins,
    ties broken lexicographically on the displacement for determinism."""
    key = senders.astype(np.int64) * np.int64(n_receiver_slots) + receivers
    norms = np.linalg.norm(disp, axis=1)
    order = np.lexsort((disp[:, 1], disp[:, 0], norms, key))
    key_sorted = key[order]
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = key_sorted[1:] != key_sorted[:-1]
    sel = order[first]
    return senders[sel], receivers[sel], disp[sel]


def _delaunay_pairs(coords: np.ndarray, domain: Domain | None):
    """Unique undirected Delaunay adjacencies (lo, hi, disp lo->hi).

    With a periodic domain the triangulation runs on the ghost-tiled point set;
    adjacencies touching at least one main node are kept with their unwrapped
    displacement, ghost endpoints remapped to origins, wrap self-loops dropped.
    """
    n = coords.shape[0]
    periodic = domain is not None and bool(domain.periodic.any())
    if periodic:
        ext, origin = extend_periodic(PointCloud(coords, domain))
    else:
        ext, origin = coords, np.arange(n)
    tri = delaunay(ext)
    s = tri.simplices
    a = np.concatenate([s[:, 0], s[:, 1], s[:, 0]])
    b = np.concatenate([s[:, 1], s[:, 2], s[:, 2]])
    if periodic:
        keep = (a < n) | (b < n)
        a, b = a[keep], b[keep]
    disp = ext[b] - ext[a]
    oa, ob = origin[a], origin[b]
    swap = oa > ob
    lo = np.where(swap, ob, oa)
    hi = np.where(swap, oa, ob)
    disp = np.where(swap[:, None], -disp, disp)
    keep = lo != hi  # a node wrapped onto its own ghost carries no information
    lo, hi, disp = lo[keep], hi[keep], disp[keep]
    return _dedup_shortest(lo, hi, disp, n)


def build_r2r_multiscale(
    regional_coords: np.ndarray,
    levels: int,
    level_subsample: float,
    rng: np.random.Generator,
    domain: Domain | None = None,
) -> DirectedEdgeSet:
    """Bidirectional multi-scale edges over the regional nodes.

    Level 1 triangulates all nodes; each further level triangulates a random
    subset of the previous level's nodes (factor ``level_subsample``), stopping
    early once a subset would fall below 3 nodes. The per-level undirected edge
    sets are unioned, deduplicated, and emitted in both directions.
    """
    coords = np.asarray(regional_coords, dtype=np.float64)
    n = coords.shape[0]
    if n < 3:
        raise GeometryError("multi-scale edges need at least 3 regional nodes")
    active = np.arange(n)
    lo_all, hi_all, disp_all = [], [], []
    for level in range(levels):
        if active.shape[0] < 3:
            break
        lo, hi, disp = _delaunay_pairs(coords[active], domain)
        lo_all.append(active[lo])
        hi_all.append(active[hi])
        disp_all.append(disp)
        nxt = int(active.shape[0] // level_subsample)
        if nxt < 3:
            break
        active = rng.choice(active, size=nxt, replace=False)
        active.sort()
    lo = np.concatenate(lo_all)
    hi = np.concatenate(hi_all)
    disp = np.concatenate(disp_all)
    lo, hi, disp = _dedup_shortest(lo, hi, disp, n)
    senders = np.concatenate([lo, hi])
    receivers = np.concatenate([hi, lo])
    disp = np.concatenate([disp, -disp])
    extent = domain.extent if domain is not None else np.ones(coords.shape[1])
    feats = edge_features_from_zeta_delta(2.0 * disp / extent)
    return _sorted_edge_set(senders, receivers, feats)


def refine_mesh(points: np.ndarray, target_count: int, rng: np.random.Generator) -> np.ndarray:
    """Grow a point set to ``target_count`` by appending random triangle centroids.

    Each pass triangulates the current set and draws triangles without
    replacement; added points stay inside the convex hull of the originals.
    """
    current = np.asarray(points, dtype=np.float64)
    if target_count < current.shape[0]:
        raise ValueError("target_count must be >= the current point count")
    while current.shape[0] < target_count:
        tri = delaunay(current)
        need = target_count - current.shape[0]
        n_tri = tri.simplices.shape[0]
        pick = rng.choice(n_tri, size=min(need, n_tri), replace=False)
        pick.sort()
        centroids = current[tri.simplices[pick]].mean(axis=1)
        current = np.concatenate([current, centroids], axis=0)
    return current


def build_graph(
    cloud: PointCloud,
    cfg: GraphConfig,
    rng: np.random.Generator,
    regional_coords: np.ndarray | None = None,
) -> RegionalGraph:
    """Build the full regional graph for a physical point cloud.

    ``regional_coords`` overrides random subsampling with explicit regional
    node positions (used by sub-resolution correction, where refined centroids
    are not physical nodes). Raises :class:`GraphBuildError` when a physical
    node ends up outside every encoder disk or receives no decoder edge.
    """
    cfg.validate()
    coords = cloud.coords
    domain = cloud.domain
    periodic = bool(domain.periodic.any())
    n = cloud.n_points

    if regional_coords is None:
        reg_idx = sample_regional(cloud, cfg.subsample_factor, rng)
        reg_coords = coords[reg_idx]
    else:
        reg_idx = None
        reg_coords = np.asarray(regional_coords, dtype=np.float64)
    r = reg_coords.shape[0]

    if periodic:
        ext_reg, ext_reg_origin = extend_periodic(PointCloud(reg_coords, domain))
        base_radii = support_radii(ext_reg, delaunay(ext_reg), 1.0)[:r]
    else:
        ext_reg, ext_reg_origin = reg_coords, np.arange(r)
        base_radii = support_radii(reg_coords, delaunay(reg_coords), 1.0)

    # The median rule covers the triangulated region; physical nodes beyond the
    # regional hull (domain corners, typically) can fall outside every disk.
    # Grow the nearest regional node's base radius so the union of encoder
    # disks covers every physical node, as the construction intends.
    dist, nearest = cKDTree(ext_reg).query(coords)
    needed = dist * (1.0 + 1e-9) / cfg.overlap_encoder
    short = needed > base_radii[ext_reg_origin[nearest]]
    if np.any(short):
        np.maximum.at(base_radii, ext_reg_origin[nearest[short]], needed[short])

    radii_enc = base_radii * cfg.overlap_encoder
    radii_dec = base_radii * cfg.overlap_decoder

    ext_phys, phys_origin = extend_periodic(cloud)

    # Encoder: physical (incl. ghosts) -> regional, disks with encoder radii.
    src, tgt = _radius_pairs(ext_phys, reg_coords, radii_enc)
    disp = reg_coords[tgt] - ext_phys[src]
    p2r_s, p2r_r, p2r_d = _dedup_shortest(phys_origin[src], tgt, disp, r)

    # Decoder: same disk test with decoder radii, then flipped to regional -> physical.
    src, tgt = _radius_pairs(ext_phys, reg_coords, radii_dec)
    disp = ext_phys[src] - reg_coords[tgt]
    r2p_s, r2p_r, r2p_d = _dedup_shortest(tgt, phys_origin[src], disp, n)

    covered = np.zeros(n, dtype=bool)
    covered[p2r_s] = True
    if not covered.all():
        missing = np.flatnonzero(~covered)[:8].tolist()
        raise GraphBuildError(
            f"physical nodes {missing} lie outside every encoder disk "
            f"(overlap_encoder={cfg.overlap_encoder} too small)"
        )
    receiving = np.zeros(n, dtype=bool)
    receiving[r2p_r] = True
    if not receiving.all():
        missing = np.flatnonzero(~receiving)[:8].tolist()
        raise GraphBuildError(
            f"physical nodes {missing} receive no decoder edge "
            f"(overlap_decoder={cfg.overlap_decoder} too small)"
        )

    r2r = build_r2r_multiscale(
        reg_coords, cfg.edge_levels, cfg.level_subsample, rng, domain=domain
    )

    extent = domain.extent
    p2r = _sorted_edge_set(p2r_s, p2r_r, edge_features_from_zeta_delta(2.0 * p2r_d / extent))
    r2p = _sorted_edge_set(r2p_s, r2p_r, edge_features_from_zeta_delta(2.0 * r2p_d / extent))

    zeta_phys = normalize_linear(coords, domain)
    zeta_reg = normalize_linear(reg_coords, domain)
    feats_phys = node_struct_features(zeta_phys, periodic, cfg.k_freq)
    feats_reg = np.concatenate(
        [node_struct_features(zeta_reg, periodic, cfg.k_freq), radii_enc[:, None]], axis=1
    )

    return RegionalGraph(
        physical=cloud,
        regional_indices=reg_idx,
        regional_coords=reg_coords,
        radii_encoder=radii_enc,
        radii_decoder=radii_dec,
        p2r=p2r,
        r2r=r2r,
        r2p=r2p,
        node_feats_phys=feats_phys,
        node_feats_reg=feats_reg,
    )
