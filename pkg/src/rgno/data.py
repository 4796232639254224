"""Synthetic trajectory datasets with exact analytic solutions, plus file I/O.

Both generators solve the heat equation u_t = a^2 * lap(u) by per-mode
exponential decay of a random sinusoidal initial condition, so ground truth is
available at any point and any time. Mode coefficients are drawn from a
dedicated RNG stream keyed only by (seed, sample), independent of the point
count; regenerating with the same seed at a different resolution re-evaluates
the same solutions on a new cloud.

Dataset files (magic ``RGND``, little-endian): u32 version, u32 {M, N_t, N, d,
s, q, flags}, f64 domain bounds (lower then upper), f64 times, f32 coords, f32
fields (M, N_t, N, s row-major), f32 coeffs iff q > 0. Flag bit 0 marks x
periodicity, bit 1 y periodicity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .geometry import Domain, PointCloud

__all__ = [
    "DatasetMeta",
    "TrajectoryDataset",
    "gen_heat_dirichlet",
    "gen_heat_periodic",
    "eval_heat_dirichlet",
    "eval_heat_periodic",
    "subsample_cloud",
    "take_samples",
    "write_dataset",
    "read_dataset",
]

MAGIC = b"RGND"
VERSION = 1


@dataclass
class DatasetMeta:
    pde: str
    diffusivity: float
    seed: int
    n_modes: int
    t_final: float


@dataclass
class TrajectoryDataset:
    cloud: PointCloud
    times: np.ndarray  # (N_t,) strictly increasing
    fields: np.ndarray  # (M, N_t, N, s) float32
    coeffs: np.ndarray | None = None  # (M, N, q) float32
    meta: DatasetMeta | None = None

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("snapshot times must be strictly increasing")
        m, nt, n, _ = self.fields.shape
        if nt != self.times.shape[0] or n != self.cloud.n_points:
            raise ValueError("field array does not match times/cloud")

    @property
    def n_samples(self) -> int:
        return self.fields.shape[0]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


def _sample_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    coef_ss, cloud_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(coef_ss), np.random.default_rng(cloud_ss)


def eval_heat_dirichlet(mu: np.ndarray, diffusivity: float, points: np.ndarray,
                        times: np.ndarray) -> np.ndarray:
    """Exact solution (T, N) for one sample of the Dirichlet generator."""
    mu = np.asarray(mu, dtype=np.float64)
    k = np.arange(1, mu.size + 1, dtype=np.float64)
    x, y = points[:, 0], points[:, 1]
    basis = np.sin(np.pi * np.outer(x, k)) * np.sin(np.pi * np.outer(y, k)) / np.sqrt(k)
    decay = np.exp(-(diffusivity**2) * 2.0 * np.pi**2 * np.outer(np.asarray(times), k**2))
    return -(1.0 / mu.size) * (decay * mu) @ basis.T


def gen_heat_dirichlet(
    samples: int,
    n_points: int,
    t_final: float = 0.005,
    n_modes: int = 10,
    diffusivity: float = 1.0,
    seed: int = 0,
    n_times: int = 21,
) -> TrajectoryDataset:
    """Heat equation on the unit square with homogeneous Dirichlet walls.

    The initial condition is -(1/M) * sum_m mu_m sin(pi m x) sin(pi m y) / sqrt(m)
    with mu_m ~ U[-1, 1]; each mode decays as exp(-a^2 * 2 pi^2 m^2 t).
    """
    coef_rng, cloud_rng = _sample_rngs(seed)
    mu = coef_rng.uniform(-1.0, 1.0, size=(samples, n_modes))
    coords = cloud_rng.random((n_points, 2))
    domain = Domain(np.zeros(2), np.ones(2), np.zeros(2, dtype=bool))
    times = np.linspace(0.0, t_final, n_times)
    k = np.arange(1, n_modes + 1, dtype=np.float64)
    basis = (
        np.sin(np.pi * np.outer(coords[:, 0], k))
        * np.sin(np.pi * np.outer(coords[:, 1], k))
        / np.sqrt(k)
    )
    decay = np.exp(-(diffusivity**2) * 2.0 * np.pi**2 * np.outer(times, k**2))
    fields = -(1.0 / n_modes) * np.einsum("tk,ik,mk->mti", decay, basis, mu)
    return TrajectoryDataset(
        cloud=PointCloud(coords, domain),
        times=times,
        fields=fields[..., None].astype(np.float32),
        meta=DatasetMeta("heat-dirichlet", diffusivity, seed, n_modes, t_final),
    )


def _periodic_modes(k_max: int) -> np.ndarray:
    """Half-plane wavenumber set including (0, 0), shape (K, 2)."""
    modes = [(0, 0)]
    for l in range(1, k_max + 1):
        modes.append((0, l))
    for k in range(1, k_max + 1):
        for l in range(-k_max, k_max + 1):
            modes.append((k, l))
    return np.asarray(modes, dtype=np.int64)


def eval_heat_periodic(coefs: np.ndarray, k_max: int, diffusivity: float,
                       points: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Exact solution (T, N) for one sample of the periodic generator;
    ``coefs`` is (K, 2) holding cosine and sine amplitudes per mode."""
    modes = _periodic_modes(k_max)
    phase = 2.0 * np.pi * (points @ modes.T.astype(np.float64))  # (N, K)
    lam = (diffusivity**2) * 4.0 * np.pi**2 * (modes**2).sum(axis=1)
    decay = np.exp(-np.outer(np.asarray(times), lam))  # (T, K)
    cosb, sinb = np.cos(phase), np.sin(phase)
    return (decay * coefs[:, 0]) @ cosb.T + (decay * coefs[:, 1]) @ sinb.T


def gen_heat_periodic(
    samples: int,
    n_points: int,
    t_final: float = 0.005,
    k_modes: int = 2,
    diffusivity: float = 1.0,
    seed: int = 0,
    n_times: int = 21,
) -> TrajectoryDataset:
    """Heat equation on the fully periodic unit square.

    The initial condition is a random real trigonometric polynomial up to
    wavenumber ``k_modes`` per axis; the (0, 0) mode persists unchanged, every
    other mode decays as exp(-a^2 * 4 pi^2 (k^2 + l^2) t).
    """
    coef_rng, cloud_rng = _sample_rngs(seed)
    modes = _periodic_modes(k_modes)
    scale = 1.0 / np.maximum(1.0, np.sqrt((modes**2).sum(axis=1)))
    coefs = coef_rng.uniform(-1.0, 1.0, size=(samples, modes.shape[0], 2)) * scale[:, None]
    coefs[:, 0, 1] = 0.0  # sine amplitude of the constant mode is meaningless
    coords = cloud_rng.random((n_points, 2))
    domain = Domain(np.zeros(2), np.ones(2), np.ones(2, dtype=bool))
    times = np.linspace(0.0, t_final, n_times)
    fields = np.stack(
        [eval_heat_periodic(coefs[m], k_modes, diffusivity, coords, times) for m in range(samples)]
    )
    return TrajectoryDataset(
        cloud=PointCloud(coords, domain),
        times=times,
        fields=fields[..., None].astype(np.float32),
        meta=DatasetMeta("heat-periodic", diffusivity, seed, k_modes, t_final),
    )


def subsample_cloud(cloud: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Uniform subsample without replacement (a permutation when n equals N)."""
    if n > cloud.n_points:
        raise ValueError(f"cannot draw {n} points from {cloud.n_points}")
    idx = rng.choice(cloud.n_points, size=n, replace=False)
    return PointCloud(cloud.coords[idx], cloud.domain)


def take_samples(ds: TrajectoryDataset, start: int, stop: int) -> TrajectoryDataset:
    """Slice a sample range into a view-backed dataset (shared cloud and times)."""
    return TrajectoryDataset(
        cloud=ds.cloud,
        times=ds.times,
        fields=ds.fields[start:stop],
        coeffs=None if ds.coeffs is None else ds.coeffs[start:stop],
        meta=ds.meta,
    )


def write_dataset(path: str, ds: TrajectoryDataset) -> None:
    m, nt, n, s = ds.fields.shape
    d = ds.cloud.domain.dim
    q = 0 if ds.coeffs is None else ds.coeffs.shape[-1]
    flags = int(ds.cloud.domain.periodic[0]) | (int(ds.cloud.domain.periodic[1]) << 1)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<8I", VERSION, m, nt, n, d, s, q, flags))
        fh.write(np.ascontiguousarray(ds.cloud.domain.lower, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.cloud.domain.upper, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.cloud.coords, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.fields, dtype="<f4").tobytes())
        if q:
            fh.write(np.ascontiguousarray(ds.coeffs, dtype="<f4").tobytes())


def _take(buf: bytes, offset: int, count: int, what: str) -> tuple[bytes, int]:
    if offset + count > len(buf):
        raise FormatError(f"truncated dataset: {what} at byte {offset}")
    return buf[offset : offset + count], offset + count


def read_dataset(path: str) -> TrajectoryDataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    raw, offset = _take(buf, 0, 4, "magic")
    if raw != MAGIC:
        raise FormatError(f"bad magic {raw!r} at byte 0")
    raw, offset = _take(buf, offset, 32, "header")
    version, m, nt, n, d, s, q, flags = struct.unpack("<8I", raw)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    raw, offset = _take(buf, offset, 8 * 2 * d, "domain bounds")
    bounds = np.frombuffer(raw, dtype="<f8")
    raw, offset = _take(buf, offset, 8 * nt, "times")
    times = np.frombuffer(raw, dtype="<f8").copy()
    raw, offset = _take(buf, offset, 4 * n * d, "coords")
    coords = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)
    raw, offset = _take(buf, offset, 4 * m * nt * n * s, "fields")
    fields = np.frombuffer(raw, dtype="<f4").reshape(m, nt, n, s).copy()
    coeffs = None
    if q:
        raw, offset = _take(buf, offset, 4 * m * n * q, "coeffs")
        coeffs = np.frombuffer(raw, dtype="<f4").reshape(m, n, q).copy()
    if offset != len(buf):
        raise FormatError(f"trailing bytes at byte {offset}")
    periodic = np.array([bool(flags & 1), bool(flags & 2)])
    domain = Domain(bounds[:d], bounds[d:], periodic)
    return TrajectoryDataset(
        cloud=PointCloud(coords, domain),
        times=times,
        fields=fields,
        coeffs=coeffs,
    )
