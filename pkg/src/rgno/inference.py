"""Autoregressive rollout, ensemble uncertainty, and evaluation protocols."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .data import TrajectoryDataset
from .errors import ConfigError
from .graphs import GraphConfig, RegionalGraph, build_graph, refine_mesh
from .model import GraphTensors, ModelConfig
from .stepping import NormStats, SteppingStrategy, make_network, step, strategy_by_name

__all__ = [
    "RolloutScheme",
    "make_scheme",
    "EnsembleResult",
    "ModelBundle",
    "rollout",
    "ensemble_rollout",
    "relative_l1",
    "evaluate_dataset",
    "evaluate_resolution",
    "noise_eval",
]


@dataclass(frozen=True)
class RolloutScheme:
    """A sequence of positive lead times summing to the target time."""

    kind: str
    leads: tuple[float, ...]

    def __post_init__(self):
        if any(lead <= 0 for lead in self.leads):
            raise ConfigError("rollout lead times must be positive")


def make_scheme(kind: str, dt: float, target_index: int = 14) -> RolloutScheme:
    """Standard schemes to reach snapshot ``target_index`` on a dt grid.

    ``ar2``/``ar4`` march with fixed leads of 2 or 4 grid steps (final
    remainder step allowed); ``dr`` jumps directly. Arbitrary step lists are
    expressed with :class:`RolloutScheme` ("custom", leads) directly.
    """
    kind = kind.lower()
    if kind == "dr":
        return RolloutScheme("dr", (target_index * dt,))
    if kind.startswith("ar") and kind[2:].isdigit():
        k = int(kind[2:])
        leads = []
        remaining = target_index
        while remaining >= k:
            leads.append(k * dt)
            remaining -= k
        if remaining:
            leads.append(remaining * dt)
        return RolloutScheme(kind, tuple(leads))
    raise ConfigError(f"unknown rollout scheme {kind!r}")


@dataclass
class EnsembleResult:
    mean: np.ndarray
    std: np.ndarray
    members: int


def rollout(
    network,
    stats: NormStats,
    strategy: SteppingStrategy,
    u0: np.ndarray,
    c: np.ndarray | None,
    scheme: RolloutScheme,
    t0: float = 0.0,
    mask_rng: np.random.Generator | None = None,
) -> list[tuple[float, np.ndarray]]:
    """Apply the stepping operator sequentially, feeding outputs back as inputs.

    Returns (cumulative time, field) at every intermediate scheme time. The
    single-lead direct scheme is exactly one ``step`` call.
    """
    t = t0
    u = u0
    out = []
    for lead in scheme.leads:
        u = step(network, stats, strategy, u, c, t, lead, mask_rng=mask_rng)
        t = t + lead
        out.append((t, u))
    return out


def ensemble_rollout(
    network,
    stats: NormStats,
    strategy: SteppingStrategy,
    u0: np.ndarray,
    c: np.ndarray | None,
    scheme: RolloutScheme,
    members: int,
    seed: int,
) -> EnsembleResult:
    """Masked rollouts with independent mask draws; per-node mean and std
    of the final-time fields."""
    if members < 2:
        raise ValueError("an ensemble needs at least 2 members")
    finals = []
    for child in np.random.SeedSequence(seed).spawn(members):
        rng = np.random.default_rng(child)
        finals.append(rollout(network, stats, strategy, u0, c, scheme, mask_rng=rng)[-1][1])
    stack = np.stack(finals)
    return EnsembleResult(mean=stack.mean(axis=0), std=stack.std(axis=0), members=members)


def relative_l1(
    pred: np.ndarray,
    truth: np.ndarray,
    glob_mean: np.ndarray,
    glob_std: np.ndarray,
    channel_groups: list[list[int]] | None = None,
) -> float:
    """Relative L1 error after global normalization, averaged over groups.

    Both fields (N, s) are shifted and scaled by the equation-wide statistics;
    per channel group the error is sum |pred - truth| / sum |truth|, with the
    0/0 case defined as 0 and x/0 as 1.
    """
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    p = (pred.astype(np.float64) - glob_mean) / glob_std
    t = (truth.astype(np.float64) - glob_mean) / glob_std
    groups = channel_groups or [[ch] for ch in range(pred.shape[-1])]
    errs = []
    for group in groups:
        num = np.abs(p[..., group] - t[..., group]).sum()
        den = np.abs(t[..., group]).sum()
        if den == 0.0:
            errs.append(0.0 if num == 0.0 else 1.0)
        else:
            errs.append(num / den)
    return float(np.mean(errs))


@dataclass
class ModelBundle:
    """Trained parameters plus everything needed to run them on new clouds."""

    params: dict
    model_cfg: ModelConfig
    stats: NormStats
    strategy: SteppingStrategy
    graph_cfg: GraphConfig

    def save(self, path: str) -> None:
        named = {f"param/{k}": v.data for k, v in self.params.items()}
        named.update(self.stats.to_named())
        mc = self.model_cfg
        named["config/model"] = np.array(
            [mc.latent_width, mc.processor_blocks, mc.cond_hidden, mc.mask_prob,
             mc.n_fields, mc.n_coeffs, mc.phys_feat_width, mc.reg_feat_width,
             mc.edge_feat_width]
        )
        named["config/strategy"] = np.array(
            [{"output": 0, "residual": 1, "derivative": 2}[self.strategy.kind]]
        )
        gc = self.graph_cfg
        named["config/graph"] = np.array(
            [gc.subsample_factor, gc.overlap_encoder, gc.overlap_decoder,
             gc.edge_levels, gc.level_subsample, gc.k_freq, gc.rng_seed]
        )
        write_checkpoint(path, named)

    @classmethod
    def load(cls, path: str, dtype=np.float32) -> "ModelBundle":
        from . import autodiff as ad

        named = read_checkpoint(path)
        mc_raw = named["config/model"]
        model_cfg = ModelConfig(
            latent_width=int(mc_raw[0]),
            processor_blocks=int(mc_raw[1]),
            cond_hidden=int(mc_raw[2]),
            mask_prob=float(mc_raw[3]),
            n_fields=int(mc_raw[4]),
            n_coeffs=int(mc_raw[5]),
            phys_feat_width=int(mc_raw[6]),
            reg_feat_width=int(mc_raw[7]),
            edge_feat_width=int(mc_raw[8]),
        )
        strategy = strategy_by_name(
            {0: "output", 1: "residual", 2: "derivative"}[int(named["config/strategy"][0])]
        )
        gc_raw = named["config/graph"]
        graph_cfg = GraphConfig(
            subsample_factor=float(gc_raw[0]),
            overlap_encoder=float(gc_raw[1]),
            overlap_decoder=float(gc_raw[2]),
            edge_levels=int(gc_raw[3]),
            level_subsample=float(gc_raw[4]),
            k_freq=int(gc_raw[5]),
            rng_seed=int(gc_raw[6]),
        )
        params = {
            k[len("param/"):]: ad.parameter(v.astype(dtype))
            for k, v in named.items()
            if k.startswith("param/")
        }
        return cls(params, model_cfg, NormStats.from_named(named), strategy, graph_cfg)

    def build_graph_for(
        self,
        dataset: TrajectoryDataset,
        train_regional_count: int | None = None,
        graph_cfg: GraphConfig | None = None,
    ) -> RegionalGraph:
        """Inference graph for a dataset, correcting the regional count.

        When ``train_regional_count`` is given, the subsample factor is
        adjusted so the regional mesh matches the training-time resolution;
        clouds smaller than that count are refined with triangle centroids.
        """
        cfg = graph_cfg or self.graph_cfg
        rng = np.random.default_rng(cfg.rng_seed)
        if train_regional_count is None:
            return build_graph(dataset.cloud, cfg, rng)
        n = dataset.cloud.n_points
        if train_regional_count <= n:
            cfg = replace(cfg, subsample_factor=n / train_regional_count)
            return build_graph(dataset.cloud, cfg, rng)
        coords = refine_mesh(dataset.cloud.coords, train_regional_count, rng)
        return build_graph(dataset.cloud, cfg, rng, regional_coords=coords)

    def network_for(self, graph: RegionalGraph, dtype=None):
        gt = GraphTensors.from_graph(graph, dtype or next(iter(self.params.values())).data.dtype)
        return make_network(self.params, self.model_cfg, gt)


def _chunked(n: int, size: int):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


def evaluate_dataset(
    bundle: ModelBundle,
    dataset: TrajectoryDataset,
    scheme: RolloutScheme,
    target_index: int = 14,
    graph: RegionalGraph | None = None,
    batch: int = 32,
    mask_rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-sample relative L1 errors at snapshot ``target_index``."""
    if graph is None:
        graph = bundle.build_graph_for(dataset)
    network = bundle.network_for(graph)
    s = bundle.stats
    errs = np.zeros(dataset.n_samples)
    for lo, hi in _chunked(dataset.n_samples, batch):
        u0 = dataset.fields[lo:hi, 0].astype(np.float64)
        c = None if dataset.coeffs is None else dataset.coeffs[lo:hi].astype(np.float64)
        pred = rollout(network, s, bundle.strategy, u0, c, scheme, mask_rng=mask_rng)[-1][1]
        for b in range(hi - lo):
            errs[lo + b] = relative_l1(
                pred[b], dataset.fields[lo + b, target_index].astype(np.float64),
                s.glob_mean, s.glob_std,
            )
    return errs


def evaluate_resolution(
    bundle: ModelBundle,
    datasets: list[TrajectoryDataset],
    train_regional_count: int,
    scheme_kind: str = "ar2",
    target_index: int = 14,
) -> list[tuple[int, float]]:
    """Median error per resolution with regional-count correction per cloud."""
    rows = []
    for ds in datasets:
        graph = bundle.build_graph_for(ds, train_regional_count=train_regional_count)
        scheme = make_scheme(scheme_kind, ds.dt, target_index)
        errs = evaluate_dataset(bundle, ds, scheme, target_index, graph=graph)
        rows.append((ds.cloud.n_points, float(np.median(errs))))
    return rows


def noise_eval(
    bundle: ModelBundle,
    dataset: TrajectoryDataset,
    noise_levels: list[float],
    scheme: RolloutScheme,
    seed: int = 0,
    target_index: int = 14,
    graph: RegionalGraph | None = None,
) -> dict[float, np.ndarray]:
    """Noise-induced relative error per level C.

    The initial field of every sample is perturbed by Gaussian noise with
    standard deviation C times the per-sample input std (over all nodes and
    channels jointly); the result maps C to per-sample
    |e_noisy - e_clean| / e_clean at the target snapshot.
    """
    if graph is None:
        graph = bundle.build_graph_for(dataset)
    e_clean = evaluate_dataset(bundle, dataset, scheme, target_index, graph=graph)
    network = bundle.network_for(graph)
    s = bundle.stats
    out = {}
    rng = np.random.default_rng(seed)
    for c_level in noise_levels:
        errs = np.zeros(dataset.n_samples)
        for m in range(dataset.n_samples):
            u0 = dataset.fields[m, 0].astype(np.float64)[None]
            sigma = c_level * u0.std()
            noisy = u0 + rng.normal(0.0, 1.0, size=u0.shape) * sigma
            c = None if dataset.coeffs is None else dataset.coeffs[m : m + 1].astype(np.float64)
            pred = rollout(network, s, bundle.strategy, noisy, c, scheme)[-1][1]
            errs[m] = relative_l1(
                pred[0], dataset.fields[m, target_index].astype(np.float64),
                s.glob_mean, s.glob_std,
            )
        out[c_level] = np.abs(errs - e_clean) / np.maximum(e_clean, 1e-300)
    return out
