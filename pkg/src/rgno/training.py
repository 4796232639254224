"""Training over all ordered snapshot pairs, with lead-time curriculum and
fractional-pairing fine-tuning.

An epoch visits every training sample once; each visit draws
``pairs_per_epoch`` input/output snapshot pairs uniformly from the pairs the
curriculum admits at that point of the run, which stochastically minimizes the
pooled all2all objective. The regional mesh (and with it the whole graph) is
resampled at the start of every epoch; validation uses a fixed graph so its
series is comparable across epochs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, TrainingError
from .graphs import GraphConfig, build_graph
from .inference import ModelBundle, make_scheme, relative_l1, rollout
from .model import GraphTensors, ModelConfig, forward, init_params
from .optim import LR_FINAL, LR_FLOOR, FlatAdamW, lr_schedule
from .stepping import (
    NormStats,
    SteppingStrategy,
    compute_norm_stats,
    make_network,
    normalize_coeffs,
    normalize_input,
    step,
    strategy_by_name,
    time_channels,
)

__all__ = [
    "TrainPair",
    "TrainConfig",
    "TrainResult",
    "all2all_pairs",
    "curriculum_filter",
    "train",
    "fractional_finetune",
    "fractional_triples",
    "fractional_batch_loss",
    "step_tensor",
]


@dataclass(frozen=True)
class TrainPair:
    """One training example: sample m stepped from snapshot k to snapshot n."""

    sample: int
    k: int
    n: int

    def __post_init__(self):
        if not 0 <= self.k <= self.n:
            raise ValueError(f"need 0 <= k <= n, got k={self.k}, n={self.n}")


@dataclass
class TrainConfig:
    epochs: int = 2500
    batch_size: int = 16
    max_lead: int | None = None  # cap on n - k in training-grid units
    curriculum_fraction: float = 0.2
    pairs_per_epoch: int = 1
    validate_every: int = 10
    time_stride: int = 2  # dataset snapshots per training snapshot
    time_max_index: int = 14  # last dataset snapshot index used for training
    strategy: str = "derivative"
    latent_width: int = 128
    processor_blocks: int = 18
    cond_hidden: int = 16
    mask_prob: float = 0.5
    weight_decay: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    finetune_fraction: float = 0.1
    gradcut: bool = True
    precision: str = "float32"
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.curriculum_fraction <= 1.0:
            raise ConfigError("curriculum_fraction must be in [0, 1]")
        if self.batch_size < 1 or self.epochs < 1 or self.pairs_per_epoch < 1:
            raise ConfigError("epochs, batch_size and pairs_per_epoch must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.time_stride < 1 or self.time_max_index < self.time_stride:
            raise ConfigError("invalid training time grid")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def time_indices(self) -> np.ndarray:
        return np.arange(0, self.time_max_index + 1, self.time_stride)


@dataclass
class TrainResult:
    bundle: ModelBundle
    log: list[dict] = field(repr=False, default_factory=list)
    best_val: float = math.inf
    best_epoch: int = -1


def all2all_pairs(n_last: int, max_lead: int | None = None) -> list[tuple[int, int]]:
    """All (k, n) with 0 <= k <= n <= n_last, optionally capped at n - k <= max_lead.

    Without a cap the count is (n_last + 1)(n_last + 2) / 2.
    """
    if n_last < 0:
        raise ValueError("last snapshot index must be >= 0")
    return [
        (k, n)
        for k in range(n_last + 1)
        for n in range(k, n_last + 1)
        if max_lead is None or n - k <= max_lead
    ]


def curriculum_filter(
    pairs: list[tuple[int, int]],
    epoch_fraction: float,
    curriculum_fraction: float,
    base_step: int = 1,
) -> list[tuple[int, int]]:
    """Pairs admitted at this point of the run.

    During the warm-up window the admitted lead strides grow from the smallest
    to the largest in equal epoch slices; zero-lead pairs pass throughout.
    ``base_step`` is the physical stride one index unit corresponds to and does
    not affect which pairs pass.
    """
    del base_step
    strides = sorted({n - k for k, n in pairs if n > k})
    if not strides or curriculum_fraction <= 0.0 or epoch_fraction >= curriculum_fraction:
        return list(pairs)
    count = max(1, math.ceil(len(strides) * epoch_fraction / curriculum_fraction))
    allowed = set(strides[:min(count, len(strides))])
    return [(k, n) for k, n in pairs if n == k or (n - k) in allowed]


def _batch_targets(strategy, u_in, u_out, tau, stats):
    """Normalized training targets for a batch with per-element lead times."""
    if strategy.kind == "output":
        target = u_out
    elif strategy.kind == "residual":
        target = u_out - u_in
    else:
        target = (u_out - u_in) / tau[:, None, None]
    return (target - stats.tgt_mean) / stats.tgt_std


def _validate(params, model_cfg, stats, strategy, gt, dataset, scheme, target_index):
    network = make_network(params, model_cfg, gt)
    u0 = dataset.fields[:, 0].astype(np.float64)
    c = None if dataset.coeffs is None else dataset.coeffs.astype(np.float64)
    pred = rollout(network, stats, strategy, u0, c, scheme)[-1][1]
    errs = [
        relative_l1(pred[m], dataset.fields[m, target_index].astype(np.float64),
                    stats.glob_mean, stats.glob_std)
        for m in range(dataset.n_samples)
    ]
    return float(np.median(errs))


def train(dataset, val_dataset, cfg: TrainConfig, graph_cfg: GraphConfig,
          on_epoch=None) -> TrainResult:
    """Train a model on a fixed-cloud trajectory dataset.

    Returns the parameters with the lowest validation error seen at any
    validation point, together with the normalization statistics and the
    per-epoch log (epoch, lr, train loss, validation error). ``on_epoch``
    receives each log row as it is produced.
    """
    cfg.validate()
    graph_cfg.validate()
    dtype = cfg.dtype
    time_idx = cfg.time_indices()
    if time_idx[-1] >= dataset.times.shape[0]:
        raise ConfigError("time_max_index exceeds the dataset snapshot count")
    pairs = all2all_pairs(time_idx.size - 1, cfg.max_lead)
    strategy = strategy_by_name(cfg.strategy)
    stats = compute_norm_stats(dataset, pairs, strategy, time_idx)

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, graph_ss, draw_ss, mask_ss, val_ss = ss.spawn(5)
    val_graph = build_graph(dataset.cloud, graph_cfg, np.random.default_rng(val_ss))
    model_cfg = ModelConfig.for_graph(
        val_graph,
        latent_width=cfg.latent_width,
        processor_blocks=cfg.processor_blocks,
        cond_hidden=cfg.cond_hidden,
        mask_prob=cfg.mask_prob,
        n_fields=dataset.fields.shape[-1],
        n_coeffs=0 if dataset.coeffs is None else dataset.coeffs.shape[-1],
    )
    params = init_params(model_cfg, np.random.default_rng(init_ss), dtype)
    param_names = list(params)
    opt = FlatAdamW(params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
                    weight_decay=cfg.weight_decay)
    graph_children = graph_ss.spawn(cfg.epochs)
    draw_rng = np.random.default_rng(draw_ss)
    mask_rng = np.random.default_rng(mask_ss)
    val_gt = GraphTensors.from_graph(val_graph, dtype)
    val_scheme = make_scheme("ar2", dataset.dt, cfg.time_max_index)

    times = dataset.times
    fields = dataset.fields
    n_samples = dataset.n_samples
    use_mask = cfg.mask_prob > 0.0
    best_val = math.inf
    best_snapshot = {k: p.data.copy() for k, p in params.items()}
    best_epoch = -1
    log: list[dict] = []

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch / max(cfg.epochs - 1, 1))
        admitted = curriculum_filter(pairs, epoch / cfg.epochs, cfg.curriculum_fraction)
        if strategy.kind == "derivative":
            # tau = 0 pairs stay admitted but carry identically zero loss and
            # gradient for this strategy, so drawing them would waste the step.
            pool = [(k, n) for k, n in admitted if n > k]
        else:
            pool = admitted
        graph = build_graph(dataset.cloud, graph_cfg, np.random.default_rng(graph_children[epoch]))
        gt = GraphTensors.from_graph(graph, dtype)

        order = np.concatenate(
            [draw_rng.permutation(n_samples) for _ in range(cfg.pairs_per_epoch)]
        )
        picks = draw_rng.integers(0, len(pool), size=order.size)
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, order.size, cfg.batch_size):
            ms = order[lo : lo + cfg.batch_size]
            chosen = picks[lo : lo + cfg.batch_size]
            k_ds = time_idx[[pool[j][0] for j in chosen]]
            n_ds = time_idx[[pool[j][1] for j in chosen]]
            u_in = fields[ms, k_ds].astype(np.float64)
            u_out = fields[ms, n_ds].astype(np.float64)
            tau = times[n_ds] - times[k_ds]
            t_norm, tau_norm = time_channels(times[k_ds], tau, stats)
            u_norm = normalize_input(u_in, stats).astype(dtype)
            c_norm = None
            if dataset.coeffs is not None:
                c_norm = normalize_coeffs(dataset.coeffs[ms].astype(np.float64), stats).astype(dtype)
            target = _batch_targets(strategy, u_in, u_out, tau, stats).astype(dtype)
            with Tape() as tape:
                out = forward(
                    params, model_cfg, gt, u_norm, c_norm,
                    t_norm.astype(dtype), tau_norm.astype(dtype), tau.astype(dtype),
                    mask_rng=mask_rng if use_mask else None,
                )
                loss = ad.mse(out, ad.constant(target))
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}"
                    )
                grads = ad.grad(loss, [params[k] for k in param_names], tape)
            opt.step(grads, lr)
            epoch_loss += loss_val
            n_batches += 1

        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": epoch_loss / max(n_batches, 1),
            "val_rel_l1": None,
        }
        if (epoch + 1) % cfg.validate_every == 0 or epoch == cfg.epochs - 1:
            val_err = _validate(
                params, model_cfg, stats, strategy, val_gt, val_dataset,
                val_scheme, cfg.time_max_index,
            )
            row["val_rel_l1"] = val_err
            if val_err < best_val:
                best_val = val_err
                best_epoch = epoch
                best_snapshot = {k: p.data.copy() for k, p in params.items()}
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)

    best_params = {k: ad.parameter(v) for k, v in best_snapshot.items()}
    bundle = ModelBundle(best_params, model_cfg, stats, strategy, graph_cfg)
    return TrainResult(bundle=bundle, log=log, best_val=best_val, best_epoch=best_epoch)


def step_tensor(
    params,
    model_cfg: ModelConfig,
    gt: GraphTensors,
    stats: NormStats,
    strategy: SteppingStrategy,
    u: Tensor,
    c,
    t_arr: np.ndarray,
    tau_arr: np.ndarray,
    mask_rng=None,
) -> Tensor:
    """Differentiable stepping: like :func:`rgno.stepping.step` but on tensors.

    ``u`` is the raw (un-normalized) field as a Tensor; lead times are strictly
    positive per element.
    """
    dtype = gt.dtype
    t_norm, tau_norm = time_channels(t_arr, tau_arr, stats)
    u_norm = ad.mul(
        ad.sub(u, ad.constant(stats.in_mean.astype(dtype))),
        ad.constant((1.0 / stats.in_std).astype(dtype)),
    )
    raw = forward(
        params, model_cfg, gt, u_norm, c,
        t_norm.astype(dtype), tau_norm.astype(dtype), tau_arr.astype(dtype),
        mask_rng=mask_rng,
    )
    target = ad.add(
        ad.mul(raw, ad.constant(stats.tgt_std.astype(dtype))),
        ad.constant(stats.tgt_mean.astype(dtype)),
    )
    if strategy.kind == "output":
        return target
    beta = tau_arr[:, None, None] if strategy.kind == "derivative" else 1.0
    return ad.add(u, ad.mul(target, ad.constant(np.asarray(beta, dtype=dtype))))


def fractional_triples(cfg: TrainConfig) -> list[tuple[int, int, int]]:
    """Admissible (k, star, n) dataset snapshot indices for fractional pairing.

    The first hop star - k spans at least the native training stride and at
    most the largest trained lead (in-distribution); the second hop n - star is
    strictly below the native stride.
    """
    stride = cfg.time_stride
    t_max = cfg.time_max_index
    time_idx = set(cfg.time_indices().tolist())
    max_lead = (cfg.max_lead * stride) if cfg.max_lead is not None else t_max
    triples = [
        (k, star, n)
        for k in sorted(time_idx)
        for star in range(t_max + 1)
        for n in range(t_max + 1)
        if stride <= star - k <= max_lead and 0 < n - star < stride
    ]
    return triples


def fractional_batch_loss(
    params,
    model_cfg: ModelConfig,
    gt: GraphTensors,
    stats: NormStats,
    strategy: SteppingStrategy,
    u_k: np.ndarray,
    u_n: np.ndarray,
    c,
    t_k: np.ndarray,
    tau1: np.ndarray,
    tau2: np.ndarray,
    gradcut: bool = True,
    mask_rng_hop1=None,
    mask_rng_hop2=None,
    hop1_params=None,
    u_star: np.ndarray | None = None,
) -> Tensor:
    """Two-hop loss: predict the intermediate state, then train on the second hop.

    With ``gradcut`` the intermediate prediction is detached, so no gradient
    flows into the first forward pass. ``hop1_params`` lets tests drive the
    first hop with a frozen parameter copy; a pre-computed ``u_star`` skips the
    in-tape first hop entirely (implies gradcut).
    """
    dtype = gt.dtype
    if u_star is not None:
        pred1 = ad.constant(u_star.astype(dtype))
    else:
        pred1 = step_tensor(
            hop1_params or params, model_cfg, gt, stats, strategy,
            ad.constant(u_k.astype(dtype)), c, t_k, tau1, mask_rng=mask_rng_hop1,
        )
        if gradcut:
            pred1 = ad.constant(pred1.data)
    t_star = t_k + tau1
    t_norm, tau_norm = time_channels(t_star, tau2, stats)
    u2_norm = ad.mul(
        ad.sub(pred1, ad.constant(stats.in_mean.astype(dtype))),
        ad.constant((1.0 / stats.in_std).astype(dtype)),
    )
    raw2 = forward(
        params, model_cfg, gt, u2_norm, c,
        t_norm.astype(dtype), tau_norm.astype(dtype), tau2.astype(dtype),
        mask_rng=mask_rng_hop2,
    )
    # Normalized second-hop target, a function of the intermediate prediction.
    if strategy.kind == "output":
        target_raw = ad.constant(u_n.astype(dtype))
    elif strategy.kind == "residual":
        target_raw = ad.sub(ad.constant(u_n.astype(dtype)), pred1)
    else:
        inv_tau = (1.0 / tau2)[:, None, None].astype(dtype)
        target_raw = ad.mul(
            ad.sub(ad.constant(u_n.astype(dtype)), pred1), ad.constant(inv_tau)
        )
    z = ad.mul(
        ad.sub(target_raw, ad.constant(stats.tgt_mean.astype(dtype))),
        ad.constant((1.0 / stats.tgt_std).astype(dtype)),
    )
    return ad.mse(raw2, z)


def fractional_finetune(
    bundle: ModelBundle,
    dataset,
    cfg: TrainConfig,
    epochs: int | None = None,
) -> ModelBundle:
    """Fine-tune a trained model on self-generated sub-stride pairs.

    Runs for ``finetune_fraction`` of the main epoch count (unless overridden)
    at the exponential tail of the learning-rate schedule. The first hop runs
    without masking (it plays the role of an input), the second hop follows the
    training masking setting; gradients are cut at the intermediate state when
    ``cfg.gradcut`` is set.
    """
    cfg.validate()
    triples = fractional_triples(cfg)
    if not triples:
        raise ConfigError("no admissible intermediate times for this time grid")
    dtype = cfg.dtype
    stats = bundle.stats
    strategy = bundle.strategy
    model_cfg = bundle.model_cfg
    params = {k: ad.parameter(p.data.astype(dtype).copy()) for k, p in bundle.params.items()}
    param_names = list(params)
    opt = FlatAdamW(params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
                    weight_decay=cfg.weight_decay)
    n_epochs = epochs if epochs is not None else max(1, round(cfg.finetune_fraction * cfg.epochs))
    ss = np.random.SeedSequence(cfg.seed + 1)
    graph_ss, draw_ss, mask_ss = ss.spawn(3)
    graph_children = graph_ss.spawn(n_epochs)
    draw_rng = np.random.default_rng(draw_ss)
    mask_rng = np.random.default_rng(mask_ss)
    use_mask = cfg.mask_prob > 0.0
    times = dataset.times
    fields = dataset.fields
    n_samples = dataset.n_samples

    for epoch in range(n_epochs):
        lr = LR_FLOOR * (LR_FINAL / LR_FLOOR) ** (epoch / max(n_epochs - 1, 1))
        graph = build_graph(dataset.cloud, bundle.graph_cfg,
                            np.random.default_rng(graph_children[epoch]))
        gt = GraphTensors.from_graph(graph, dtype)
        network = make_network(params, model_cfg, gt)
        order = draw_rng.permutation(n_samples)
        picks = draw_rng.integers(0, len(triples), size=order.size)
        for lo in range(0, order.size, cfg.batch_size):
            ms = order[lo : lo + cfg.batch_size]
            chosen = picks[lo : lo + cfg.batch_size]
            k_ds = np.array([triples[j][0] for j in chosen])
            star_ds = np.array([triples[j][1] for j in chosen])
            n_ds = np.array([triples[j][2] for j in chosen])
            u_k = fields[ms, k_ds].astype(np.float64)
            u_n = fields[ms, n_ds].astype(np.float64)
            c = None
            if dataset.coeffs is not None:
                c = normalize_coeffs(dataset.coeffs[ms].astype(np.float64), stats).astype(dtype)
            t_k = times[k_ds]
            tau1 = times[star_ds] - times[k_ds]
            tau2 = times[n_ds] - times[star_ds]
            if cfg.gradcut:
                # First hop outside the tape: plain inference, masking off.
                u_star = step(network, stats, strategy, u_k, c, t_k, tau1)
                with Tape() as tape:
                    loss = fractional_batch_loss(
                        params, model_cfg, gt, stats, strategy,
                        u_k, u_n, c, t_k, tau1, tau2,
                        gradcut=True, mask_rng_hop2=mask_rng if use_mask else None,
                        u_star=u_star,
                    )
                    grads = ad.grad(loss, [params[k] for k in param_names], tape)
            else:
                with Tape() as tape:
                    loss = fractional_batch_loss(
                        params, model_cfg, gt, stats, strategy,
                        u_k, u_n, c, t_k, tau1, tau2, gradcut=False,
                        mask_rng_hop2=mask_rng if use_mask else None,
                    )
                    grads = ad.grad(loss, [params[k] for k in param_names], tape)
            if not np.isfinite(float(loss.data)):
                raise TrainingError(f"non-finite fine-tune loss at epoch {epoch}")
            opt.step(grads, lr)

    return ModelBundle(params, model_cfg, stats, strategy, bundle.graph_cfg)
