"""Time-marching wrappers around the raw network.

A stepping strategy fixes how the network output is interpreted: as the next
state directly (output), as the increment (residual), or as the time
derivative scaled by the lead time (derivative). Each strategy normalizes the
network's inputs and targets with its own pre-computed statistics; the
training loss lives in normalized space, predictions are de-normalized and
combined as alpha * u + beta * net. The derivative strategy is exact at
tau = 0 by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "SteppingStrategy",
    "OUTPUT",
    "RESIDUAL",
    "DERIVATIVE",
    "strategy_by_name",
    "NormStats",
    "compute_norm_stats",
    "normalize_input",
    "normalized_target",
    "step",
    "make_network",
]

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class SteppingStrategy:
    """Marching rule u(t+tau) ~= alpha * u(t) + beta(tau) * net_output."""

    kind: str

    def coefficients(self, tau: float) -> tuple[float, float]:
        if self.kind == "output":
            return 0.0, 1.0
        if self.kind == "residual":
            return 1.0, 1.0
        if self.kind == "derivative":
            return 1.0, float(tau)
        raise ConfigError(f"unknown stepping strategy {self.kind!r}")

    def target(self, u_in: np.ndarray, u_out: np.ndarray, tau: float) -> np.ndarray:
        """The raw quantity the network is asked to produce for one pair."""
        if self.kind == "output":
            return u_out
        if self.kind == "residual":
            return u_out - u_in
        if self.kind == "derivative":
            if tau == 0.0:
                raise ValueError("derivative target is undefined at tau = 0")
            return (u_out - u_in) / tau
        raise ConfigError(f"unknown stepping strategy {self.kind!r}")


OUTPUT = SteppingStrategy("output")
RESIDUAL = SteppingStrategy("residual")
DERIVATIVE = SteppingStrategy("derivative")
_BY_NAME = {s.kind: s for s in (OUTPUT, RESIDUAL, DERIVATIVE)}


def strategy_by_name(name: str) -> SteppingStrategy:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise ConfigError(f"unknown stepping strategy {name!r}") from None


@dataclass
class NormStats:
    """Per-channel statistics for one stepping strategy plus metric statistics."""

    in_mean: np.ndarray
    in_std: np.ndarray
    tgt_mean: np.ndarray
    tgt_std: np.ndarray
    t_min: float
    t_max: float
    glob_mean: np.ndarray
    glob_std: np.ndarray
    coeff_mean: np.ndarray | None = None
    coeff_std: np.ndarray | None = None

    @property
    def t_range(self) -> float:
        return max(self.t_max - self.t_min, STD_FLOOR)

    def to_named(self) -> dict[str, np.ndarray]:
        named = {
            "stats/in_mean": self.in_mean,
            "stats/in_std": self.in_std,
            "stats/tgt_mean": self.tgt_mean,
            "stats/tgt_std": self.tgt_std,
            "stats/t_window": np.array([self.t_min, self.t_max]),
            "stats/glob_mean": self.glob_mean,
            "stats/glob_std": self.glob_std,
        }
        if self.coeff_mean is not None:
            named["stats/coeff_mean"] = self.coeff_mean
            named["stats/coeff_std"] = self.coeff_std
        return named

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray]) -> "NormStats":
        return cls(
            in_mean=np.asarray(named["stats/in_mean"], dtype=np.float64),
            in_std=np.asarray(named["stats/in_std"], dtype=np.float64),
            tgt_mean=np.asarray(named["stats/tgt_mean"], dtype=np.float64),
            tgt_std=np.asarray(named["stats/tgt_std"], dtype=np.float64),
            t_min=float(named["stats/t_window"][0]),
            t_max=float(named["stats/t_window"][1]),
            glob_mean=np.asarray(named["stats/glob_mean"], dtype=np.float64),
            glob_std=np.asarray(named["stats/glob_std"], dtype=np.float64),
            coeff_mean=(
                np.asarray(named["stats/coeff_mean"], dtype=np.float64)
                if "stats/coeff_mean" in named
                else None
            ),
            coeff_std=(
                np.asarray(named["stats/coeff_std"], dtype=np.float64)
                if "stats/coeff_std" in named
                else None
            ),
        )


class _Pooled:
    """Streaming per-channel mean/std accumulator in double precision."""

    def __init__(self, channels: int):
        self.n = 0
        self.s = np.zeros(channels)
        self.s2 = np.zeros(channels)

    def add(self, x: np.ndarray) -> None:
        flat = x.reshape(-1, x.shape[-1]).astype(np.float64)
        self.n += flat.shape[0]
        self.s += flat.sum(axis=0)
        self.s2 += (flat * flat).sum(axis=0)

    def finish(self) -> tuple[np.ndarray, np.ndarray]:
        mean = self.s / self.n
        var = np.maximum(self.s2 / self.n - mean * mean, 0.0)
        return mean, np.maximum(np.sqrt(var), STD_FLOOR)


def compute_norm_stats(dataset, pairs, strategy: SteppingStrategy, time_indices=None) -> NormStats:
    """Pool statistics over all cited training pairs.

    ``pairs`` holds (k, n) positions into ``time_indices`` (or directly into
    the dataset's snapshot axis when ``time_indices`` is None). The derivative
    strategy's target statistics skip tau = 0 pairs, whose target is undefined.
    """
    if len(pairs) == 0:
        raise ValueError("cannot compute statistics from an empty pair list")
    idx = np.arange(dataset.fields.shape[1]) if time_indices is None else np.asarray(time_indices)
    times = dataset.times[idx]
    fields = dataset.fields  # (M, Nt, N, s)
    s = fields.shape[-1]
    inp = _Pooled(s)
    tgt = _Pooled(s)
    glob = _Pooled(s)
    for j in range(idx.size):
        glob.add(fields[:, idx[j]])
    t_in = []
    for k, n in pairs:
        u_k = fields[:, idx[k]].astype(np.float64)
        tau = float(times[n] - times[k])
        inp.add(u_k)
        t_in.append(float(times[k]))
        if strategy.kind == "derivative" and tau == 0.0:
            continue
        tgt.add(strategy.target(u_k, fields[:, idx[n]].astype(np.float64), tau))
    if tgt.n == 0:
        raise ValueError("no pairs with a defined target for this strategy")
    in_mean, in_std = inp.finish()
    tgt_mean, tgt_std = tgt.finish()
    glob_mean, glob_std = glob.finish()
    coeff_mean = coeff_std = None
    if dataset.coeffs is not None:
        cp = _Pooled(dataset.coeffs.shape[-1])
        cp.add(dataset.coeffs)
        coeff_mean, coeff_std = cp.finish()
    return NormStats(
        in_mean=in_mean,
        in_std=in_std,
        tgt_mean=tgt_mean,
        tgt_std=tgt_std,
        t_min=min(t_in),
        t_max=max(t_in),
        glob_mean=glob_mean,
        glob_std=glob_std,
        coeff_mean=coeff_mean,
        coeff_std=coeff_std,
    )


def normalize_input(u: np.ndarray, stats: NormStats) -> np.ndarray:
    return (u - stats.in_mean) / stats.in_std


def normalize_coeffs(c: np.ndarray | None, stats: NormStats) -> np.ndarray | None:
    if c is None:
        return None
    return (c - stats.coeff_mean) / stats.coeff_std


def normalized_target(u_in: np.ndarray, u_out: np.ndarray, tau: float,
                      strategy: SteppingStrategy, stats: NormStats) -> np.ndarray:
    return (strategy.target(u_in, u_out, tau) - stats.tgt_mean) / stats.tgt_std


def time_channels(t: float, tau: float, stats: NormStats) -> tuple[float, float]:
    """Min-max normalized embedder channels for input time and lead time."""
    return (t - stats.t_min) / stats.t_range, tau / stats.t_range


def make_network(params, cfg, gt):
    """Bind model parameters and a graph into the callable ``step`` expects."""
    from . import model

    def network(u_norm, c_norm, t_norm, tau_norm, tau_raw, mask_rng=None):
        out = model.forward(params, cfg, gt, u_norm, c_norm, t_norm, tau_norm, tau_raw, mask_rng)
        return out.data

    return network


def step(
    network,
    stats: NormStats,
    strategy: SteppingStrategy,
    u: np.ndarray,
    c: np.ndarray | None,
    t: float,
    tau: float,
    mask_rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Predict u(t + tau) from u(t) for a batched field (B, N, s).

    ``t`` and ``tau`` are scalars shared by the batch or per-element arrays of
    length B. Inputs are normalized with the pre-computed statistics, the raw
    network output is de-normalized as the strategy's target quantity, and the
    result is combined as alpha * u + beta * target. The derivative strategy
    returns the input unchanged at tau = 0 (beta = 0 makes the network
    irrelevant).
    """
    if np.any(np.asarray(tau) < 0):
        raise ValueError(f"lead time must be non-negative, got {tau}")
    if strategy.kind == "derivative" and np.ndim(tau) == 0 and tau == 0.0:
        return u.copy()
    u_norm = normalize_input(u, stats)
    c_norm = normalize_coeffs(c, stats)
    t_norm, tau_norm = time_channels(t, tau, stats)
    raw = network(u_norm, c_norm, t_norm, tau_norm, tau, mask_rng)
    target = stats.tgt_mean + stats.tgt_std * raw.astype(np.float64)
    if strategy.kind == "output":
        return target
    if strategy.kind == "residual":
        return u + target
    beta = np.reshape(tau, (-1, 1, 1)) if np.ndim(tau) else tau
    return u + beta * target
