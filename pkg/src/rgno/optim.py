"""Decoupled-weight-decay adaptive-moment optimizer and the learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

__all__ = ["OptimizerState", "optimizer_step", "lr_schedule"]

LR_FLOOR = 1e-5
LR_PEAK = 2e-4
LR_FINAL = 1e-6
WARMUP_END = 0.02
COSINE_END = 0.90


@dataclass
class OptimizerState:
    """Per-parameter first/second moment accumulators plus hyperparameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kw) -> "OptimizerState":
        state = cls(**kw)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def optimizer_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> None:
    """One in-place update with bias-corrected moments and decoupled decay."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


class FlatAdamW:
    """Same update as :func:`optimizer_step`, on one concatenated vector.

    Parameter tensors are rebound to views of a contiguous buffer once, so the
    per-step work is a handful of vector operations regardless of how many
    named tensors the model has. Element order follows dict order, making the
    update bit-identical to the per-tensor loop.
    """

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=1e-8):
        self.names = list(params)
        sizes = [params[k].data.size for k in self.names]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        dtype = params[self.names[0]].data.dtype
        self.flat = np.empty(int(offsets[-1]), dtype=dtype)
        for name, lo, hi in zip(self.names, offsets[:-1], offsets[1:]):
            p = params[name]
            self.flat[lo:hi] = p.data.ravel()
            p.data = self.flat[lo:hi].reshape(p.data.shape)
        self._slices = {n: (int(lo), int(hi)) for n, lo, hi in
                        zip(self.names, offsets[:-1], offsets[1:])}
        self.state = OptimizerState(beta1=beta1, beta2=beta2, eps=eps,
                                    weight_decay=weight_decay)
        self.state.m["flat"] = np.zeros_like(self.flat)
        self.state.v["flat"] = np.zeros_like(self.flat)

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        g = np.concatenate([a.ravel() for a in grads])
        st = self.state
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        m, v = st.m["flat"], st.v["flat"]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / (1.0 - b1**st.step)) / (np.sqrt(v / (1.0 - b2**st.step)) + st.eps)
        if st.weight_decay:
            update += st.weight_decay * self.flat
        self.flat -= (lr * update).astype(self.flat.dtype, copy=False)


def lr_schedule(epoch_fraction: float) -> float:
    """Learning rate at a fractional position of the run.

    Linear warm-up 1e-5 -> 2e-4 over the first 2% of epochs, cosine decay back
    to 1e-5 until 90%, then exponential decay to 1e-6 at the end.
    """
    f = float(epoch_fraction)
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"epoch fraction must be in [0, 1], got {f}")
    if f <= WARMUP_END:
        return LR_FLOOR + (LR_PEAK - LR_FLOOR) * (f / WARMUP_END)
    if f <= COSINE_END:
        u = (f - WARMUP_END) / (COSINE_END - WARMUP_END)
        return LR_FLOOR + (LR_PEAK - LR_FLOOR) * 0.5 * (1.0 + np.cos(np.pi * u))
    u = (f - COSINE_END) / (1.0 - COSINE_END)
    return LR_FLOOR * (LR_FINAL / LR_FLOOR) ** u
