"""The encode-process-decode network over a regional graph.

Every feed-forward block is a one-hidden-layer MLP (swish) followed by a
normalization whose output is conditioned on the lead time through two small
sigmoid MLPs: y_hat = (1 + tau*gamma(tau)) * y_norm + tau*lambda(tau). The
final output block is a plain two-layer MLP without normalization.

Message inputs are never concatenated explicitly; the first MLP layer is split
into one weight matrix per input part, which avoids materializing broadcast
copies when parts carry different batch shapes. Edge structural features are
sample-independent, so their embedded latents are kept at batch size 1 and the
lead-time conditioning is applied lazily, after the mask has selected the
block's surviving edges.

Edge masking draws one keep-vector per message-passing block per forward pass;
masked edges produce no message and, in the processor, receive no residual
update. Mean aggregation over the survivors needs no rescaling, and a receiver
whose incoming edges are all masked aggregates the zero vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import RegionalGraph

__all__ = [
    "ModelConfig",
    "GraphTensors",
    "MaskPlan",
    "LatentState",
    "init_params",
    "parameter_count",
    "block_parameter_counts",
    "embed",
    "encode",
    "process",
    "decode",
    "forward",
]


@dataclass
class ModelConfig:
    latent_width: int = 128
    processor_blocks: int = 18
    cond_hidden: int = 16
    mask_prob: float = 0.5
    n_fields: int = 1
    n_coeffs: int = 0
    phys_feat_width: int = 2
    reg_feat_width: int = 3
    edge_feat_width: int = 3

    @classmethod
    def for_graph(cls, graph: RegionalGraph, **kw) -> "ModelConfig":
        return cls(
            phys_feat_width=graph.node_feats_phys.shape[1],
            reg_feat_width=graph.node_feats_reg.shape[1],
            edge_feat_width=graph.p2r.struct_feats.shape[1],
            **kw,
        )


@dataclass
class GraphTensors:
    """A regional graph converted to the arrays the network consumes."""

    n_phys: int
    n_reg: int
    phys_feats: Tensor
    reg_feats: Tensor
    p2r_send: np.ndarray
    p2r_recv: np.ndarray
    p2r_feats: Tensor
    r2r_send: np.ndarray
    r2r_recv: np.ndarray
    r2r_feats: Tensor
    r2p_send: np.ndarray
    r2p_recv: np.ndarray
    r2p_feats: Tensor

    @classmethod
    def from_graph(cls, graph: RegionalGraph, dtype=np.float64) -> "GraphTensors":
        def feat(x):
            return ad.constant(np.ascontiguousarray(x, dtype=dtype)[None])

        return cls(
            n_phys=graph.n_physical,
            n_reg=graph.n_regional,
            phys_feats=feat(graph.node_feats_phys),
            reg_feats=feat(graph.node_feats_reg),
            p2r_send=graph.p2r.senders,
            p2r_recv=graph.p2r.receivers,
            p2r_feats=feat(graph.p2r.struct_feats),
            r2r_send=graph.r2r.senders,
            r2r_recv=graph.r2r.receivers,
            r2r_feats=feat(graph.r2r.struct_feats),
            r2p_send=graph.r2p.senders,
            r2p_recv=graph.r2p.receivers,
            r2p_feats=feat(graph.r2p.struct_feats),
        )

    @property
    def dtype(self):
        return self.phys_feats.data.dtype


@dataclass
class MaskPlan:
    """Per message-passing block, indices of the edges kept this forward pass."""

    keep: list[np.ndarray | None]

    @classmethod
    def draw(cls, rng: np.random.Generator, edge_counts: list[int], p: float) -> "MaskPlan":
        keep = [np.flatnonzero(rng.random(n) >= p) for n in edge_counts]
        return cls(keep=keep)

    @classmethod
    def off(cls, n_blocks: int) -> "MaskPlan":
        return cls(keep=[None] * n_blocks)


@dataclass
class EdgeLatent:
    """Embedded edge features awaiting masking and lead-time conditioning.

    The pre-normalization latents are sample-independent (batch axis 1); row
    normalization commutes with row selection, so conditioning can run after
    the mask subset is taken.
    """

    prenorm: Tensor  # (1, E, F)
    gmul: Tensor  # (B, 1, F)
    ladd: Tensor  # (B, 1, F)

    def take(self, keep: np.ndarray | None) -> Tensor:
        x = self.prenorm if keep is None else ad.gather(self.prenorm, keep)
        return ad.cond_layer_norm(x, self.gmul, self.ladd)


@dataclass
class LatentState:
    phys: Tensor
    reg: Tensor
    p2r: EdgeLatent
    r2r: EdgeLatent
    r2p: EdgeLatent
    ctx: "TimeContext" = field(repr=False, default=None)


@dataclass
class TimeContext:
    """Broadcastable time channels for one (possibly batched) forward pass."""

    t_col: Tensor  # (B, 1, 1) min-max normalized input time
    tau_col: Tensor  # (B, 1, 1) lead time on the same scale
    tau_raw2d: Tensor  # (B, 1) raw lead time, conditioning MLP input
    tau_raw3d: Tensor  # (B, 1, 1) raw lead time, conditioning multiplier

    @classmethod
    def build(cls, t_norm, tau_norm, tau_raw, dtype) -> "TimeContext":
        t_norm = np.atleast_1d(np.asarray(t_norm, dtype=dtype))
        tau_norm = np.atleast_1d(np.asarray(tau_norm, dtype=dtype))
        tau_raw = np.atleast_1d(np.asarray(tau_raw, dtype=dtype))
        return cls(
            t_col=ad.constant(t_norm[:, None, None]),
            tau_col=ad.constant(tau_norm[:, None, None]),
            tau_raw2d=ad.constant(tau_raw[:, None]),
            tau_raw3d=ad.constant(tau_raw[:, None, None]),
        )


def _init_affine(rng, fan_in, n_in, n_out, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype))


def _init_ff(params, rng, name, part_widths, hidden, out_width, dtype, conditioned, cond_hidden):
    fan_in = sum(part_widths)
    for i, w in enumerate(part_widths):
        params[f"{name}/W1_{i}"] = _init_affine(rng, fan_in, w, hidden, dtype)
    params[f"{name}/b1"] = ad.parameter(np.zeros(hidden, dtype=dtype))
    params[f"{name}/W2"] = _init_affine(rng, hidden, hidden, out_width, dtype)
    params[f"{name}/b2"] = ad.parameter(np.zeros(out_width, dtype=dtype))
    if conditioned:
        for mlp in ("g", "l"):
            params[f"{name}/cond/{mlp}w1"] = _init_affine(rng, 1, 1, cond_hidden, dtype)
            params[f"{name}/cond/{mlp}b1"] = ad.parameter(np.zeros(cond_hidden, dtype=dtype))
            # Zero output layer: training starts at the unconditioned norm.
            params[f"{name}/cond/{mlp}w2"] = ad.parameter(
                np.zeros((cond_hidden, out_width), dtype=dtype)
            )
            params[f"{name}/cond/{mlp}b2"] = ad.parameter(np.zeros(out_width, dtype=dtype))


def _block_specs(cfg: ModelConfig):
    f = cfg.latent_width
    e = cfg.edge_feat_width
    phys_parts = [cfg.n_fields, cfg.phys_feat_width]
    if cfg.n_coeffs:
        phys_parts.append(cfg.n_coeffs)
    phys_parts += [1, 1]  # t and tau channels
    specs = [
        ("embed/phys", phys_parts, f, True),
        ("embed/reg", [cfg.reg_feat_width], f, True),
        ("embed/p2r", [e], f, True),
        ("embed/r2r", [e], f, True),
        ("embed/r2p", [e], f, True),
        ("enc/edge", [f, f, f], f, True),
        ("enc/reg", [f, f], f, True),
        ("enc/phys", [f], f, True),
    ]
    for p in range(cfg.processor_blocks):
        specs.append((f"proc{p}/edge", [f, f, f], f, True))
        specs.append((f"proc{p}/node", [f, f], f, True))
    specs += [
        ("dec/edge", [f, f, f], f, True),
        ("dec/phys", [f, f], f, True),
        ("out", [f], cfg.n_fields, False),
    ]
    return specs


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name, parts, out_width, conditioned in _block_specs(cfg):
        _init_ff(params, rng, name, parts, cfg.latent_width, out_width, dtype,
                 conditioned, cfg.cond_hidden)
    return params


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(int(p.data.size) for p in params.values())


def block_parameter_counts(params: dict[str, Tensor]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for name, p in params.items():
        block = name.split("/W")[0].split("/b")[0].split("/cond")[0]
        counts[block] = counts.get(block, 0) + int(p.data.size)
    return counts


def _cond_pair(params, name, ctx: TimeContext) -> tuple[Tensor, Tensor]:
    gmul = ad.cond_head(
        ctx.tau_raw2d, params[f"{name}/cond/gw1"], params[f"{name}/cond/gb1"],
        params[f"{name}/cond/gw2"], params[f"{name}/cond/gb2"], ctx.tau_raw3d,
    )
    ladd = ad.cond_head(
        ctx.tau_raw2d, params[f"{name}/cond/lw1"], params[f"{name}/cond/lb1"],
        params[f"{name}/cond/lw2"], params[f"{name}/cond/lb2"], ctx.tau_raw3d,
    )
    return gmul, ladd


def _ff_prenorm(params, name, parts: list[Tensor]) -> Tensor:
    h = ad.ff_hidden(
        [ad.affine(x, params[f"{name}/W1_{i}"]) for i, x in enumerate(parts)],
        params[f"{name}/b1"],
    )
    return ad.affine(h, params[f"{name}/W2"], params[f"{name}/b2"])


def _ff(params, name, parts: list[Tensor], ctx: TimeContext | None, conditioned=True) -> Tensor:
    y = _ff_prenorm(params, name, parts)
    if not conditioned:
        return y
    gmul, ladd = _cond_pair(params, name, ctx)
    return ad.cond_layer_norm(y, gmul, ladd)


def _msg_ff(params, name, v_send, v_recv, e, send, recv, ctx) -> Tensor:
    """Per-edge message FF with the first layer applied before gathering.

    The first-layer projections of the sender and receiver latents are linear,
    so they run on the (much smaller) node sets and are gathered onto the
    edges inside the fused hidden op, which is algebraically identical to
    gathering first.
    """
    h = ad.message_hidden(
        ad.affine(v_send, params[f"{name}/W1_0"]),
        ad.affine(v_recv, params[f"{name}/W1_1"]),
        ad.affine(e, params[f"{name}/W1_2"]),
        send,
        recv,
        params[f"{name}/b1"],
    )
    y = ad.affine(h, params[f"{name}/W2"], params[f"{name}/b2"])
    gmul, ladd = _cond_pair(params, name, ctx)
    return ad.cond_layer_norm(y, gmul, ladd)


def _embed_edges(params, name, feats: Tensor, ctx: TimeContext) -> EdgeLatent:
    gmul, ladd = _cond_pair(params, name, ctx)
    return EdgeLatent(prenorm=_ff_prenorm(params, name, [feats]), gmul=gmul, ladd=ladd)


def embed(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    gt: GraphTensors,
    u,
    c,
    t_norm,
    tau_norm,
    tau_raw,
) -> LatentState:
    """Lift raw node/edge features to latent width.

    ``u`` is (B, N, s) in normalized units (array or Tensor); ``c`` is
    (B, N, q) or None; the time scalars are per batch element.
    """
    dtype = gt.dtype
    if not isinstance(u, Tensor):
        u = ad.constant(np.asarray(u, dtype=dtype))
    if u.data.ndim != 3 or u.data.shape[1] != gt.n_phys or u.data.shape[2] != cfg.n_fields:
        raise ValueError(
            f"field shape {u.data.shape} does not match (B, {gt.n_phys}, {cfg.n_fields})"
        )
    ctx = TimeContext.build(t_norm, tau_norm, tau_raw, dtype)
    phys_parts = [u, gt.phys_feats]
    if cfg.n_coeffs:
        if c is None:
            raise ValueError("model expects coefficient fields but none were given")
        if not isinstance(c, Tensor):
            c = ad.constant(np.asarray(c, dtype=dtype))
        phys_parts.append(c)
    phys_parts += [ctx.t_col, ctx.tau_col]
    return LatentState(
        phys=_ff(params, "embed/phys", phys_parts, ctx),
        reg=_ff(params, "embed/reg", [gt.reg_feats], ctx),
        p2r=_embed_edges(params, "embed/p2r", gt.p2r_feats, ctx),
        r2r=_embed_edges(params, "embed/r2r", gt.r2r_feats, ctx),
        r2p=_embed_edges(params, "embed/r2p", gt.r2p_feats, ctx),
        ctx=ctx,
    )


def _subset(send, recv, keep):
    if keep is None:
        return send, recv
    return send[keep], recv[keep]


def encode(params, cfg, gt: GraphTensors, state: LatentState, mask: MaskPlan) -> LatentState:
    """One message-passing step from physical into regional nodes."""
    ctx = state.ctx
    keep = mask.keep[0]
    send, recv = _subset(gt.p2r_send, gt.p2r_recv, keep)
    e = state.p2r.take(keep)
    m = _msg_ff(params, "enc/edge", state.phys, state.reg, e, send, recv, ctx)
    agg = ad.scatter_mean(m, recv, gt.n_reg)
    reg = ad.add(state.reg, _ff(params, "enc/reg", [state.reg, agg], ctx))
    phys = ad.add(state.phys, _ff(params, "enc/phys", [state.phys], ctx))
    return LatentState(phys=phys, reg=reg, p2r=state.p2r, r2r=state.r2r, r2p=state.r2p, ctx=ctx)


def process(params, cfg, gt: GraphTensors, state: LatentState, mask: MaskPlan) -> LatentState:
    """P sequential residual message-passing blocks on the regional mesh."""
    ctx = state.ctx
    reg = state.reg
    e_full = state.r2r.take(None)  # (B, E, F), residual-updated across blocks
    n_edges = gt.r2r_send.shape[0]
    for p in range(cfg.processor_blocks):
        keep = mask.keep[1 + p]
        send, recv = _subset(gt.r2r_send, gt.r2r_recv, keep)
        e = e_full if keep is None else ad.gather(e_full, keep)
        m = _msg_ff(params, f"proc{p}/edge", reg, reg, e, send, recv, ctx)
        agg = ad.scatter_mean(m, recv, gt.n_reg)
        reg = ad.add(reg, _ff(params, f"proc{p}/node", [reg, agg], ctx))
        if keep is None:
            e_full = ad.add(e_full, m)
        else:
            e_full = ad.add(e_full, ad.row_scatter(m, keep, n_edges))
    return LatentState(phys=state.phys, reg=reg, p2r=state.p2r, r2r=state.r2r, r2p=state.r2p,
                       ctx=ctx)


def decode(params, cfg, gt: GraphTensors, state: LatentState, mask: MaskPlan) -> Tensor:
    """One message-passing step back to physical nodes, then the output MLP."""
    ctx = state.ctx
    keep = mask.keep[-1]
    send, recv = _subset(gt.r2p_send, gt.r2p_recv, keep)
    e = state.r2p.take(keep)
    m = _msg_ff(params, "dec/edge", state.reg, state.phys, e, send, recv, ctx)
    agg = ad.scatter_mean(m, recv, gt.n_phys)
    phys = ad.add(state.phys, _ff(params, "dec/phys", [state.phys, agg], ctx))
    return _ff(params, "out", [phys], ctx, conditioned=False)


def mask_block_counts(cfg: ModelConfig, gt: GraphTensors) -> list[int]:
    return (
        [gt.p2r_send.shape[0]]
        + [gt.r2r_send.shape[0]] * cfg.processor_blocks
        + [gt.r2p_send.shape[0]]
    )


def forward(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    gt: GraphTensors,
    u,
    c,
    t_norm,
    tau_norm,
    tau_raw,
    mask_rng: np.random.Generator | None = None,
) -> Tensor:
    """Raw network output (B, N, s). Masking is active iff ``mask_rng`` is given."""
    if mask_rng is not None and cfg.mask_prob > 0.0:
        mask = MaskPlan.draw(mask_rng, mask_block_counts(cfg, gt), cfg.mask_prob)
    else:
        mask = MaskPlan.off(cfg.processor_blocks + 2)
    state = embed(params, cfg, gt, u, c, t_norm, tau_norm, tau_raw)
    state = encode(params, cfg, gt, state, mask)
    state = process(params, cfg, gt, state, mask)
    return decode(params, cfg, gt, state, mask)
