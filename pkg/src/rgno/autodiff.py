"""Reverse-mode differentiation over dense numpy arrays.

The operation set is exactly what the network needs: affine maps, swish and
sigmoid activations, concatenation, row gather/scatter, segment means for
message aggregation, feature-wise normalization, elementwise arithmetic, and
mean-squared error; two fused compounds (``ff_hidden`` and
``cond_layer_norm``) collapse the hottest elementwise chains into single
passes. Primitives record onto the active :class:`Tape`; without an active
tape they run as plain numpy with no bookkeeping, which is the inference mode.

Tensors are immutable values as far as the graph is concerned; the tape is
owned by a single forward pass. Replaying the tape in reverse creation order
visits each recorded operation exactly once in reverse topological order.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as _k

__all__ = [
    "Tensor",
    "Tape",
    "grad",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "scale",
    "affine",
    "swish",
    "sigmoid",
    "concat",
    "gather",
    "scatter_mean",
    "row_scatter",
    "layer_stats_normalize",
    "cond_layer_norm",
    "ff_hidden",
    "message_hidden",
    "cond_head",
    "reshape",
    "mse",
]


class Tensor:
    """A dense array plus an adjoint slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(np.array(data), requires_grad=True)


class Tape:
    """Records primal operations so adjoints can be replayed in reverse."""

    _ACTIVE: "Tape | None" = None

    def __init__(self):
        self._nodes: list[tuple[Tensor, callable]] = []

    def __enter__(self):
        if Tape._ACTIVE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        Tape._ACTIVE = self
        return self

    def __exit__(self, *exc):
        Tape._ACTIVE = None
        return False

    def backward(self, loss: Tensor) -> None:
        """Propagate adjoints from a scalar loss into every recorded parent."""
        if loss.data.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, _, bw in reversed(self._nodes):
            if out.grad is None:
                continue
            bw(out.grad)
            out.grad = None  # free the intermediate adjoint eagerly


def grad(loss: Tensor, params: list[Tensor], tape: Tape) -> list[np.ndarray]:
    """Adjoints of ``loss`` w.r.t. ``params``.

    Clears the gradient slot of every tensor the tape touched, so back-to-back
    calls never leak accumulation across passes.
    """
    tape.backward(loss)
    out = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        out.append(g)
        p.grad = None
    for _, parents, _ in tape._nodes:
        for p in parents:
            p.grad = None
    tape._nodes.clear()
    return out


def _record(out: Tensor, parents: tuple[Tensor, ...], bw) -> Tensor:
    tape = Tape._ACTIVE
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._nodes.append((out, parents, bw))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # First store may alias an upstream adjoint; accumulation reallocates
    # instead of mutating, so shared arrays are never written in place.
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(np.asarray(x))


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data + b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _sum_to(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _sum_to(g, b.data.shape))

    return _record(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data - b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _sum_to(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _sum_to(-g, b.data.shape))

    return _record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data * b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _sum_to(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _sum_to(g * a.data, b.data.shape))

    return _record(out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)

    def bw(g):
        _accum(x, g * c)

    return _record(out, (x,), bw)


def _flat2d(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) over the last axis; x is (..., in), w is (in, out)."""
    xd = x.data
    if xd.ndim > 2 and xd.flags.c_contiguous:
        y = (_flat2d(xd) @ w.data).reshape(xd.shape[:-1] + (w.data.shape[1],))
    else:
        y = xd @ w.data
    if b is not None:
        y += b.data
    out = Tensor(y)

    def bw(g):
        if x.requires_grad:
            if g.ndim > 2 and g.flags.c_contiguous:
                gx = (_flat2d(g) @ w.data.T).reshape(xd.shape)
            else:
                gx = g @ w.data.T
            _accum(x, gx)
        if w.requires_grad:
            _accum(w, np.ascontiguousarray(_flat2d(xd)).T @ np.ascontiguousarray(_flat2d(g)))
        if b is not None and b.requires_grad:
            _accum(b, _flat2d(g).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, bw)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(s)

    def bw(g):
        _accum(x, g * (s * (1.0 - s)))

    return _record(out, (x,), bw)


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    y, s = _k.swish_forward(x.data)
    out = Tensor(y)

    def bw(g):
        _accum(x, _k.swish_backward(x.data, s, g))

    return _record(out, (x,), bw)


def ff_hidden(parts: list[Tensor], bias: Tensor) -> Tensor:
    """swish(sum(parts) + bias) with one activation pass.

    Parts broadcast against each other (batch or row axes of extent 1 are
    allowed); the gradient to each part is reduced back to its shape.
    """
    datas = [p.data for p in parts] + [bias.data]
    shape = np.broadcast_shapes(*[d.shape for d in datas])
    zb = None
    rest = []
    for d in datas:
        if zb is None and d.shape == shape:
            zb = d.copy()
        else:
            rest.append(d)
    if zb is None:
        zb = np.zeros(shape, dtype=datas[0].dtype)
    for d in rest:
        zb += d
    y, s = _k.swish_forward(zb)
    out = Tensor(y)

    def bw(g):
        gz = _k.swish_backward(zb, s, g)
        for p in parts:
            if p.requires_grad:
                _accum(p, _sum_to(gz, p.data.shape))
        if bias.requires_grad:
            _accum(bias, _sum_to(gz, bias.data.shape))

    return _record(out, tuple(parts) + (bias,), bw)


def message_hidden(ps: Tensor, pr: Tensor, ep: Tensor, send: np.ndarray,
                   recv: np.ndarray, bias: Tensor) -> Tensor:
    """Hidden layer of a per-edge message MLP, fused.

    Equivalent to swish(gather(ps, send) + gather(pr, recv) + ep + bias) where
    ``ps``/``pr`` hold first-layer projections per node and ``ep`` the
    projected edge latents, all batched (B, rows, F).
    """
    z = _k.message_preactivation(ps.data, pr.data, ep.data, send, recv, bias.data)
    y, s = _k.swish_forward(z)
    out = Tensor(y)
    n_send = ps.data.shape[-2]
    n_recv = pr.data.shape[-2]

    def bw(g):
        gz = _k.swish_backward(z, s, g)
        if ps.requires_grad:
            _accum(ps, _sum_to(_k.segment_sum(gz, send, n_send), ps.data.shape))
        if pr.requires_grad:
            _accum(pr, _sum_to(_k.segment_sum(gz, recv, n_recv), pr.data.shape))
        if ep.requires_grad:
            _accum(ep, _sum_to(gz, ep.data.shape))
        if bias.requires_grad:
            _accum(bias, gz.reshape(-1, gz.shape[-1]).sum(axis=0))

    return _record(out, (ps, pr, ep, bias), bw)


def cond_head(tau2d: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
              tau3d: Tensor) -> Tensor:
    """Lead-time conditioning head: tau * MLP_sigmoid(tau), one tape node.

    Returns (B, 1, F) ready to broadcast over rows; the raw lead time enters
    both as the MLP input (B, 1) and as the outer multiplier (B, 1, 1), so a
    zero lead time yields exactly zero conditioning.
    """
    h = 1.0 / (1.0 + np.exp(-(tau2d.data @ w1.data + b1.data)))
    y = h @ w2.data + b2.data
    out = Tensor(tau3d.data * y[:, None, :])

    def bw(g):
        gy = (g * tau3d.data)[:, 0, :]
        if b2.requires_grad:
            _accum(b2, gy.sum(axis=0))
        if w2.requires_grad:
            _accum(w2, h.T @ gy)
        gz = (gy @ w2.data.T) * (h * (1.0 - h))
        if b1.requires_grad:
            _accum(b1, gz.sum(axis=0))
        if w1.requires_grad:
            _accum(w1, tau2d.data.T @ gz)

    return _record(out, (w1, b1, w2, b2), bw)


def concat(xs: list[Tensor], axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    sizes = [x.data.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if not x.requires_grad:
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(x, g[tuple(sl)])

    return _record(out, tuple(xs), bw)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along the second-to-last axis: (..., M, F) -> (..., K, F)."""
    out = Tensor(_k.gather_rows(x.data, idx))
    m = x.data.shape[-2]

    def bw(g):
        _accum(x, _k.segment_sum(np.ascontiguousarray(g), idx, m))

    return _record(out, (x,), bw)


def scatter_mean(values: Tensor, receivers: np.ndarray, out_size: int) -> Tensor:
    """Mean of contributing rows per receiver slot; empty slots get zeros.

    ``values`` is (..., E, F); ``receivers`` maps each row to a slot in
    [0, out_size). Rows sharing a slot are averaged, in ascending row order.
    """
    receivers = np.asarray(receivers)
    if receivers.size and (receivers.min() < 0 or receivers.max() >= out_size):
        raise IndexError("receiver index out of range")
    vals = values.data
    if vals.ndim == 2:
        out_data, counts = _k.segment_mean_forward(vals[None], receivers, out_size)
        out_data = out_data[0]
    else:
        out_data, counts = _k.segment_mean_forward(vals, receivers, out_size)
    out = Tensor(out_data)

    def bw(g):
        if receivers.size == 0:
            return
        if g.ndim == 2:
            gv = _k.segment_mean_backward(np.ascontiguousarray(g[None]), receivers, counts)[0]
        else:
            gv = _k.segment_mean_backward(np.ascontiguousarray(g), receivers, counts)
        _accum(values, gv)

    return _record(out, (values,), bw)


def row_scatter(values: Tensor, idx: np.ndarray, out_size: int) -> Tensor:
    """Place rows at unique indices of a zero matrix: inverse selection of gather."""
    out_shape = values.data.shape[:-2] + (out_size, values.data.shape[-1])
    out_data = np.zeros(out_shape, dtype=values.data.dtype)
    out_data[..., idx, :] = values.data
    out = Tensor(out_data)

    def bw(g):
        _accum(values, g[..., idx, :])

    return _record(out, (values,), bw)


def layer_stats_normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance per row."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y)

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        _accum(x, inv * (g - gm - y * gym))

    return _record(out, (x,), bw)


def cond_layer_norm(x: Tensor, gmul: Tensor, ladd: Tensor, eps: float = 1e-6) -> Tensor:
    """Fused row normalization with multiplicative/additive conditioning.

    Computes (1 + gmul) * normalize(x) + ladd where ``x`` is (Bx, E, F) with
    Bx in {1, B} and the conditioning tensors are (B, 1, F). Identical to
    ``layer_stats_normalize`` followed by scale and shift, in fewer passes.
    """
    xc = np.ascontiguousarray(x.data)
    y, mean, inv = _k.cond_layer_norm_forward(xc, gmul.data, ladd.data, eps)
    out = Tensor(y)

    def bw(g):
        gx, g_gmul, g_ladd = _k.cond_layer_norm_backward(g, xc, mean, inv, gmul.data)
        if x.requires_grad:
            _accum(x, gx)
        if gmul.requires_grad:
            _accum(gmul, g_gmul)
        if ladd.requires_grad:
            _accum(ladd, g_ladd)

    return _record(out, (x, gmul, ladd), bw)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    orig = x.data.shape

    def bw(g):
        _accum(x, g.reshape(orig))

    return _record(out, (x,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements, as a scalar tensor."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = diff.size
    out = Tensor(np.asarray((diff * diff).mean() if n else 0.0, dtype=a.data.dtype))

    def bw(g):
        gd = (2.0 / n) * g * diff
        if a.requires_grad:
            _accum(a, gd)
        if b.requires_grad:
            _accum(b, -gd)

    return _record(out, (a, b), bw)
