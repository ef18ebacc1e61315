"""Dense tensors with reverse-mode autodiff and a surrogate spike gradient.

Values are stored as row-major numpy arrays (float32 by default, float64
supported for numerical checks).  Operations record a graph of OpNodes when
any input requires gradients; ``backward`` on a scalar fills the ``grad``
buffer of every reachable leaf.  The spike nonlinearity is exact Heaviside
forward / arctangent surrogate backward.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Raised on invalid autodiff usage (e.g. backward on a non-scalar)."""


@dataclass
class SurrogateSpec:
    """Sharpness of the arctangent surrogate used for the spike backward."""

    alpha: float = 2.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"surrogate alpha must be > 0, got {self.alpha}")

    def derivative(self, u):
        """d/du of the smoothed step, evaluated elementwise on u = x - v_th."""
        a = self.alpha
        return a / (2.0 * (1.0 + (math.pi * a * u / 2.0) ** 2))


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class OpNode:
    """One recorded operation; may have several output tensors."""

    __slots__ = ("parents", "outputs", "backward_fn", "ctx")

    def __init__(self, parents, backward_fn, ctx=None):
        self.parents = parents
        self.outputs = []
        self.backward_fn = backward_fn
        self.ctx = ctx


class Tensor:
    """A dense array plus optional gradient buffer and graph handle."""

    __slots__ = ("data", "grad", "requires_grad", "node", "slot", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.slot = 0
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- autodiff -------------------------------------------------------------

    def backward(self):
        """Reverse-mode accumulation from this scalar into leaf ``grad``s."""
        if self.data.size != 1:
            raise GraphError("backward requires a scalar tensor")
        if self.node is None and not self.requires_grad:
            return
        grads = {id(self): np.ones_like(self.data)}
        holders = {id(self): self}
        for node in _toposort(self):
            out_grads = []
            for out in node.outputs:
                g = grads.pop(id(out), None)
                out_grads.append(g)
            if all(g is None for g in out_grads):
                continue
            parent_grads = node.backward_fn(node, out_grads)
            for p, g in zip(node.parents, parent_grads):
                if g is None or not (p.requires_grad or p.node is not None):
                    continue
                if p.node is None:
                    # leaf: accumulate into the persistent buffer
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                    p.grad += g
                else:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g
                        holders[key] = p
            node.ctx = None
        if self.node is None and self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            self.grad += np.ones_like(self.data)


def _toposort(root: Tensor):
    """Nodes reachable from root, in reverse topological order."""
    order = []
    seen = set()
    if root.node is None:
        return order
    stack = [(root.node, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.node is not None and id(p.node) not in seen:
                stack.append((p.node, False))
    order.reverse()
    return order


# -- helpers -----------------------------------------------------------------


def _as_tensor(x, ref: Tensor | None = None):
    if isinstance(x, Tensor):
        return x
    dtype = ref.data.dtype if ref is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _const_like(x, ref: Tensor):
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


def _record(out_arrays, parents, backward_fn, ctx=None):
    """Wrap op results; attach a node if recording and any parent needs it."""
    single = not isinstance(out_arrays, (tuple, list))
    arrays = [out_arrays] if single else list(out_arrays)
    outs = [Tensor(a) for a in arrays]
    if _grad_enabled() and any(p.requires_grad or p.node is not None for p in parents):
        node = OpNode(tuple(parents), backward_fn, ctx)
        for i, t in enumerate(outs):
            t.node = node
            t.slot = i
        node.outputs = outs
    return outs[0] if single else tuple(outs)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ----------------------------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a)

    def bwd(node, gs):
        g = gs[0]
        return (_unbroadcast(g, node.parents[0].shape),
                _unbroadcast(g, node.parents[1].shape))

    return _record(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a)

    def bwd(node, gs):
        g = gs[0]
        return (_unbroadcast(g, node.parents[0].shape),
                _unbroadcast(-g, node.parents[1].shape))

    return _record(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a)

    def bwd(node, gs):
        g = gs[0]
        pa, pb = node.parents
        return (_unbroadcast(g * pb.data, pa.shape),
                _unbroadcast(g * pa.data, pb.shape))

    return _record(a.data * b.data, (a, b), bwd)


def div(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a)

    def bwd(node, gs):
        g = gs[0]
        pa, pb = node.parents
        ga = _unbroadcast(g / pb.data, pa.shape)
        gb = _unbroadcast(-g * pa.data / (pb.data * pb.data), pb.shape)
        return (ga, gb)

    return _record(a.data / b.data, (a, b), bwd)


def texp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bwd(node, gs):
        return (gs[0] * node.ctx,)

    return _record(out, (a,), bwd, ctx=out)


def tlog(a):
    a = _as_tensor(a)

    def bwd(node, gs):
        return (gs[0] / node.parents[0].data,)

    return _record(np.log(a.data), (a,), bwd)


def sigmoid(a):
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(node, gs):
        s = node.ctx
        return (gs[0] * s * (1.0 - s),)

    return _record(out, (a,), bwd, ctx=out)


def relu(a):
    a = _as_tensor(a)

    def bwd(node, gs):
        return (gs[0] * (node.parents[0].data > 0),)

    return _record(np.maximum(a.data, 0), (a,), bwd)


def square(a):
    a = _as_tensor(a)

    def bwd(node, gs):
        return (gs[0] * 2.0 * node.parents[0].data,)

    return _record(a.data * a.data, (a,), bwd)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)

    def bwd(node, gs):
        g = gs[0]
        p = node.parents[0]
        ax, kd = node.ctx
        if ax is None:
            return (np.broadcast_to(g, p.shape).copy(),)
        if not kd:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, p.shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd,
                   ctx=(axis, keepdims))


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape ops -----------------------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)

    def bwd(node, gs):
        return (gs[0].reshape(node.parents[0].shape),)

    return _record(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(int(i) for i in np.argsort(axes))

    def bwd(node, gs):
        return (gs[0].transpose(node.ctx),)

    return _record(a.data.transpose(axes), (a,), bwd, ctx=inv)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]

    def bwd(node, gs):
        g = gs[0]
        splits = np.cumsum(node.ctx[:-1])
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), bwd, ctx=sizes)


def gather_rows(table, index):
    """Select rows ``table[index]``; backward scatter-adds into the table."""
    table = _as_tensor(table)
    index = np.asarray(index, dtype=np.int64)

    def bwd(node, gs):
        g = np.zeros_like(node.parents[0].data)
        np.add.at(g, node.ctx, gs[0])
        return (g,)

    return _record(table.data[index], (table,), bwd, ctx=index)


# -- linear algebra --------------------------------------------------------------


def matmul(a, b):
    """Matrix product with standard gradients; batched leading dims allowed."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def bwd(node, gs):
        g = gs[0]
        pa, pb = node.parents
        ga = _unbroadcast(np.matmul(g, np.swapaxes(pb.data, -1, -2)), pa.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(pa.data, -1, -2), g), pb.shape)
        return (ga, gb)

    return _record(np.matmul(a.data, b.data), (a, b), bwd)


def linear(x, w, b=None):
    """x @ w (+ b) fused into one node."""
    x = _as_tensor(x)
    w = _as_tensor(w, x)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    out = np.matmul(x.data, w.data)
    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        out = out + b.data

    def bwd(node, gs):
        g = gs[0]
        px, pw = node.parents[0], node.parents[1]
        g2 = g.reshape(-1, g.shape[-1])
        x2 = px.data.reshape(-1, px.shape[-1])
        gx = np.matmul(g, pw.data.T).reshape(px.shape)
        gw = np.matmul(x2.T, g2)
        if len(node.parents) == 3:
            return (gx, gw, g2.sum(axis=0))
        return (gx, gw)

    return _record(out, parents, bwd)


# -- normalization -----------------------------------------------------------------


def softmax(x, axis=-1):
    """Row-stochastic exponential normalization along ``axis`` (stable)."""
    x = _as_tensor(x)
    if np.isnan(x.data).any():
        raise ValueError("softmax input contains NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(node, gs):
        g = gs[0]
        yv, ax = node.ctx
        inner = (g * yv).sum(axis=ax, keepdims=True)
        return (yv * (g - inner),)

    return _record(y, (x,), bwd, ctx=(y, axis))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = (x.data - mu) * inv * gamma.data + beta.data

    def bwd(node, gs):
        g = gs[0]
        muv, invv = node.ctx
        gam = node.parents[1].data
        xh = (node.parents[0].data - muv) * invv
        n = xh.shape[-1]
        dxhat = g * gam
        dx = invv / n * (n * dxhat
                         - dxhat.sum(axis=-1, keepdims=True)
                         - xh * (dxhat * xh).sum(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        return (dx.astype(g.dtype, copy=False),
                (g * xh).sum(axis=axes),
                g.sum(axis=axes))

    return _record(out, (x, gamma, beta), bwd, ctx=(mu, inv))


class BatchNormState:
    """Running statistics for one batch-normalized feature axis."""

    def __init__(self, num_features, dtype=DEFAULT_DTYPE, momentum=0.1, eps=1e-5):
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool):
    """Feature-wise normalization over the batch axis of a [N, F] tensor.

    Train mode (N >= 2) uses batch statistics and updates the running
    buffers with momentum; otherwise the running statistics are used.
    """
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects [batch, features], got {x.shape}")
    if x.shape[1] != state.running_mean.shape[0]:
        raise ShapeError("batch_norm feature width mismatch")
    n = x.shape[0]
    use_batch = training and n >= 2
    if use_batch:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(
            state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var
                             + m * var * n / max(n - 1, 1)).astype(
            state.running_var.dtype)
    else:
        mu = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    out = (x.data - mu) * inv * gamma.data + beta.data

    def bwd(node, gs):
        g = gs[0]
        muv, invv, batch_mode = node.ctx
        gam = node.parents[1].data
        xh = (node.parents[0].data - muv) * invv
        if batch_mode:
            nn = g.shape[0]
            dxhat = g * gam
            dx = invv / nn * (nn * dxhat
                              - dxhat.sum(axis=0)
                              - xh * (dxhat * xh).sum(axis=0))
        else:
            dx = g * gam * invv
        return (dx.astype(g.dtype, copy=False),
                (g * xh).sum(axis=0),
                g.sum(axis=0))

    return _record(out, (x, gamma, beta), bwd, ctx=(mu, inv, use_batch))


# -- spiking -----------------------------------------------------------------------


def spike_fn(x, spec: SurrogateSpec, v_threshold: float = 1.0):
    """Heaviside step of (x - v_threshold), strict inequality.

    Forward is exactly binary; backward is the arctangent surrogate
    derivative evaluated at x - v_threshold.
    """
    x = _as_tensor(x)
    s = (x.data > v_threshold).astype(x.data.dtype)

    def bwd(node, gs):
        u = node.parents[0].data - node.ctx[1]
        return ((gs[0] * node.ctx[0].derivative(u)).astype(u.dtype, copy=False),)

    return _record(s, (x,), bwd, ctx=(spec, v_threshold))


def lif_step(v, i, tau, spec: SurrogateSpec, v_threshold=1.0, v_reset=0.0,
             smooth=False):
    """One LIF update: charge h = v + (i - v)/tau, fire, hard reset.

    Returns (spikes, next membrane); fully differentiable including tau,
    with the surrogate standing in for the firing step.  ``smooth=True``
    replaces the hard step by the arctangent step whose exact derivative
    is the surrogate, which makes the whole update finite-difference
    checkable (verification only; never used in the model).
    """
    v = _as_tensor(v)
    i = _as_tensor(i, v)
    tau = _as_tensor(tau, v)
    if v.shape != i.shape:
        raise ShapeError(f"lif_step state {v.shape} vs input {i.shape}")
    if not np.isfinite(i.data).all():
        raise ValueError("lif_step input contains non-finite values")
    tv = float(tau.data)
    h = v.data + (i.data - v.data) / tv
    if smooth:
        s = 0.5 + np.arctan(math.pi * spec.alpha * (h - v_threshold) / 2.0) / math.pi
        s = s.astype(h.dtype, copy=False)
    else:
        s = (h > v_threshold).astype(h.dtype)
    v_next = h * (1.0 - s)
    if v_reset != 0.0:
        v_next = v_next + v_reset * s
    # flush decayed membranes before they reach subnormal range, where
    # x86 arithmetic slows down by orders of magnitude
    np.copyto(v_next, 0.0, where=np.abs(v_next) < 1e-30)

    def bwd(node, gs):
        gsk, gv = gs
        tval, spc, vth, vrs = node.ctx
        pv, pi = node.parents[0], node.parents[1]
        hh = pv.data + (pi.data - pv.data) / tval
        ss = node.outputs[0].data
        surr = spc.derivative(hh - vth)
        dh = np.zeros_like(hh)
        if gv is not None:
            dh += gv * (1.0 - ss) + gv * (vrs - hh) * surr
        if gsk is not None:
            dh += gsk * surr
        dvda = 1.0 - 1.0 / tval
        dtau = ((dh * (pv.data - pi.data)).sum() / (tval * tval))
        dv = dh * dvda
        np.copyto(dv, 0.0, where=np.abs(dv) < 1e-30)
        return (dv,
                dh / tval,
                np.asarray(dtau, dtype=hh.dtype).reshape(node.parents[2].shape))

    return _record((s, v_next), (v, i, tau), bwd,
                   ctx=(tv, spec, v_threshold, v_reset))


def leaky_step(v, i, tau):
    """Non-spiking leaky integration: v' = v + (i - v)/tau (no reset)."""
    v = _as_tensor(v)
    i = _as_tensor(i, v)
    tau = _as_tensor(tau, v)
    if v.shape != i.shape:
        raise ShapeError(f"leaky_step state {v.shape} vs input {i.shape}")
    if not np.isfinite(i.data).all():
        raise ValueError("leaky_step input contains non-finite values")
    tv = float(tau.data)
    out = v.data + (i.data - v.data) / tv
    np.copyto(out, 0.0, where=np.abs(out) < 1e-30)

    def bwd(node, gs):
        g = gs[0]
        tval = node.ctx
        pv, pi = node.parents[0], node.parents[1]
        dtau = ((g * (pv.data - pi.data)).sum() / (tval * tval))
        dv = g * (1.0 - 1.0 / tval)
        np.copyto(dv, 0.0, where=np.abs(dv) < 1e-30)
        return (dv,
                g / tval,
                np.asarray(dtau, dtype=g.dtype).reshape(node.parents[2].shape))

    return _record(out, (v, i, tau), bwd, ctx=tv)


def parameter(data, name=None, dtype=DEFAULT_DTYPE):
    """A leaf tensor that accumulates gradients."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)
