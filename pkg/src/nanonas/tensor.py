"""Minimal define-by-run tensor engine with reverse-mode autodiff and AdamW.

Operations record themselves on the innermost active :class:`Tape`.  Outside
of a tape nothing is recorded, which is how inference and frozen teachers run
without building a graph.

Data is float32 by default.  Passing float64 arrays with ``dtype=np.float64``
gives a 64-bit mode that is used for finite-difference verification; every op
preserves the dtype of its inputs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numba import njit

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "NonFiniteError",
    "custom_op",
    "conv1d",
    "batch_norm1d",
    "relu",
    "clamp",
    "add",
    "sub",
    "mul",
    "exp",
    "log_softmax",
    "softmax",
    "tsum",
    "mean",
    "transpose",
    "reshape",
    "detach",
    "backward",
    "AdamW",
    "AdamWState",
    "set_finite_check",
]


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_local = threading.local()
_check_finite = True


def set_finite_check(enabled: bool) -> bool:
    """Toggle the NaN/Inf guard on op outputs; returns the previous setting."""
    global _check_finite
    prev = _check_finite
    _check_finite = bool(enabled)
    return prev


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def _guard(data: np.ndarray, op: str) -> None:
    if not _check_finite or data.size == 0:
        return
    # a finite sum implies finite entries; only scan on a suspicious sum
    with np.errstate(over="ignore", invalid="ignore"):
        total = data.sum()
    if np.isfinite(total):
        return
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class no_tape:
    """Context manager that stops recording (e.g. for a frozen teacher's forward)."""

    def __enter__(self):
        self._saved = _tape_stack()[:]
        _tape_stack().clear()
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.clear()
        stack.extend(self._saved)


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` exactly once.
    """

    def __init__(self):
        self.nodes: list | None = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed; record a new forward pass")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return 0 if self.nodes is None else len(self.nodes)

    def record(self, out: "Tensor", parents: Sequence["Tensor"], fn: Callable) -> None:
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append((out, tuple(parents), fn))

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward already ran on this tape")
        if loss._tape is not self or loss.node_id is None:
            raise TapeError("loss is not attached to this tape (detached graph)")
        self.consumed = True
        grads = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            out, parents, fn = self.nodes[nid]
            out.grad = g
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is self and p.node_id is not None:
                    prev = grads.get(p.node_id)
                    grads[p.node_id] = pg if prev is None else prev + pg
                elif p.grad is None:
                    p.grad = np.array(pg, dtype=p.data.dtype, copy=True)
                else:
                    p.grad += pg
        self.nodes = None


class Tensor:
    """Dense array with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = np.float32
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.node_id = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=like.dtype)
    if arr.ndim == 0 and like.ndim:
        arr = np.full(like.shape, arr, dtype=like.dtype)
    return Tensor._wrap(arr)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, name: str = "op") -> Tensor:
    """Wrap ``data`` as the output of an op on ``parents``.

    ``grad_fn(upstream)`` must return one gradient (or None) per parent.
    """
    _guard(data, name)
    out = Tensor._wrap(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, grad_fn)
    return out


def backward(loss: Tensor) -> None:
    if loss._tape is None:
        raise TapeError("loss has no recorded graph (detached graph)")
    loss._tape.backward(loss)


def detach(x: Tensor) -> Tensor:
    return Tensor._wrap(x.data)


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return custom_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    """Broadcasting product; ``b`` may be a Tensor, array or scalar."""
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return custom_op(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),), "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return custom_op(ad * bd, (a, b), grad_fn, "mul")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return custom_op(y, (x,), lambda g: (g * y,), "exp")


@njit(cache=True)
def _relu_grad(g, y):
    out = np.empty_like(g)
    gf, yf, of = g.ravel(), y.ravel(), out.ravel()
    for i in range(gf.size):
        of[i] = gf[i] if yf[i] > 0 else 0
    return out


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    return custom_op(y, (x,), lambda g: (_relu_grad(np.ascontiguousarray(g, dtype=y.dtype), np.ascontiguousarray(y)),), "relu")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp: lo {lo} > hi {hi}")
    inside = (x.data >= lo) & (x.data <= hi)
    return custom_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"log_softmax: axis {axis} invalid for {x.ndim}-d input")
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return custom_op(y, (x,), grad_fn, "log_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis))


def tsum(x: Tensor, axis=None) -> Tensor:
    y = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)
    shape = x.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return custom_op(y, (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / n)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def _getitem(x: Tensor, index) -> Tensor:
    y = np.array(x.data[index], copy=True)

    def grad_fn(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return custom_op(y, (x,), grad_fn, "getitem")


# ---------------------------------------------------------------- convolution


def match_channels(x: Tensor, channels: int) -> Tensor:
    """Zero-pad or truncate axis 1 of ``[N, C, L]`` to ``channels``."""
    c = x.shape[1]
    if channels < 1:
        raise ValueError("match_channels: channels must be positive")
    if c == channels:
        return x
    if channels < c:
        return _getitem(x, (slice(None), slice(0, channels)))
    out = np.zeros((x.shape[0], channels) + x.shape[2:], dtype=x.dtype)
    out[:, :c] = x.data
    return custom_op(out, (x,), lambda g: (g[:, :c],), "match_channels")


def conv_out_len(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


@njit(cache=True, fastmath=True)
def _dw_forward(xp, w, l_out):
    n, c, _ = xp.shape
    k = w.shape[1]
    out = np.zeros((n, c, l_out), dtype=xp.dtype)
    for i in range(n):
        for ch in range(c):
            o = out[i, ch]
            xr = xp[i, ch]
            for j in range(k):
                wj = w[ch, j]
                for t in range(l_out):
                    o[t] += wj * xr[t + j]
    return out


@njit(cache=True, fastmath=True)
def _dw_backward(xp, w, g):
    n, c, l_out = g.shape
    k = w.shape[1]
    gw = np.zeros((c, k), dtype=xp.dtype)
    gxp = np.zeros_like(xp)
    for i in range(n):
        for ch in range(c):
            gr = g[i, ch]
            xr = xp[i, ch]
            gx = gxp[i, ch]
            for j in range(k):
                wj = w[ch, j]
                acc = gr[0] * 0
                for t in range(l_out):
                    acc += gr[t] * xr[t + j]
                for t in range(l_out):
                    gx[t + j] += wj * gr[t]
                gw[ch, j] += acc
    return gw, gxp


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 1-D cross-correlation over ``[N, C_in, L]`` input."""
    if x.ndim != 3 or weight.ndim != 3:
        raise ValueError("conv1d expects input [N,C,L] and weight [C_out,C_in/groups,K]")
    n, c_in, length = x.shape
    c_out, cpg, k = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ValueError(f"conv1d: channels {c_in}->{c_out} not divisible by groups={groups}")
    if cpg != c_in // groups:
        raise ValueError(f"conv1d: weight expects {cpg * groups} input channels, input has {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv1d: bias shape {bias.shape} != ({c_out},)")
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError("conv1d: kernel and stride must be >= 1, padding >= 0")
    l_out = conv_out_len(length, k, stride, padding)
    if l_out < 1:
        raise ValueError(f"conv1d: non-positive output length for L={length}, K={k}")

    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    span = stride * (l_out - 1) + 1

    if k == 1 and stride == 1 and groups == 1 and padding == 0:
        kind = "pointwise"
        out = np.matmul(wd[:, :, 0], xd)
    elif groups == c_in and c_out == c_in and stride == 1 and xd.dtype == wd.dtype:
        kind = "depthwise_fast"
        xp = np.ascontiguousarray(xp)
        w2 = np.ascontiguousarray(wd[:, 0, :])
        out = _dw_forward(xp, w2, l_out)
    elif groups == c_in and c_out == c_in:
        kind = "depthwise"
        out = np.zeros((n, c_out, l_out), dtype=xd.dtype)
        for j in range(k):
            out += wd[None, :, 0, j, None] * xp[:, :, j : j + span : stride]
    else:
        kind = "general"
        cols = sliding_window_view(xp, k, axis=2)[:, :, : span : stride]
        cols_g = cols.reshape(n, groups, cpg, l_out, k)
        wg = wd.reshape(groups, c_out // groups, cpg, k)
        out = np.einsum("ngilk,goik->ngol", cols_g, wg, optimize=True).reshape(n, c_out, l_out)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.astype(xd.dtype, copy=False)

    def grad_fn(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if kind == "pointwise":
            if weight.requires_grad:
                gw = np.matmul(g, xd.transpose(0, 2, 1)).sum(axis=0)[:, :, None]
            if x.requires_grad:
                gx = np.matmul(wd[:, :, 0].T, g)
            return gx, gw, gb
        if kind == "depthwise_fast":
            gw2, gxp = _dw_backward(xp, w2, np.ascontiguousarray(g, dtype=xp.dtype))
            if weight.requires_grad:
                gw = gw2[:, None, :]
            if x.requires_grad:
                gx = gxp[:, :, padding : padding + length] if padding else gxp
            return gx, gw, gb
        if kind == "depthwise":
            if weight.requires_grad:
                gw = np.empty_like(wd)
                for j in range(k):
                    gw[:, 0, j] = np.einsum("ncl,ncl->c", g, xp[:, :, j : j + span : stride])
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for j in range(k):
                    gxp[:, :, j : j + span : stride] += wd[None, :, 0, j, None] * g
                gx = gxp[:, :, padding : padding + length] if padding else gxp
            return gx, gw, gb
        gg = g.reshape(n, groups, c_out // groups, l_out)
        if weight.requires_grad:
            gw = np.einsum("ngol,ngilk->goik", gg, cols_g, optimize=True).reshape(wd.shape)
        if x.requires_grad:
            dcols = np.einsum("ngol,goik->ngilk", gg, wg, optimize=True).reshape(n, c_in, l_out, k)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j : j + span : stride] += dcols[..., j]
            gx = gxp[:, :, padding : padding + length] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return custom_op(out, parents, grad_fn, "conv1d")


# ---------------------------------------------------------------- batch norm


@njit(cache=True)
def _bn_stats(x):
    n, c, length = x.shape
    mu = np.zeros(c)
    var = np.zeros(c)
    for ch in range(c):
        acc = 0.0
        for i in range(n):
            for t in range(length):
                acc += x[i, ch, t]
        m = acc / (n * length)
        acc2 = 0.0
        for i in range(n):
            for t in range(length):
                d = x[i, ch, t] - m
                acc2 += d * d
        mu[ch] = m
        var[ch] = acc2 / (n * length)
    return mu, var


@njit(cache=True)
def _bn_apply(x, mu, inv_std, gamma, beta):
    n, c, length = x.shape
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for i in range(n):
        for ch in range(c):
            m, s, gm, bt = mu[ch], inv_std[ch], gamma[ch], beta[ch]
            for t in range(length):
                h = (x[i, ch, t] - m) * s
                xhat[i, ch, t] = h
                out[i, ch, t] = h * gm + bt
    return xhat, out


@njit(cache=True)
def _bn_backward(g, xhat, gamma, inv_std, training):
    n, c, length = g.shape
    gx = np.empty_like(g)
    ggamma = np.zeros(c)
    gbeta = np.zeros(c)
    count = n * length
    for ch in range(c):
        s1 = 0.0
        s2 = 0.0
        for i in range(n):
            for t in range(length):
                s1 += g[i, ch, t]
                s2 += g[i, ch, t] * xhat[i, ch, t]
        ggamma[ch] = s2
        gbeta[ch] = s1
        gm = gamma[ch]
        k = gm * inv_std[ch]
        if training:
            a = s1 / count
            b = s2 / count
            for i in range(n):
                for t in range(length):
                    gx[i, ch, t] = k * (g[i, ch, t] - a - xhat[i, ch, t] * b)
        else:
            for i in range(n):
                for t in range(length):
                    gx[i, ch, t] = k * g[i, ch, t]
    return gx, ggamma, gbeta


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None,
    running_var: np.ndarray | None,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, L).

    In training mode the running statistics (updated in place) follow an
    exponential moving average with the unbiased batch variance.
    """
    if x.ndim != 3:
        raise ValueError("batch_norm1d expects [N,C,L]")
    if eps <= 0:
        raise ValueError("batch_norm1d: eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm1d: parameter shape mismatch for C={c}")
    xd = x.data
    gd = gamma.data[None, :, None]
    if training:
        m = xd.shape[0] * xd.shape[2]
        if m == 0:
            raise ValueError("batch_norm1d: empty batch in training mode")
        mu, var = _bn_stats(np.ascontiguousarray(xd))
        if running_mean is not None:
            unbiased = var * (m / max(m - 1, 1))
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm1d: eval mode needs running statistics")
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat, out = _bn_apply(np.ascontiguousarray(xd), mu.astype(xd.dtype), inv_std,
                          gamma.data.astype(xd.dtype), beta.data.astype(xd.dtype))

    def grad_fn(g):
        gx, gg, gbeta = _bn_backward(
            np.ascontiguousarray(g, dtype=xd.dtype), np.ascontiguousarray(xhat), gamma.data.astype(np.float64),
            inv_std.astype(np.float64), training)
        return (
            gx if x.requires_grad else None,
            gg.astype(xd.dtype) if gamma.requires_grad else None,
            gbeta.astype(xd.dtype) if beta.requires_grad else None,
        )

    return custom_op(out.astype(xd.dtype, copy=False), (x, gamma, beta), grad_fn, "batch_norm1d")


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamWState:
    """Moment buffers for one parameter."""

    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray
    step: int = 0


@dataclass
class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments."""

    params: list
    lr: float = 2e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    step_count: int = 0
    state: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = list(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, params: Iterable[Tensor] | None = None) -> None:
        """Update ``params`` (default: every managed parameter).

        Every updated parameter must carry a gradient.
        """
        targets = self.params if params is None else list(params)
        b1, b2 = self.betas
        for p in targets:
            if p.grad is None:
                raise ValueError("AdamW.step: parameter has no gradient")
        self.step_count += 1
        for p in targets:
            st = self.state.get(id(p))
            if st is None:
                st = self.state[id(p)] = AdamWState(np.zeros_like(p.data), np.zeros_like(p.data))
            st.step += 1
            g = p.grad.astype(p.data.dtype, copy=False)
            st.exp_avg *= b1
            st.exp_avg += (1 - b1) * g
            st.exp_avg_sq *= b2
            st.exp_avg_sq += (1 - b2) * g * g
            bc1 = 1 - b1**st.step
            bc2 = 1 - b2**st.step
            if self.weight_decay:
                p.data *= 1 - self.lr * self.weight_decay
            denom = np.sqrt(st.exp_avg_sq / bc2) + self.eps
            p.data -= (self.lr * (st.exp_avg / bc1) / denom).astype(p.data.dtype)
