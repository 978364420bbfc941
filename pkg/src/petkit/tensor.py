"""Small reverse-mode differentiation engine on top of numpy.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them. ``Tensor.backward`` walks
the recorded graph in reverse topological order. Nodes whose inputs carry no
trainable ancestry are recorded without a backward rule, so frozen sub-networks
cost no more than a plain numpy forward pass.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "DimensionError", "EmptyOutputError", "ConfigError", "NumericError",
    "tensor", "parameter", "precision", "get_dtype", "set_mode", "no_grad",
    "add", "mul", "matmul", "transpose", "reshape", "getitem", "sum_", "mean",
    "conv1d", "layer_norm", "gelu", "linear", "softmax", "tile_channels",
    "multi_head_self_attention", "softmax_cross_entropy", "grad_check",
]


class DimensionError(ValueError):
    pass


class EmptyOutputError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_MODES = {"verify-64bit": np.float64, "train-32bit": np.float32}
_dtype = np.float64


def get_dtype():
    return _dtype


def set_mode(mode: str) -> None:
    """Select ``verify-64bit`` (gradient checks) or ``train-32bit``."""
    global _dtype
    if mode not in _MODES:
        raise ConfigError(f"unknown precision mode {mode!r}; expected one of {sorted(_MODES)}")
    _dtype = _MODES[mode]


@contextlib.contextmanager
def precision(mode: str):
    global _dtype
    saved = _dtype
    set_mode(mode)
    try:
        yield
    finally:
        _dtype = saved


class Tensor:
    __slots__ = ("data", "grad", "trainable", "name", "_parents", "_backward", "requires_grad")

    def __init__(self, data, trainable: bool = False, name: str = "",
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = data
        self.grad = None
        self.trainable = trainable
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self.requires_grad = trainable or _backward is not None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        tag = " trainable" if self.trainable else ""
        return f"Tensor({self.name or '?'}, shape={self.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # intermediate buffers are not needed once propagated
                if not node.trainable:
                    node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def tensor(data, name: str = "") -> Tensor:
    return Tensor(np.asarray(data, dtype=_dtype), name=name)


def parameter(data, name: str = "", trainable: bool = True) -> Tensor:
    return Tensor(np.asarray(data, dtype=_dtype), trainable=trainable, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


_recording = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation passes)."""
    global _recording
    saved = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = saved


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _recording and any(p.requires_grad for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _send(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t._accumulate(_unbroadcast(g, t.shape))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _send(a, g)
        _send(b, g)
    return _node(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _send(a, g * b.data)
        _send(b, g * a.data)
    return _node(a.data * b.data, (a, b), backward)


def _gelu_derivative(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    out = xd * 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))

    def backward(g):
        _send(x, g * _gelu_derivative(xd))
    return _node(out.astype(xd.dtype, copy=False), (x,), backward)


# ---------------------------------------------------------------- structural

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _send(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _send(b, np.swapaxes(a.data, -1, -2) @ g)
    return _node(a.data @ b.data, (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _send(x, np.transpose(g, inverse))
    return _node(np.transpose(x.data, axes), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        _send(x, g.reshape(x.shape))
    return _node(x.data.reshape(shape), (x,), backward)


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _send(x, full)
    return _node(x.data[idx], (x,), backward)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _send(x, np.broadcast_to(g, x.shape))
    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def tile_channels(y: Tensor, n: int, axis: int = -2) -> Tensor:
    """Stack ``n`` copies of ``y`` along ``axis``; channel c of the result is ``y[c mod C]``."""
    if n < 1:
        raise ConfigError(f"tile factor must be >= 1, got {n}")
    if n == 1:
        return y
    reps = [1] * y.data.ndim
    reps[axis] = n

    def backward(g):
        ax = axis % g.ndim
        parts = np.split(g, n, axis=ax)
        _send(y, np.sum(parts, axis=0))
    return _node(np.tile(y.data, reps), (y,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _send(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))
    return _node(s, (x,), backward)


# ---------------------------------------------------------------- layers

def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid 1-D convolution; ``x`` is ``[C_in, L]`` or ``[B, C_in, L]``."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    c_out, c_in, k = weight.shape
    if x.shape[-2] != c_in:
        raise DimensionError(f"conv1d expects {c_in} input channels, got {x.shape[-2]}")
    length = x.shape[-1]
    if k > length:
        raise EmptyOutputError(f"kernel {k} longer than input length {length}")
    l_out = (length - k) // stride + 1
    # [..., C_in, L_out, K]
    windows = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=-1)[..., ::stride, :]
    out = np.einsum("...ctk,ock->...ot", windows, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if weight.requires_grad:
            _send(weight, np.einsum("...ot,...ctk->ock", g, windows, optimize=True))
        if bias is not None and bias.requires_grad:
            _send(bias, g.sum(axis=tuple(range(g.ndim - 2))).sum(axis=-1))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            # [..., C_in, L_out, K]
            contrib = np.einsum("...ot,ock->...ctk", g, weight.data, optimize=True)
            span = stride * (l_out - 1) + 1
            for j in range(k):
                gx[..., j:j + span:stride] += contrib[..., j]
            _send(x, gx)
    return _node(out, parents, backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    c = x.shape[-1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"layer_norm over {c} channels got gain {gain.shape}, shift {shift.shape}")
    if eps <= 0:
        raise ConfigError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def backward(g):
        if gain.requires_grad:
            _send(gain, (g * xhat).reshape(-1, c).sum(axis=0))
        if shift.requires_grad:
            _send(shift, g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _send(x, gx)
    return _node(out, (x, gain, shift), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map along the last axis, ``x @ w + b`` with ``w`` of shape ``[D_in, D_out]``."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear expects last dim {w.shape[0]}, got {x.shape}")
    y = matmul(x, w)
    return y if b is None else add(y, b)


def multi_head_self_attention(x: Tensor, params: dict, n_heads: int) -> Tensor:
    """Bidirectional scaled dot-product attention over ``x`` of shape ``[..., T, H]``.

    ``params`` holds ``q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b``; each weight is
    ``[H, H]`` with head h owning columns ``h*d:(h+1)*d``.
    """
    hidden = x.shape[-1]
    if hidden % n_heads:
        raise ConfigError(f"hidden size {hidden} not divisible by {n_heads} heads")
    d = hidden // n_heads
    t = x.shape[-2]
    lead = x.shape[:-2]

    def split(z):
        z = reshape(z, (*lead, t, n_heads, d))
        nd = z.data.ndim
        return transpose(z, (*range(nd - 3), nd - 2, nd - 3, nd - 1))

    q = split(linear(x, params["q_w"], params["q_b"]))
    k = split(linear(x, params["k_w"], params["k_b"]))
    v = split(linear(x, params["v_w"], params["v_b"]))
    nd = q.data.ndim
    kt = transpose(k, (*range(nd - 2), nd - 1, nd - 2))
    scores = mul(matmul(q, kt), 1.0 / math.sqrt(d))
    ctx = matmul(softmax(scores, axis=-1), v)
    ctx = transpose(ctx, (*range(nd - 3), nd - 2, nd - 3, nd - 1))
    ctx = reshape(ctx, (*lead, t, hidden))
    return linear(ctx, params["o_w"], params["o_b"])


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy; ``logits`` is ``[K]`` with an int label or ``[B, K]`` with ``B`` labels."""
    z = logits.data
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = z2.shape[-1]
    if lab.shape[0] != z2.shape[0]:
        raise DimensionError(f"{z2.shape[0]} logit rows but {lab.shape[0]} labels")
    if np.any(lab < 0) or np.any(lab >= k):
        raise IndexError(f"label out of range for {k} classes: {lab}")
    m = z2.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z2 - m).sum(axis=-1))
    rows = np.arange(z2.shape[0])
    loss = (lse - z2[rows, lab]).mean()

    def backward(g):
        p = np.exp(z2 - lse[:, None])
        p[rows, lab] -= 1.0
        p *= g / z2.shape[0]
        _send(logits, p[0] if single else p)
    return _node(np.asarray(loss, dtype=z.dtype), (logits,), backward)


# ---------------------------------------------------------------- verification

def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
               names: Sequence[str] | None = None, return_worst: bool = False):
    """Compare reverse-mode gradients of the scalar ``fn()`` with central differences.

    Returns the max over all parameter entries of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    params = list(params)
    names = list(names) if names is not None else [p.name or f"param[{i}]" for i, p in enumerate(params)]
    for p in params:
        if p.data.dtype != np.float64:
            raise NumericError(f"grad_check requires float64 tensors; {p.name} is {p.data.dtype}")
        p.zero_grad()
    fn().backward()
    worst, worst_name = 0.0, None
    for p, pname in zip(params, names):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"non-finite analytic gradient in {pname}")
        flat = p.data.reshape(-1)
        an = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn().data)
            flat[i] = orig - eps
            f_minus = float(fn().data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2 * eps)
            if not math.isfinite(num):
                raise NumericError(f"non-finite numeric gradient in {pname}[{i}]")
            err = abs(an[i] - num) / max(1.0, abs(an[i]), abs(num))
            if worst_name is None or err > worst:
                worst, worst_name = err, f"{pname}[{i}]"
        p.zero_grad()
    return (worst, worst_name) if return_worst else worst
