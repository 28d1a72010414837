"""Dense tensor math with a small reverse-mode tape.

Everything here operates on numpy arrays. ``Tensor`` wraps an array together
with the bookkeeping needed by :class:`GradTape`; operations record a backward
closure on the active tape only when one of their inputs requires a gradient,
so inference paths pay nothing for the machinery.

The op set is deliberately narrow: it covers what the patch-transformer
denoiser needs (affine maps with optional low-rank adapters, layer norm,
multi-head attention, pointwise nonlinearities, residual adds and an MSE
loss) and nothing else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ConfigurationError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy() if g.base is not None else g
        else:
            self.grad = self.grad + g


@dataclass
class GradTape:
    """Ordered record of the ops executed while the tape is active."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


_TAPES: list[GradTape] = []


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts):
    return bool(_TAPES) and any(t is not None and t.requires_grad for t in ts)


def _record(out, backward):
    out.requires_grad = True
    out._backward = backward
    _TAPES[-1].nodes.append(out)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and structural ops
# --------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    if not _needs_grad(a, b):
        return out

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _record(out, backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    if not _needs_grad(a, b):
        return out

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _record(out, backward)


def silu(x):
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * sig)
    if not _needs_grad(x):
        return out

    def backward():
        x._accum(out.grad * (sig * (1.0 + x.data * (1.0 - sig))))

    return _record(out, backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh approximation of GELU."""
    x = _as_tensor(x)
    xd = x.data
    x2 = xd * xd  # float32 ** is very slow in numpy
    inner = _GELU_C * (xd + 0.044715 * x2 * xd)
    th = np.tanh(inner)
    out = Tensor(0.5 * xd * (1.0 + th))
    if not _needs_grad(x):
        return out

    def backward():
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner
        x._accum(out.grad * d)

    return _record(out, backward)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    out = Tensor(x.data * mask)
    if not _needs_grad(x):
        return out

    def backward():
        x._accum(out.grad * mask)

    return _record(out, backward)


def concat(ts, axis):
    ts = [_as_tensor(t) for t in ts]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    if not _needs_grad(*ts):
        return out
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward():
        g = out.grad
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _record(out, backward)


def take(x, index):
    """Basic (slice) indexing, differentiable."""
    x = _as_tensor(x)
    out = Tensor(x.data[index])
    if not _needs_grad(x):
        return out

    def backward():
        g = np.zeros_like(x.data)
        g[index] = out.grad
        x._accum(g)

    return _record(out, backward)


def reshape(x, shape):
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    if not _needs_grad(x):
        return out

    def backward():
        x._accum(out.grad.reshape(x.shape))

    return _record(out, backward)


def mse(pred, target):
    """Mean squared error against a constant target; returns a scalar tensor."""
    pred = _as_tensor(pred)
    diff = pred.data - np.asarray(target, dtype=pred.dtype)
    out = Tensor(np.asarray(np.mean(diff * diff), dtype=pred.dtype))
    if not _needs_grad(pred):
        return out

    def backward():
        pred._accum(out.grad * (2.0 / diff.size) * diff)

    return _record(out, backward)


# --------------------------------------------------------------------------
# affine maps, normalisation, attention
# --------------------------------------------------------------------------


@dataclass
class LoraAdapter:
    """Low-rank update ``(alpha / rank) * B @ A`` for a base weight ``target``.

    ``B`` has shape ``(d_in, rank)`` and starts at zero, ``A`` has shape
    ``(rank, d_out)``.
    """

    target: str
    A: Tensor
    B: Tensor
    rank: int
    alpha: float

    @property
    def scale(self):
        return self.alpha / self.rank

    @classmethod
    def init(cls, target, d_in, d_out, rank, alpha, rng, dtype=np.float32):
        if rank < 1 or rank > min(d_in, d_out):
            raise ConfigurationError(
                f"lora rank {rank} invalid for {target} ({d_in}x{d_out})"
            )
        a = rng.standard_normal((rank, d_out)) / math.sqrt(d_out)
        return cls(
            target=target,
            A=Tensor(a.astype(dtype), requires_grad=True, name=f"{target}.lora_A"),
            B=Tensor(np.zeros((d_in, rank), dtype=dtype), requires_grad=True,
                     name=f"{target}.lora_B"),
            rank=rank,
            alpha=float(alpha),
        )

    def delta(self):
        return np.asarray(self.scale, dtype=self.B.dtype) * (self.B.data @ self.A.data)


def effective_weight(w, adapter=None):
    """Return ``W + (alpha/r) B A`` as a tensor (``w`` itself without adapter)."""
    w = _as_tensor(w)
    if adapter is None:
        return w
    A, B = adapter.A, adapter.B
    scale = np.asarray(adapter.scale, dtype=B.dtype)
    out = Tensor(w.data + scale * (B.data @ A.data))
    if not _needs_grad(w, A, B):
        return out

    def backward():
        g = out.grad
        if w.requires_grad:
            w._accum(g)
        if B.requires_grad:
            B._accum(scale * (g @ A.data.T))
        if A.requires_grad:
            A._accum(scale * (B.data.T @ g))

    return _record(out, backward)


def linear(x, w, b=None, adapter=None):
    """``x @ W (+ b)`` over the last axis; ``W`` is ``(d_in, d_out)``."""
    x = _as_tensor(x)
    w = effective_weight(w, adapter)
    b = None if b is None else _as_tensor(b)
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    if not _needs_grad(x, w, b):
        return out

    def backward():
        g = out.grad
        if w.requires_grad:
            w._accum(x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        if b is not None and b.requires_grad:
            b._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            x._accum(g @ w.data.T)

    return _record(out, backward)


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    if not _needs_grad(x, gain, bias):
        return out

    def backward():
        g = out.grad
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            n = x.shape[-1]
            dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
            x._accum(dx)

    return _record(out, backward)


def _split_heads(a, heads):
    *lead, n, d = a.shape
    return a.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(a):
    *lead, h, n, dh = a.shape
    return a.swapaxes(-2, -3).reshape(*lead, n, h * dh)


def softmax(scores):
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def _attention_kernel(q, k, v, heads):
    dh = q.shape[-1] // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scale = np.asarray(1.0 / math.sqrt(dh), dtype=q.dtype)
    probs = softmax((qh @ kh.swapaxes(-1, -2)) * scale)
    return _merge_heads(probs @ vh), probs, (qh, kh, vh, scale)


def attention(q, k, v, heads):
    """Multi-head scaled dot-product attention on ``(..., n, d)`` tensors.

    Heads are contiguous blocks of the feature axis.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    o, probs, (qh, kh, vh, scale) = _attention_kernel(q.data, k.data, v.data, heads)
    out = Tensor(o)
    if not _needs_grad(q, k, v):
        return out

    def backward():
        go = _split_heads(out.grad, heads)
        if v.requires_grad:
            v._accum(_merge_heads(probs.swapaxes(-1, -2) @ go))
        if q.requires_grad or k.requires_grad:
            gp = go @ vh.swapaxes(-1, -2)
            gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True)) * scale
            if q.requires_grad:
                q._accum(_merge_heads(gs @ kh))
            if k.requires_grad:
                k._accum(_merge_heads(gs.swapaxes(-1, -2) @ qh))

    return _record(out, backward)


# --------------------------------------------------------------------------
# public array-level entry points
# --------------------------------------------------------------------------


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite value in input")


def attention_forward(Q, K, V, heads=1):
    """Attention on plain arrays: ``softmax(Q K^T / sqrt(d_head)) V`` per head."""
    Q, K, V = (np.asarray(a) for a in (Q, K, V))
    if Q.ndim < 2 or K.ndim < 2 or V.ndim < 2:
        raise DimensionError("attention expects at least 2-d inputs")
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    if K.shape[-2] < 1:
        raise DimensionError("need at least one key")
    if heads < 1 or Q.shape[-1] % heads or V.shape[-1] % heads:
        raise DimensionError(f"feature dims not divisible by {heads} heads")
    _check_finite(Q, K, V)
    return _attention_kernel(Q, K, V, heads)[0]


def lora_linear_forward(x, weights, base, adapter=None):
    """``x @ (W + (alpha/r) B A)`` where ``W = weights[base]``."""
    W = np.asarray(weights[base])
    if adapter is None:
        return np.asarray(x) @ W
    if adapter.target != base:
        raise ConfigurationError(f"adapter targets {adapter.target!r}, not {base!r}")
    d_in, d_out = W.shape
    if adapter.rank > min(d_in, d_out):
        raise ConfigurationError(f"rank {adapter.rank} exceeds min({d_in}, {d_out})")
    return np.asarray(x) @ effective_weight(W, adapter).data


def backward(tape, loss, params=None):
    """Run the tape in reverse from scalar ``loss``.

    Returns ``{name: grad}`` for every trainable leaf in ``params`` (a mapping
    of name -> Tensor). Frozen tensors never appear in the result.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    for node in tape.nodes:
        node.grad = None
    if params is not None:
        for p in params.values():
            p.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward()
    if params is None:
        return {}
    grads = {}
    for name, p in params.items():
        if p.requires_grad:
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return grads


def _arr(p):
    return p.data if isinstance(p, Tensor) else np.asarray(p)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(
            m={k: np.zeros_like(_arr(p)) for k, p in params.items()},
            v={k: np.zeros_like(_arr(p)) for k, p in params.items()},
        )


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params`` (name -> array or Tensor)."""
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        p = _arr(params[name])
        if name not in state.m or state.m[name].shape != p.shape:
            raise DimensionError(f"optimizer state mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p -= step.astype(p.dtype, copy=False)
    return params, state
