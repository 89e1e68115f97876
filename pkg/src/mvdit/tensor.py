"""Minimal dense-tensor library with reverse-mode automatic differentiation.

NumPy-backed. Tensors are immutable values; every differentiable primitive
records its parents and a backward closure, so `backward` can walk the tape
in reverse topological order. float32 is the training dtype, float64 the
verification dtype for gradient checks.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import math
from typing import Callable, Optional, Sequence

import numpy as np


def _tune_allocator() -> None:
    """Keep large freed buffers in the glibc heap for reuse.

    The workload allocates and frees many multi-megabyte arrays per step;
    with default thresholds glibc serves them with mmap/munmap and every
    reuse pays page-fault cost. Best effort: silently skipped off glibc.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6",
                           use_errno=True)
        m_trim_threshold, m_mmap_threshold = -1, -3
        libc.mallopt(m_mmap_threshold, 1 << 30)
        libc.mallopt(m_trim_threshold, 1 << 30)
    except (OSError, AttributeError):
        pass


_tune_allocator()


class ShapeError(ValueError):
    """A primitive received inputs whose shapes do not conform to its rule."""

    def __init__(self, primitive: str, expected: str, actual) -> None:
        super().__init__(f"{primitive}: expected {expected}, got {actual}")
        self.primitive = primitive
        self.expected = expected
        self.actual = actual


class NumericError(ArithmeticError):
    """A primitive produced a non-finite value."""


class Tensor:
    """Immutable dense array plus optional autograd tape node.

    `data` is a row-major numpy array (float32 or float64). When any input
    of a primitive requires grad, the output carries `_parents` and a
    `_backward` closure mapping the output gradient to parent gradients.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op: Optional[str] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self._op})"

    # Operator sugar, all routed through the recorded primitives.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor],
          backward: Optional[Callable]) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op}: non-finite value in output")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; bias-style broadcasting allowed (grad sums back)."""
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", "broadcast-compatible shapes",
                         (a.shape, b.shape))

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; bias-style broadcasting allowed."""
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", "broadcast-compatible shapes",
                         (a.shape, b.shape))

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _make("mul", data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        return (g * s,)

    return _make("scale", a.data * s, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy batch-broadcast semantics."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "(..., m, k) x (..., k, n)",
                         (a.shape, b.shape))
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", data, (a, b), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"shape with {a.size} elements", shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make("reshape", data, (a,), backward)


def permute(a: Tensor, axes: tuple) -> Tensor:
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError("permute", f"permutation of {a.data.ndim} axes", axes)
    inv = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make("permute", np.transpose(a.data, axes), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    shapes = [t.shape for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", "matching shapes off the concat axis", shapes)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make("concat", data, tuple(tensors), backward)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> tuple:
    """Split along `axis` into chunks of the given sizes."""
    if sum(sizes) != a.shape[axis]:
        raise ShapeError("split", f"sizes summing to {a.shape[axis]}", sizes)
    offsets = np.cumsum(sizes)[:-1]
    pieces = np.split(a.data, offsets, axis=axis)
    outs = []
    for i, piece in enumerate(pieces):
        def backward(g, i=i):
            full = [np.zeros(p.shape, dtype=g.dtype) for p in pieces]
            full[i] = g
            return (np.concatenate(full, axis=axis),)

        outs.append(_make("split", piece, (a,), backward))
    return tuple(outs)


def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    # -inf rows would yield nan; guard is the caller's mask contract
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make("softmax_lastdim", y, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (unit affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make("layer_norm", y, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_value(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    return 0.5 * x * (1.0 + t)


def _gelu_slope(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU (tanh recomputed in backward to save memory)."""
    x = a.data

    def backward(g):
        return (g * _gelu_slope(x),)

    return _make("gelu", _gelu_value(x), (a,), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Fused affine map on the last axis: x @ w + b, w of shape (in, out)."""
    if x.shape[-1] != w.shape[0] or w.data.ndim != 2:
        raise ShapeError("linear", f"(..., {w.shape[0]}) @ {w.shape}",
                         (x.shape, w.shape))
    x2 = x.data.reshape(-1, x.shape[-1])
    data = x2 @ w.data
    if b is not None:
        data += b.data
    data = data.reshape(x.shape[:-1] + (w.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make("linear", data, parents, backward)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: Optional[np.ndarray] = None) -> Tensor:
    """Fused softmax(q kᵀ / sqrt(d) [+ mask]) v.

    q: (..., Sq, d), k: (..., Sk, d), v: (..., Sk, dv). `mask` is a constant
    additive array broadcastable to the score shape (..., Sq, Sk).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("scaled_dot_attention", "matching head dims",
                         (q.shape, k.shape))
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("scaled_dot_attention", "matching key/value lengths",
                         (k.shape, v.shape))
    inv_sqrt_d = 1.0 / math.sqrt(q.shape[-1])

    def weights():
        scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * inv_sqrt_d
        if mask is not None:
            scores += mask
        scores -= np.max(scores, axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        return scores

    out = np.matmul(weights(), v.data)

    def backward(g):
        # attention weights are recomputed rather than stored on the tape
        w = weights()
        gv = _unbroadcast(np.matmul(np.swapaxes(w, -1, -2), g), v.shape)
        gw = np.matmul(g, np.swapaxes(v.data, -1, -2))
        dot = (gw * w).sum(axis=-1, keepdims=True)
        gs = w * (gw - dot)
        gq = _unbroadcast(np.matmul(gs, k.data) * inv_sqrt_d, q.shape)
        gk = _unbroadcast(
            np.matmul(np.swapaxes(gs, -1, -2), q.data) * inv_sqrt_d, k.shape)
        return gq, gk, gv

    return _make("scaled_dot_attention", out, (q, k, v), backward)


def modulated_layer_norm(x: Tensor, s: Tensor, sh: Tensor,
                         eps: float = 1e-5) -> Tensor:
    """Fused layer_norm(x) * (1 + s) + sh.

    Stores only the output; the normalization statistics are recomputed in
    backward. `s` and `sh` broadcast against the normalized x.
    """
    def _norm():
        v = x.data
        mu = v.mean(axis=-1, keepdims=True)
        xc = v - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xc *= inv
        return xc, inv

    try:
        y, _ = _norm()
        data = y * (1.0 + s.data) + sh.data
    except ValueError:
        raise ShapeError("modulated_layer_norm",
                         "s/sh broadcastable to x",
                         (x.shape, s.shape, sh.shape))

    def backward(g):
        y2, inv = _norm()
        gl = g * (1.0 + s.data)
        gm = gl.mean(axis=-1, keepdims=True)
        gym = (gl * y2).mean(axis=-1, keepdims=True)
        gx = inv * (gl - gm - y2 * gym)
        return (gx,
                _unbroadcast(g * y2, s.shape),
                _unbroadcast(g, sh.shape))

    return _make("modulated_layer_norm", data, (x, s, sh), backward)


def gated_residual(x: Tensor, branch: Tensor, gate: Tensor) -> Tensor:
    """Fused x + branch * gate (gate broadcasts against branch)."""
    try:
        data = x.data + branch.data * gate.data
    except ValueError:
        raise ShapeError("gated_residual", "broadcast-compatible shapes",
                         (x.shape, branch.shape, gate.shape))
    if data.shape != x.shape:
        raise ShapeError("gated_residual", "branch*gate shaped like x",
                         (x.shape, branch.shape, gate.shape))

    def backward(g):
        return (g,
                _unbroadcast(g * gate.data, branch.shape),
                _unbroadcast(g * branch.data, gate.shape))

    return _make("gated_residual", data, (x, branch, gate), backward)


def mlp_gelu(x: Tensor, w1: Tensor, b1: Tensor,
             w2: Tensor, b2: Tensor) -> Tensor:
    """Fused two-layer MLP: gelu(x @ w1 + b1) @ w2 + b2.

    Only the final output is stored; the hidden activation is recomputed in
    backward.
    """
    if (w1.data.ndim != 2 or w2.data.ndim != 2
            or x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0]):
        raise ShapeError("mlp_gelu", "x(..., d) @ w1(d, h) then w2(h, o)",
                         (x.shape, w1.shape, w2.shape))
    x2 = x.data.reshape(-1, x.shape[-1])

    def _hidden():
        h = x2 @ w1.data
        h += b1.data
        return h

    data = _gelu_value(_hidden()) @ w2.data
    data += b2.data
    data = data.reshape(x.shape[:-1] + (w2.shape[1],))

    def backward(g):
        h = _hidden()
        a = _gelu_value(h)
        g2 = g.reshape(-1, w2.shape[1])
        gw2 = a.T @ g2
        gb2 = g2.sum(axis=0)
        gh = (g2 @ w2.data.T)
        gh *= _gelu_slope(h)
        gx = (gh @ w1.data.T).reshape(x.shape)
        gw1 = x2.T @ gh
        gb1 = gh.sum(axis=0)
        return gx, gw1, gb1, gw2, gb2

    return _make("mlp_gelu", data, (x, w1, b1, w2, b2), backward)


def multihead_attention(x_q: Tensor, x_kv: Tensor,
                        wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
                        wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor,
                        n_heads: int,
                        mask: Optional[np.ndarray] = None) -> Tensor:
    """Fused multi-head attention including the q/k/v/o projections.

    x_q: (..., Sq, D), x_kv: (..., Sk, D) with identical leading axes
    (pass the same tensor twice for self-attention). `mask` is a constant
    additive array broadcastable to the per-head score shape
    (..., n_heads, Sq, Sk). Only the output is kept on the tape; the
    projections and attention weights are recomputed in backward.
    """
    d_attn = wq.shape[1]
    if (wq.data.ndim != 2 or x_q.shape[-1] != wq.shape[0]
            or x_kv.shape[-1] != wk.shape[0] or wk.shape[1] != d_attn
            or wv.shape[0] != wk.shape[0] or wv.shape[1] != wo.shape[0]
            or x_q.shape[:-2] != x_kv.shape[:-2]):
        raise ShapeError("multihead_attention",
                         "conforming projection shapes",
                         (x_q.shape, x_kv.shape, wq.shape, wk.shape,
                          wv.shape, wo.shape))
    if d_attn % n_heads or wv.shape[1] % n_heads:
        raise ShapeError("multihead_attention",
                         f"head count dividing {d_attn} and {wv.shape[1]}",
                         n_heads)
    inv_sqrt_d = 1.0 / math.sqrt(d_attn // n_heads)

    def _project(xd, w, b):
        y = xd.reshape(-1, xd.shape[-1]) @ w.data
        y += b.data
        return y.reshape(xd.shape[:-1] + (w.shape[1],))

    def _split_heads(y):
        s, d = y.shape[-2], y.shape[-1]
        y = y.reshape(y.shape[:-1] + (n_heads, d // n_heads))
        return np.moveaxis(y, -2, -3)

    def _merge_heads(y):
        y = np.moveaxis(y, -3, -2)
        return y.reshape(y.shape[:-2] + (-1,))

    def _qkvw():
        q = _split_heads(_project(x_q.data, wq, bq))
        k = _split_heads(_project(x_kv.data, wk, bk))
        v = _split_heads(_project(x_kv.data, wv, bv))
        scores = np.matmul(q, np.swapaxes(k, -1, -2))
        scores *= inv_sqrt_d
        if mask is not None:
            scores += mask
        scores -= np.max(scores, axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        return q, k, v, scores

    q, k, v, w = _qkvw()
    out = _project(_merge_heads(np.matmul(w, v)), wo, bo)
    del q, k, v, w

    def backward(g):
        q, k, v, w = _qkvw()
        ao = _merge_heads(np.matmul(w, v))
        g2 = g.reshape(-1, wo.shape[1])
        ao2 = ao.reshape(-1, wo.shape[0])
        gwo = ao2.T @ g2
        gbo = g2.sum(axis=0)
        gao = _split_heads((g2 @ wo.data.T).reshape(ao.shape))
        gv = np.matmul(np.swapaxes(w, -1, -2), gao)
        gw = np.matmul(gao, np.swapaxes(v, -1, -2))
        dot = (gw * w).sum(axis=-1, keepdims=True)
        gs = w * (gw - dot)
        gq = np.matmul(gs, k) * inv_sqrt_d
        gk = np.matmul(np.swapaxes(gs, -1, -2), q) * inv_sqrt_d

        def _unproject(gy, xd, w_):
            gy2 = _merge_heads(gy).reshape(-1, w_.shape[1])
            x2 = xd.reshape(-1, xd.shape[-1])
            gx = (gy2 @ w_.data.T).reshape(xd.shape)
            return gx, x2.T @ gy2, gy2.sum(axis=0)

        gxq, gwq, gbq = _unproject(gq, x_q.data, wq)
        gxk, gwk, gbk = _unproject(gk, x_kv.data, wk)
        gxv, gwv, gbv = _unproject(gv, x_kv.data, wv)
        return (gxq, gxk + gxv, gwq, gbq, gwk, gbk, gwv, gbv, gwo, gbo)

    parents = (x_q, x_kv, wq, bq, wk, bk, wv, bv, wo, bo)
    return _make("multihead_attention", out, parents, backward)


def mean(a: Tensor) -> Tensor:
    n = a.size

    def backward(g):
        return (np.full(a.shape, float(g) / n, dtype=a.dtype),)

    return _make("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,), backward)


def sum_sq(a: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * float(g) * a.data,)

    return _make("sum_sq", np.asarray((a.data * a.data).sum(), dtype=a.dtype),
                 (a,), backward)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "reshape": reshape,
    "permute": permute,
    "concat": concat,
    "split": split,
    "softmax_lastdim": softmax_lastdim,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "linear": linear,
    "scaled_dot_attention": scaled_dot_attention,
    "modulated_layer_norm": modulated_layer_norm,
    "gated_residual": gated_residual,
    "mlp_gelu": mlp_gelu,
    "multihead_attention": multihead_attention,
    "mean": mean,
    "sum_sq": sum_sq,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs):
    """Dispatch a recorded primitive by name."""
    if kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive {kind!r}")
    if kind == "concat":
        return concat(inputs, **attrs)
    return _PRIMITIVES[kind](*inputs, **attrs)


# ---------------------------------------------------------------------------
# Backward pass


def _topo_order(loss: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Optional[Sequence[Tensor]] = None,
             free_graph: bool = True) -> dict:
    """Reverse-accumulate d(loss)/d(leaf) for every reachable leaf.

    Returns a dict keyed by the leaf tensors. If `leaves` is given, every
    listed leaf appears in the result, with an exact-zero gradient when it
    does not feed the loss. With `free_graph` (the default) each node's
    recorded closure is released as soon as its parent gradients are
    computed, so activations captured on the tape are freed while the walk
    is still in progress; pass False to keep the graph for reuse.
    """
    if loss.data.ndim != 0:
        raise ShapeError("backward", "scalar loss", loss.shape)
    order = _topo_order(loss)
    grads: dict = {id(loss): np.ones((), dtype=loss.dtype)}
    reached_leaves = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or not node._parents:
            grads[id(node)] = g
            reached_leaves.append(node)
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
        if free_graph:
            node._parents = ()
            node._backward = None
            if node is not loss:
                node.data = None  # interior output; no later node reads it
    result: dict = {}
    for leaf in (leaves if leaves is not None else reached_leaves):
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.dtype)
        result[leaf] = Tensor(g)
    return result


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor,
               step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `point` must be float64; `f` maps a tensor to a scalar Tensor.
    """
    if point.dtype != np.float64:
        raise ValueError("grad_check requires a float64 point")
    x = Tensor(point.data.copy(), requires_grad=True)
    loss = f(x)
    analytic = backward(loss, leaves=[x])[x].data
    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(x.data)).item()
        flat[i] = orig - step
        lo = f(Tensor(x.data)).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2 * step)
    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / (np.abs(a) + np.abs(numeric) + 1e-8)
    return float(rel.max())
