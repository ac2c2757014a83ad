"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A ``Node`` wraps a value array and, when any input requires gradients, a
closure that routes the upstream gradient to its parents. ``backward`` on a
scalar root walks the graph once in reverse topological order and
accumulates into ``node.grad``; grads are summed across calls, so callers
zero them between steps. Graphs are per-sample and rebuilt every forward.

The op set is exactly what the gated CNN needs: elementwise arithmetic with
numpy-style broadcasting, matrix products, the activations, direct
convolution, pooling, the classification loss, and the pairwise-distance /
normalization chain of the attention gate.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor_ops
from .tensor_ops import ShapeMismatchError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Skip graph construction inside the block (inference-only forwards)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Node:
    """One value in the computation graph, with its accumulated gradient.

    ``grad`` always matches ``value`` in shape; its storage is allocated on
    first touch so inference-only nodes never pay for it.
    """

    __slots__ = ("value", "_grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Node, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, new: np.ndarray) -> None:
        self._grad = new

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, as_node(other))

    def __radd__(self, other):
        return add(as_node(other), self)

    def __sub__(self, other):
        return sub(self, as_node(other))

    def __rsub__(self, other):
        return sub(as_node(other), self)

    def __mul__(self, other):
        return mul(self, as_node(other))

    def __rmul__(self, other):
        return mul(as_node(other), self)

    def __truediv__(self, other):
        return div(self, as_node(other))

    def __rtruediv__(self, other):
        return div(as_node(other), self)

    def __neg__(self):
        return mul(self, as_node(-1.0))


def as_node(x) -> Node:
    """Wrap a value as a constant Node; Nodes pass through unchanged."""
    return x if isinstance(x, Node) else Node(x)


def parameter(value, rng: np.random.Generator | None = None) -> Node:
    """A trainable Node (requires_grad set)."""
    del rng  # reserved for future init helpers; keeps call sites uniform
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def _make(value, parents: tuple[Node, ...], backward_fn) -> Node:
    out = Node(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into every reachable requires_grad node.

    ``root`` must be scalar-valued. Traversal order is deterministic, so two
    backward passes with grads zeroed in between produce identical grads.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    topo: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    root.grad = root.grad + np.ones_like(root.value)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


def zero_grad(params: Sequence[Node]) -> None:
    for p in params:
        p._grad = None


def detach(x: Node) -> Node:
    """A constant copy of ``x``; gradients stop here."""
    return Node(np.array(x.value))


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Node, b: Node) -> Node:
    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.value.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.value.shape)

    return _make(a.value + b.value, (a, b), bwd)


def sub(a: Node, b: Node) -> Node:
    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.value.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(-g, b.value.shape)

    return _make(a.value - b.value, (a, b), bwd)


def mul(a: Node, b: Node) -> Node:
    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.value, a.value.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.value, b.value.shape)

    return _make(a.value * b.value, (a, b), bwd)


def div(a: Node, b: Node) -> Node:
    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g / b.value, a.value.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)

    return _make(a.value / b.value, (a, b), bwd)


def exp(x: Node) -> Node:
    out_value = np.exp(x.value)

    def bwd(g):
        if x.requires_grad:
            x.grad += g * out_value

    return _make(out_value, (x,), bwd)


def sqrt(x: Node, guard: float = 0.0) -> Node:
    """sqrt(x + guard); the guard keeps the derivative finite at x == 0."""
    out_value = np.sqrt(x.value + guard)

    def bwd(g):
        if x.requires_grad:
            x.grad += g * 0.5 / out_value

    return _make(out_value, (x,), bwd)


def nsum(x: Node) -> Node:
    def bwd(g):
        if x.requires_grad:
            x.grad += g

    return _make(np.asarray(x.value.sum()), (x,), bwd)


def nmean(x: Node) -> Node:
    size = x.value.size

    def bwd(g):
        if x.requires_grad:
            x.grad += g / size

    return _make(np.asarray(x.value.mean()), (x,), bwd)


def reshape(x: Node, shape) -> Node:
    def bwd(g):
        if x.requires_grad:
            x.grad += g.reshape(x.value.shape)

    return _make(x.value.reshape(shape), (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Node, b: Node) -> Node:
    """2D @ 2D or 2D @ 1D product."""
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise ShapeMismatchError(f"cannot multiply {av.shape} by {bv.shape}")

    if bv.ndim == 1:

        def bwd(g):
            if a.requires_grad:
                a.grad += np.outer(g, bv)
            if b.requires_grad:
                b.grad += av.T @ g

        return _make(av @ bv, (a, b), bwd)

    def bwd2(g):
        if a.requires_grad:
            a.grad += g @ bv.T
        if b.requires_grad:
            b.grad += av.T @ g

    return _make(av @ bv, (a, b), bwd2)


def linear(x: Node, weight: Node, bias: Node) -> Node:
    """Affine map: weight @ x + bias for a length-n input and m x n weight."""
    wv, xv, bv = weight.value, x.value, bias.value
    if xv.ndim != 1 or wv.ndim != 2 or wv.shape[1] != xv.shape[0] or bv.shape != (wv.shape[0],):
        raise ShapeMismatchError(
            f"linear shapes inconsistent: weight {wv.shape}, input {xv.shape}, bias {bv.shape}"
        )

    def bwd(g):
        if weight.requires_grad:
            weight.grad += np.outer(g, xv)
        if x.requires_grad:
            x.grad += wv.T @ g
        if bias.requires_grad:
            bias.grad += g

    return _make(wv @ xv + bv, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# activations


def relu(x: Node) -> Node:
    mask = x.value > 0  # subgradient at 0 is 0

    def bwd(g):
        if x.requires_grad:
            x.grad += g * mask

    return _make(np.maximum(x.value, 0.0), (x,), bwd)


def sigmoid(x: Node) -> Node:
    v = x.value
    out_value = np.empty_like(v)
    pos = v >= 0
    out_value[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out_value[~pos] = ev / (1.0 + ev)

    def bwd(g):
        if x.requires_grad:
            x.grad += g * out_value * (1.0 - out_value)

    return _make(out_value, (x,), bwd)


# ---------------------------------------------------------------------------
# structured ops


def global_avg_pool(f: Node) -> Node:
    """Per-channel spatial mean: C x H x W -> C."""
    if f.value.ndim != 3:
        raise ShapeMismatchError(f"expected C x H x W, got {f.value.shape}")
    _, h, w = f.value.shape

    def bwd(g):
        if f.requires_grad:
            f.grad += g[:, None, None] / (h * w)

    return _make(f.value.mean(axis=(1, 2)), (f,), bwd)


def scale_channels(f: Node, p: Node) -> Node:
    """Per-channel gate: out[c,h,w] = p[c] * f[c,h,w]; grads flow to both."""
    out_value = tensor_ops.broadcast_mul_channels(f.value, p.value)

    def bwd(g):
        if f.requires_grad:
            f.grad += p.value[:, None, None] * g
        if p.requires_grad:
            p.grad += (g * f.value).sum(axis=(1, 2))

    return _make(out_value, (f, p), bwd)


def pairwise_sq_dist(rows: Node) -> Node:
    """Differentiable pairwise squared distances between matrix rows."""
    out_value = tensor_ops.pairwise_sq_dist(rows.value)
    rv = rows.value

    def bwd(g):
        if rows.requires_grad:
            h = g + g.T
            rows.grad += 2.0 * (h.sum(axis=1)[:, None] * rv - h @ rv)

    return _make(out_value, (rows,), bwd)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    cols = np.empty((c, k, k, h_out, w_out))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
    return cols.reshape(c * k * k, h_out * w_out), h_out, w_out


def _col2im(cols: np.ndarray, c: int, h: int, w: int, k: int, stride: int, pad: int, h_out: int, w_out: int):
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    cols = cols.reshape(c, k, k, h_out, w_out)
    for i in range(k):
        for j in range(k):
            xp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += cols[:, i, j]
    if pad:
        return xp[:, pad : pad + h, pad : pad + w]
    return xp


def conv2d(x: Node, kernels: Node, stride: int = 1, pad: int = 0) -> Node:
    """Direct 2D cross-correlation: C_in x H x W with C_out x C_in x k x k kernels."""
    xv, kv = x.value, kernels.value
    if xv.ndim != 3 or kv.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects C_in x H x W input and C_out x C_in x k x k kernels, "
            f"got {xv.shape} and {kv.shape}"
        )
    c_out, c_in, k, k2 = kv.shape
    if k != k2:
        raise ShapeMismatchError(f"kernels must be square, got {k} x {k2}")
    if c_in != xv.shape[0]:
        raise ShapeMismatchError(
            f"kernel input channels ({c_in}) do not match input channels ({xv.shape[0]})"
        )
    c, h, w = xv.shape
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeMismatchError(
            f"kernel size {k} exceeds padded input extent ({h + 2 * pad} x {w + 2 * pad})"
        )
    cols, h_out, w_out = _im2col(xv, k, stride, pad)
    w_mat = kv.reshape(c_out, c_in * k * k)
    out_value = (w_mat @ cols).reshape(c_out, h_out, w_out)

    def bwd(g):
        g_mat = g.reshape(c_out, h_out * w_out)
        if kernels.requires_grad:
            kernels.grad += (g_mat @ cols.T).reshape(kv.shape)
        if x.requires_grad:
            dcols = w_mat.T @ g_mat
            x.grad += _col2im(dcols, c, h, w, k, stride, pad, h_out, w_out)

    return _make(out_value, (x, kernels), bwd)


def softmax_cross_entropy(logits: Node, label: int) -> Node:
    """Cross-entropy of softmax(logits) against an integer label, stably."""
    lv = logits.value
    if lv.ndim != 1:
        raise ShapeMismatchError(f"logits must be a vector, got {lv.shape}")
    if not 0 <= label < lv.size:
        raise IndexError(f"label {label} out of range for {lv.size} classes")
    shifted = lv - lv.max()
    log_z = np.log(np.exp(shifted).sum())
    probs = np.exp(shifted - log_z)
    loss = log_z - shifted[label]

    def bwd(g):
        if logits.requires_grad:
            delta = probs.copy()
            delta[label] -= 1.0
            logits.grad += g * delta

    return _make(np.asarray(loss), (logits,), bwd)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """SGD with momentum buffers; the update rule is pinned by tests.

    Per parameter: g <- grad + weight_decay * param; buf <- momentum * buf + g;
    the applied update is g + momentum * buf when nesterov, else buf.
    """

    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True
    buffers: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """One in-place SGD update over aligned parameter/gradient arrays."""
    if len(params) != len(grads):
        raise ShapeMismatchError("params and grads differ in length")
    if not state.buffers:
        state.buffers = [np.zeros_like(p) for p in params]
    for p, g, buf in zip(params, grads, state.buffers):
        if p.shape != g.shape or p.shape != buf.shape:
            raise ShapeMismatchError(
                f"parameter/gradient/buffer shapes differ: {p.shape}, {g.shape}, {buf.shape}"
            )
        step_dir = g + state.weight_decay * p
        buf *= state.momentum
        buf += step_dir
        if state.nesterov:
            update = step_dir + state.momentum * buf
        else:
            update = buf
        p -= state.lr * update


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of comparing analytic gradients with central differences."""

    max_rel_error: float
    worst_param: int
    worst_index: int
    n_checked: int
    excluded: tuple[tuple[int, int], ...]

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def finite_diff_gradcheck(
    fn: Callable[[list[Node]], Node],
    point: Sequence[np.ndarray],
    h: float = 1e-5,
    kink_tol: float = 0.1,
) -> GradCheckReport:
    """Check analytic gradients of a scalar-valued graph builder.

    ``fn`` receives freshly wrapped parameter Nodes and must return a scalar
    Node. Every coordinate is probed with central differences at step ``h``.
    Coordinates where the one-sided derivatives disagree by more than
    ``kink_tol`` (relative) sit on a non-smooth point (e.g. a relu kink) and
    are reported as excluded rather than failed. Relative error uses
    max(|analytic|, |numeric|, 1e-3) in the denominator.
    """
    point = [np.asarray(p, dtype=np.float64) for p in point]

    def eval_at(arrays: list[np.ndarray]) -> float:
        nodes = [Node(a.copy(), requires_grad=True) for a in arrays]
        out = fn(nodes)
        val = float(out.value)
        if not np.isfinite(val):
            raise FloatingPointError("non-finite function value at probe point")
        return val

    nodes = [Node(p.copy(), requires_grad=True) for p in point]
    loss = fn(nodes)
    if loss.value.size != 1:
        raise ValueError("gradcheck target must be scalar-valued")
    backward(loss)
    analytic = [n.grad.copy() for n in nodes]
    f0 = float(loss.value)
    if not np.isfinite(f0):
        raise FloatingPointError("non-finite function value at the base point")

    max_rel = 0.0
    worst = (0, 0)
    n_checked = 0
    excluded: list[tuple[int, int]] = []
    for pi, base in enumerate(point):
        flat = base.reshape(-1)
        for ci in range(flat.size):
            probe = [p.copy() for p in point]
            probe[pi].reshape(-1)[ci] = flat[ci] + h
            f_plus = eval_at(probe)
            probe[pi].reshape(-1)[ci] = flat[ci] - h
            f_minus = eval_at(probe)
            d_plus = (f_plus - f0) / h
            d_minus = (f0 - f_minus) / h
            if abs(d_plus - d_minus) > kink_tol * (abs(d_plus) + abs(d_minus) + 1.0):
                excluded.append((pi, ci))
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[pi].reshape(-1)[ci])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (pi, ci)
    return GradCheckReport(max_rel, worst[0], worst[1], n_checked, tuple(excluded))
