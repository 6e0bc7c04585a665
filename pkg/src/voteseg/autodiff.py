"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is deliberately small: a Tensor wraps an ndarray, every op
records a backward closure, and `backward` walks the graph once in
reverse topological order. Ops are limited to what the segmentation
pipeline needs (affine layers, ReLU, gather/concat plumbing, segment
reductions, and fused loss kernels). Everything is deterministic: ties
in max reductions resolve to the first index, and the only global state
is the `no_grad` switch.
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DiffError(ValueError):
    """Graph construction or shape contract violation."""


class GraphReusedError(DiffError):
    """Raised when backward is invoked twice through the same loss node."""


class EmptyGroupError(DiffError):
    """Max-pooling over zero rows has no defined value."""


class Tensor:
    """Array node in the autodiff graph.

    `data` is the forward value (row-major ndarray), `grad` accumulates
    d(loss)/d(self) after backward. Non-leaf tensors keep parent links
    and a closure that routes their grad into the parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_used")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._used = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Small operator surface; the named module functions are the real API.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def item(self) -> float:
        return float(self.data)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording; forward values only, intermediates freeable."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic / structural ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DiffError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DiffError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward():
        g = out.grad
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    out = _node(out_data, (a, b), backward)
    return out


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, like=a)
    out_data = a.data + b.data

    def backward():
        g = out.grad
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    out = _node(out_data, (a, b), backward)
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, like=a)
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward():
        g = out.grad
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    out = _node(out_data, (a, b), backward)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = a.data * np.asarray(c, dtype=a.data.dtype)

    def backward():
        _acc(a, out.grad * np.asarray(c, dtype=a.data.dtype))

    out = _node(out_data, (a,), backward)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_data = np.where(mask, a.data, a.data.dtype.type(0))

    def backward():
        _acc(a, out.grad * mask)

    out = _node(out_data, (a,), backward)
    return out


def square(a: Tensor) -> Tensor:
    out_data = a.data * a.data

    def backward():
        _acc(a, out.grad * (2.0 * a.data))

    out = _node(out_data, (a,), backward)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    datas = [p.data for p in parts]
    out_data = np.concatenate(datas, axis=1)
    splits = np.cumsum([d.shape[1] for d in datas])[:-1]

    def backward():
        gs = np.split(out.grad, splits, axis=1)
        for p, g in zip(parts, gs):
            _acc(p, g)

    out = _node(out_data, tuple(parts), backward)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    datas = [p.data for p in parts]
    out_data = np.concatenate(datas, axis=0)
    splits = np.cumsum([d.shape[0] for d in datas])[:-1]

    def backward():
        gs = np.split(out.grad, splits, axis=0)
        for p, g in zip(parts, gs):
            _acc(p, g)

    out = _node(out_data, tuple(parts), backward)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward():
        _acc(a, out.grad.reshape(a.data.shape))

    out = _node(out_data, (a,), backward)
    return out


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    out_data = a.data[:, j0:j1].copy()

    def backward():
        g = np.zeros_like(a.data)
        g[:, j0:j1] = out.grad
        _acc(a, g)

    out = _node(out_data, (a,), backward)
    return out


def slice_rows(a: Tensor, i0: int, i1: int) -> Tensor:
    out_data = a.data[i0:i1].copy()

    def backward():
        g = np.zeros_like(a.data)
        g[i0:i1] = out.grad
        _acc(a, g)

    out = _node(out_data, (a,), backward)
    return out


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out_data = a.data[idx]

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        _acc(a, g)

    out = _node(out_data, (a,), backward)
    return out


class ScatterPlan:
    """Precomputed reduction layout for repeated scatter-adds over one index array.

    Replaces `np.add.at` (slow element-wise fallback) with a stable sort done
    once plus `add.reduceat` per use; worthwhile when the same index array
    drives many backward passes, as in a multi-layer graph stack.
    """

    def __init__(self, index: np.ndarray, n_rows: int):
        index = np.asarray(index, dtype=np.int64)
        if index.size and (index.min() < 0 or index.max() >= n_rows):
            raise DiffError("scatter index out of range")
        self.index = index
        self.n_rows = int(n_rows)
        self.order = np.argsort(index, kind="stable")
        compact = index[self.order]
        change = np.flatnonzero(np.diff(compact)) + 1
        self.starts = np.concatenate([[0], change]) if compact.size else np.empty(0, np.int64)
        self.rows = compact[self.starts] if compact.size else np.empty(0, np.int64)

    def sum(self, values: np.ndarray) -> np.ndarray:
        """Rows of `values` summed into their target rows; (E, D) -> (n_rows, D)."""
        out = np.zeros((self.n_rows, values.shape[1]), dtype=values.dtype)
        if self.index.size:
            out[self.rows] = np.add.reduceat(values[self.order], self.starts, axis=0)
        return out


def edge_combine(u: Tensor, v: Tensor, src_plan: ScatterPlan,
                 dst_plan: ScatterPlan) -> Tensor:
    """Per-edge combination u[src] - v[src] + v[dst] in one graph node."""
    if u.data.shape != v.data.shape:
        raise DiffError(f"edge_combine shapes differ: {u.data.shape} vs {v.data.shape}")
    if src_plan.index.shape != dst_plan.index.shape:
        raise DiffError("edge endpoint arrays differ in length")
    if src_plan.n_rows != u.data.shape[0] or dst_plan.n_rows != u.data.shape[0]:
        raise DiffError("scatter plans do not match the node count")
    src, dst = src_plan.index, dst_plan.index
    out_data = u.data[src] - v.data[src] + v.data[dst]

    def backward():
        g_src = src_plan.sum(out.grad)
        _acc(u, g_src)
        _acc(v, dst_plan.sum(out.grad) - g_src)

    out = _node(out_data, (u, v), backward)
    return out


def max_rows(a: Tensor) -> Tensor:
    """Channel-wise max over axis 0 of an (n, d) tensor; ties go to the first row."""
    if a.data.ndim != 2 or a.data.shape[0] == 0:
        raise EmptyGroupError(f"max_rows needs a non-empty (n, d) input, got shape {a.data.shape}")
    win = np.argmax(a.data, axis=0)
    out_data = a.data[win, np.arange(a.data.shape[1])]

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, (win, np.arange(a.data.shape[1])), out.grad)
        _acc(a, g)

    out = _node(out_data, (a,), backward)
    return out


def _segment_bounds(starts: np.ndarray, n_rows: int) -> np.ndarray:
    starts = np.asarray(starts, dtype=np.int64)
    if starts.ndim != 1 or starts.size == 0 or starts[0] != 0:
        raise DiffError("segment starts must be a non-empty 1-d array beginning at 0")
    ends = np.append(starts[1:], n_rows)
    if np.any(ends <= starts):
        raise DiffError("empty segment in segment reduction")
    return ends


def segment_max(a: Tensor, starts: np.ndarray) -> Tensor:
    """Per-segment channel max over contiguous row blocks.

    `starts[s]` is the first row of segment s; segments must be
    non-empty and cover all rows. Ties resolve to the lowest row index.
    """
    x = a.data
    starts = np.asarray(starts, dtype=np.int64)
    _segment_bounds(starts, x.shape[0])
    maxes = np.maximum.reduceat(x, starts, axis=0)
    seg_of_row = np.repeat(np.arange(starts.size), np.diff(np.append(starts, x.shape[0])))
    # first row achieving the max, per (segment, channel)
    row_ids = np.arange(x.shape[0], dtype=np.int64)[:, None]
    cand = np.where(x == maxes[seg_of_row], row_ids, x.shape[0])
    winners = np.minimum.reduceat(cand, starts, axis=0)

    def backward():
        g = np.zeros_like(x)
        cols = np.tile(np.arange(x.shape[1]), starts.size)
        np.add.at(g, (winners.ravel(), cols), out.grad.ravel())
        _acc(a, g)

    out = _node(maxes, (a,), backward)
    return out


def segment_mean(a: Tensor, starts: np.ndarray) -> Tensor:
    """Per-segment mean over contiguous row blocks (1-d or 2-d input)."""
    x = a.data
    starts = np.asarray(starts, dtype=np.int64)
    _segment_bounds(starts, x.shape[0])
    counts = np.diff(np.append(starts, x.shape[0])).astype(x.dtype)
    sums = np.add.reduceat(x, starts, axis=0)
    shape = (-1,) + (1,) * (x.ndim - 1)
    out_data = sums / counts.reshape(shape)
    seg_of_row = np.repeat(np.arange(starts.size), counts.astype(np.int64))

    def backward():
        g = out.grad / counts.reshape(shape)
        _acc(a, g[seg_of_row])

    out = _node(out_data, (a,), backward)
    return out


def indexed_mean(a: Tensor, inverse: np.ndarray, n_segments: int) -> Tensor:
    """Mean of rows sharing `inverse[i]`, broadcast back per row.

    Equivalent to scattering rows into `n_segments` buckets, averaging
    each bucket, and gathering the bucket mean for every row. Used for
    voxel context pooling where rows are not pre-sorted.
    """
    x = a.data
    inverse = np.asarray(inverse, dtype=np.int64)
    order = np.argsort(inverse, kind="stable")
    sorted_inv = inverse[order]
    starts = np.searchsorted(sorted_inv, np.arange(n_segments))
    counts = np.bincount(inverse, minlength=n_segments).astype(x.dtype)
    if np.any(counts == 0):
        raise DiffError("indexed_mean: every segment needs at least one row")
    sums = np.add.reduceat(x[order], starts, axis=0)
    means = sums / counts[:, None]
    out_data = means[inverse]

    def backward():
        gseg = np.add.reduceat(out.grad[order], starts, axis=0)
        gmean = gseg / counts[:, None]
        _acc(a, gmean[inverse])

    out = _node(out_data, (a,), backward)
    return out


def sum_all(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward():
        _acc(a, np.broadcast_to(out.grad, a.data.shape))

    out = _node(out_data, (a,), backward)
    return out


def mean_all(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise DiffError("mean over zero elements")
    return scale(sum_all(a), 1.0 / a.data.size)


def rownorm(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Euclidean norm of each row of an (n, d) tensor; gradient is 0 at the origin."""
    n = np.sqrt(np.sum(a.data * a.data, axis=1))

    def backward():
        safe = np.maximum(n, eps)
        _acc(a, (out.grad / safe)[:, None] * a.data)

    out = _node(n, (a,), backward)
    return out


# ---------------------------------------------------------------------------
# fused loss kernels

def huber(a: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty of non-negative inputs: 0.5 x^2 inside delta, linear outside."""
    x = a.data
    quad = x <= delta
    out_data = np.where(quad, 0.5 * x * x, delta * (x - 0.5 * delta)).astype(x.dtype)

    def backward():
        _acc(a, out.grad * np.where(quad, x, x.dtype.type(delta)))

    out = _node(out_data, (a,), backward)
    return out


def huber_norm(resid: Tensor, delta: float = 1.0) -> Tensor:
    """Huber penalty of each row's Euclidean norm, fused for stability at 0."""
    v = resid.data
    n = np.sqrt(np.sum(v * v, axis=1))
    quad = n <= delta
    out_data = np.where(quad, 0.5 * n * n, delta * (n - 0.5 * delta)).astype(v.dtype)

    def backward():
        # d/dv of 0.5|v|^2 is v; of delta*|v| is delta*v/|v| (0 at the origin)
        safe = np.maximum(n, 1e-12)
        coef = np.where(quad, np.ones_like(n), delta / safe)
        _acc(resid, (out.grad * coef)[:, None] * v)

    out = _node(out_data, (resid,), backward)
    return out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross entropy of (B, C) logits against integer targets."""
    z = logits.data
    t = np.asarray(targets, dtype=np.int64)
    if z.ndim != 2 or t.shape != (z.shape[0],):
        raise DiffError(f"cross_entropy shapes: logits {z.shape}, targets {t.shape}")
    if z.shape[0] == 0:
        raise DiffError("cross_entropy over zero rows")
    if t.min() < 0 or t.max() >= z.shape[1]:
        raise DiffError("cross_entropy target out of range")
    logp = _log_softmax(z)
    out_data = np.asarray(-logp[np.arange(t.size), t].mean(), dtype=z.dtype)

    def backward():
        g = np.exp(logp)
        g[np.arange(t.size), t] -= 1.0
        _acc(logits, g * (out.grad / t.size))

    out = _node(out_data, (logits,), backward)
    return out


def focal_rows(logits: Tensor, targets: np.ndarray, gamma: float = 2.0,
               alpha: float | None = 0.25) -> Tensor:
    """Per-row focal term -alpha_t (1-p_t)^gamma log p_t for (n, C) logits.

    `alpha` weights the positive class (index 1) and `1-alpha` every other
    class; alpha=None means no class weighting, so gamma=0 recovers plain
    cross entropy rows.
    """
    z = logits.data
    t = np.asarray(targets, dtype=np.int64)
    if z.ndim != 2 or t.shape != (z.shape[0],):
        raise DiffError(f"focal_rows shapes: logits {z.shape}, targets {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
        raise DiffError("focal_rows target out of range")
    logp = _log_softmax(z)
    p = np.exp(logp)
    rows = np.arange(t.size)
    pt = p[rows, t]
    logpt = logp[rows, t]
    if alpha is None:
        at = np.ones_like(pt)
    else:
        at = np.where(t == 1, z.dtype.type(alpha), z.dtype.type(1.0 - alpha))
    onem = 1.0 - pt
    out_data = (-at * onem**gamma * logpt).astype(z.dtype)

    def backward():
        # dL/dz_c = -at * (delta_tc - p_c) * (onem^g - g*onem^(g-1)*pt*logpt)
        # guard the g*onem^(g-1) term so gamma=0 stays exact at pt -> 1
        if gamma == 0.0:
            inner = np.ones_like(pt)
        else:
            inner = onem**gamma - gamma * onem ** (gamma - 1.0) * pt * logpt
        delta = np.zeros_like(p)
        delta[rows, t] = 1.0
        g = -(at * inner * out.grad)[:, None] * (delta - p)
        _acc(logits, g.astype(z.dtype))

    out = _node(out_data, (logits,), backward)
    return out


def focal_loss(logits: Tensor, targets: np.ndarray, gamma: float = 2.0,
               alpha: float | None = 0.25) -> Tensor:
    """Mean focal loss over rows."""
    return mean_all(focal_rows(logits, targets, gamma=gamma, alpha=alpha))


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss node.

    Gradients sum into every reachable tensor with requires_grad. A
    second call through the same loss raises GraphReusedError; rebuild
    the graph instead of reusing it.
    """
    if loss.data.ndim != 0:
        raise DiffError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._used:
        raise GraphReusedError("backward was already called on this graph")
    loss._used = True

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------------------
# parameter containers

@dataclass
class MlpParams:
    """Weights of a plain MLP: affine layers with ReLU between, linear last."""

    widths: tuple[int, ...]
    weights: list[Tensor] = field(repr=False)
    biases: list[Tensor] = field(repr=False)

    def __post_init__(self):
        if len(self.widths) < 2:
            raise DiffError("an MLP needs at least input and output widths")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.widths[i], self.widths[i + 1])
            if w.data.shape != want or b.data.shape != (want[1],):
                raise DiffError(f"layer {i} shape mismatch: {w.data.shape} vs {want}")
            if not (np.isfinite(w.data).all() and np.isfinite(b.data).all()):
                raise DiffError(f"layer {i} has non-finite parameters")

    @classmethod
    def create(cls, widths: Sequence[int], rng: np.random.Generator,
               dtype=np.float64) -> "MlpParams":
        """He-initialized weights, zero biases."""
        widths = tuple(int(w) for w in widths)
        weights, biases = [], []
        for din, dout in zip(widths[:-1], widths[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / din), size=(din, dout)).astype(dtype)
            weights.append(Tensor(w, requires_grad=True))
            biases.append(Tensor(np.zeros(dout, dtype=dtype), requires_grad=True))
        return cls(widths=widths, weights=weights, biases=biases)

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


def mlp_forward(params: MlpParams, x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.data.shape[1] != params.widths[0]:
        raise DiffError(f"mlp_forward expects (B, {params.widths[0]}), got {x.data.shape}")
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = add(matmul(h, w), b)
        if i != last:
            h = relu(h)
    return h


def shared_mlp_maxpool(params: MlpParams, points: Tensor) -> tuple[Tensor, Tensor]:
    """Apply the MLP to each row and channel-max over rows.

    Returns (pooled (D,), per_point (n, D)). Zero rows is an error: the
    pool has no identity element.
    """
    if points.data.shape[0] == 0:
        raise EmptyGroupError("shared_mlp_maxpool over an empty point set")
    per_point = mlp_forward(params, points)
    pooled = max_rows(per_point)
    return pooled, per_point


class SgdMomentum:
    """SGD with classical momentum: v = mu*v + g; p -= lr*v."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                g = 0.0
            else:
                g = p.grad
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    n_checked: int
    elapsed_s: float
    message: str = ""

    def __bool__(self) -> bool:
        return self.passed


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor],
               h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of fn() against central differences.

    fn must rebuild its graph on every call (it is invoked 2 per scalar
    parameter entry plus once for the analytic pass). Relative error is
    |ad - fd| / max(|ad|, |fd|, 1e-4).
    """
    t0 = time.perf_counter()
    for p in params:
        p.grad = None
    loss = fn()
    if not np.isfinite(loss.data):
        return GradCheckReport(False, np.inf, 0, time.perf_counter() - t0,
                               "non-finite loss in analytic pass")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    max_rel = 0.0
    n = 0
    for p, ag in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            x0 = flat[i]
            flat[i] = x0 + h
            f_plus = float(fn().data)
            flat[i] = x0 - h
            f_minus = float(fn().data)
            flat[i] = x0
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                return GradCheckReport(False, np.inf, n, time.perf_counter() - t0,
                                       "non-finite loss during finite differences")
            fd = (f_plus - f_minus) / (2.0 * h)
            ad = float(ag.reshape(-1)[i])
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-4)
            max_rel = max(max_rel, rel)
            n += 1
    elapsed = time.perf_counter() - t0
    passed = max_rel <= tol
    msg = "" if passed else f"max relative error {max_rel:.3e} exceeds tol {tol:.1e}"
    return GradCheckReport(passed, max_rel, n, elapsed, msg)
