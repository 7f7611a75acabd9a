"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every op builds a node holding its parents and a closure mapping the upstream
gradient to one gradient per parent.  ``backward`` walks the graph in reverse
topological order and accumulates into leaf ``.grad`` arrays.  Graphs are not
freed by ``backward``, so several losses may be differentiated through a shared
sub-graph (the trainer relies on this for the adversarial losses).
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True
_SEQ = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation rollouts)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def frozen(params: Iterable["Tensor"]):
    """Treat ``params`` as constants for graphs built inside the block."""
    params = list(params)
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.name = name
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> dict:
        return backward(self, grad)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError("non-finite value produced in forward pass")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward_fn)
    return Tensor(data)


def backward(root: Tensor, grad=None) -> dict:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``.grad``.

    Returns the mapping ``id(node) -> gradient`` for every node visited, which
    lets callers check which sub-graphs a loss actually reached.
    """
    if grad is None:
        if root.data.size != 1:
            raise ValueError("backward() without an upstream gradient needs a scalar root")
        grad = np.ones_like(root.data)
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=DTYPE)}
    if not root.requires_grad:
        return grads

    # parents are always created before their children, so creation order
    # reversed is a valid topological order for the reachable sub-graph
    reach: dict[int, Tensor] = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and id(p) not in reach:
                reach[id(p)] = p
                stack.append(p)
    order = sorted(reach.values(), key=lambda n: n._seq)

    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


# -- elementwise ---------------------------------------------------------------

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _node(a.data + float(b), (a,), lambda g: (g,))
    a = as_tensor(a)
    _check_same(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _check_same(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Hadamard product, or scaling by a python scalar."""
    if not isinstance(b, Tensor):
        s = float(b)
        a = as_tensor(a)
        return _node(a.data * s, (a,), lambda g: (g * s,))
    a = as_tensor(a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, float(s))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    k = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * k, (a,), lambda g: (g * k,))


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise ValueError("log of non-positive value")
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions and shape ops -----------------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _node(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(data, tuple(tensors), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _node(data, tuple(tensors), bw)


def embedding(table: Tensor, ids, frozen_row: int | None = None) -> Tensor:
    """Row lookup ``table[ids]``; ``frozen_row`` never receives gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        if frozen_row is not None:
            out[frozen_row] = 0.0
        return (out,)

    return _node(table.data[ids], (table,), bw)


# -- linear algebra --------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and a 2-D ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if ad.ndim > 1 \
                else np.outer(ad, g)
        return ga, gb

    return _node(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with the bias row repeated over the leading axes."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: dimension mismatch {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        return matmul(x, w)
    out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _node(out, (x, w, b), bw)


# -- attention primitives --------------------------------------------------------------

def attend_scores(keys: Tensor, query: Tensor) -> Tensor:
    """Dot product of every key row with its batch's query.

    keys (B, K, D), query (B, D) -> (B, K); the unbatched (K, D), (D,) -> (K,)
    form is also accepted.
    """
    kd, qd = keys.data, query.data
    if kd.shape[:-2] != qd.shape[:-1] or kd.shape[-1] != qd.shape[-1]:
        raise ValueError(f"attend_scores: shape mismatch {kd.shape} vs {qd.shape}")
    out = np.matmul(kd, qd[..., None])[..., 0]

    def bw(g):
        gk = g[..., :, None] * qd[..., None, :] if keys.requires_grad else None
        gq = np.matmul(g[..., None, :], kd)[..., 0, :] if query.requires_grad else None
        return gk, gq

    return _node(out, (keys, query), bw)


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """sum_k weights[..., k] * values[..., k, :]."""
    wd, vd = weights.data, values.data
    if wd.shape != vd.shape[:-1]:
        raise ValueError(f"weighted_sum: shape mismatch {wd.shape} vs {vd.shape}")
    out = np.matmul(wd[..., None, :], vd)[..., 0, :]

    def bw(g):
        gw = np.matmul(vd, g[..., :, None])[..., 0] if weights.requires_grad else None
        gv = wd[..., :, None] * g[..., None, :] if values.requires_grad else None
        return gw, gv

    return _node(out, (weights, values), bw)


def masked_mean(values: Tensor, mask) -> Tensor:
    """Mean of ``values[..., k, :]`` over positions where ``mask`` is true."""
    m = np.asarray(mask, dtype=DTYPE)
    count = m.sum(axis=-1, keepdims=True)
    if (count == 0).any():
        raise ValueError("masked_mean: empty support")
    w = m / count
    vd = values.data
    out = np.matmul(w[..., None, :], vd)[..., 0, :]
    return _node(out, (values,), lambda g: (w[..., :, None] * g[..., None, :],))


def _check_mask(scores: Tensor, mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.shape != scores.shape:
        raise ValueError(f"mask shape {m.shape} does not match scores {scores.shape}")
    if not m.any(axis=-1).all():
        raise ValueError("masked softmax over an all-masked row")
    return m


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Softmax along the last axis; masked-out entries are exactly zero."""
    m = _check_mask(scores, mask)
    s = np.where(m, scores.data, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(s), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (scores,), bw)


def masked_log_softmax(scores: Tensor, mask) -> Tensor:
    """Log-softmax along the last axis; masked-out entries are set to 0."""
    m = _check_mask(scores, mask)
    s = np.where(m, scores.data, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    lse = np.log(np.where(m, np.exp(s), 0.0).sum(axis=-1, keepdims=True))
    out = np.where(m, s - lse, 0.0)
    p = np.where(m, np.exp(out), 0.0)

    def bw(g):
        g = np.where(m, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, (scores,), bw)


def pick(a: Tensor, idx) -> Tensor:
    """``a[b, idx[b]]`` for a 2-D ``a``."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _node(a.data[rows, idx], (a,), bw)


# -- recurrent cell pieces ----------------------------------------------------------------
# The LSTM step is split into three fused nodes: gate pre-activations, cell
# update and output.  Gate order along the last axis is (input, forget, cell, output).
# ``mask`` (shape (B,)) freezes the state of rows whose sequence has ended.

def lstm_preact(x: Tensor, h: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != wx.shape[0] or h.shape[-1] != wh.shape[0] or wx.shape[1] != 4 * h.shape[-1]:
        raise ValueError("lstm: dimension mismatch")
    xd, hd, wxd, whd = x.data, h.data, wx.data, wh.data
    out = xd @ wxd + hd @ whd + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (
            g @ wxd.T if x.requires_grad else None,
            g @ whd.T if h.requires_grad else None,
            xd.reshape(-1, xd.shape[-1]).T @ g2 if wx.requires_grad else None,
            hd.reshape(-1, hd.shape[-1]).T @ g2 if wh.requires_grad else None,
            g2.sum(axis=0) if b.requires_grad else None,
        )

    return _node(out, (x, h, wx, wh, b), bw)


def _mask_col(mask, like: np.ndarray):
    if mask is None:
        return None
    m = np.asarray(mask, dtype=DTYPE)
    return m.reshape(m.shape + (1,) * (like.ndim - m.ndim))


def lstm_cell_update(z: Tensor, c_prev: Tensor, mask=None) -> Tensor:
    H = c_prev.shape[-1]
    zd = z.data
    i = _sigmoid(zd[..., :H])
    f = _sigmoid(zd[..., H:2 * H])
    u = np.tanh(zd[..., 2 * H:3 * H])
    cp = c_prev.data
    c = f * cp + i * u
    m = _mask_col(mask, c)
    if m is not None:
        c = m * c + (1.0 - m) * cp

    def bw(g):
        gc_new = g if m is None else g * m
        gz = np.zeros_like(zd)
        gz[..., :H] = gc_new * u * i * (1.0 - i)
        gz[..., H:2 * H] = gc_new * cp * f * (1.0 - f)
        gz[..., 2 * H:3 * H] = gc_new * i * (1.0 - u * u)
        gcp = gc_new * f if m is None else gc_new * f + g * (1.0 - m)
        return gz, gcp

    return _node(c, (z, c_prev), bw)


def lstm_cell_output(z: Tensor, c: Tensor, h_prev: Tensor, mask=None) -> Tensor:
    H = c.shape[-1]
    zd = z.data
    o = _sigmoid(zd[..., 3 * H:])
    tc = np.tanh(c.data)
    h = o * tc
    m = _mask_col(mask, h)
    if m is not None:
        h = m * h + (1.0 - m) * h_prev.data

    def bw(g):
        gh = g if m is None else g * m
        gz = np.zeros_like(zd)
        gz[..., 3 * H:] = gh * tc * o * (1.0 - o)
        gc = gh * o * (1.0 - tc * tc)
        ghp = None if m is None else g * (1.0 - m)
        return gz, gc, ghp

    return _node(h, (z, c, h_prev), bw)


def select(a: Tensor, index: int, axis: int) -> Tensor:
    """``np.take(a, index, axis)`` for a single integer index."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return _node(np.take(a.data, index, axis=axis), (a,), bw)


def lstm_sequence(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor, mask=None,
                  reverse: bool = False) -> Tensor:
    """Whole-sequence LSTM from a zero state as one node, with hand-written BPTT.

    x (B, T, in) -> hidden states (B, T, H) aligned with the inputs.  Same gate
    layout and masking rule as the step-wise pieces above.
    """
    B, T, n_in = x.shape
    H = wh.shape[0]
    if wx.shape != (n_in, 4 * H) or wh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ValueError("lstm_sequence: dimension mismatch")
    m_all = None if mask is None else np.asarray(mask, dtype=DTYPE).reshape(B, T, 1)
    xd, wxd, whd = x.data, wx.data, wh.data
    xw = xd @ wxd + b.data
    order = list(range(T - 1, -1, -1)) if reverse else list(range(T))
    gates = np.empty((B, T, 4 * H))   # activated i, f, u, o
    cs = np.empty((B, T, H))
    tcs = np.empty((B, T, H))
    h_prev = np.empty((B, T, H))
    c_prev = np.empty((B, T, H))
    out = np.empty((B, T, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in order:
        z = xw[:, t] + h @ whd
        ga = gates[:, t]
        ga[:, :2 * H] = _sigmoid(z[:, :2 * H])
        ga[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        ga[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
        h_prev[:, t] = h
        c_prev[:, t] = c
        cn = ga[:, H:2 * H] * c + ga[:, :H] * ga[:, 2 * H:3 * H]
        cs[:, t] = cn
        tcs[:, t] = tc = np.tanh(cn)
        hn = ga[:, 3 * H:] * tc
        if m_all is not None:
            m = m_all[:, t]
            cn = m * cn + (1.0 - m) * c
            hn = m * hn + (1.0 - m) * h
        h, c = hn, cn
        out[:, t] = h

    def bw(g):
        dxw = np.zeros_like(xw)
        dwh = np.zeros_like(whd)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(order):
            dh = g[:, t] + dh_next
            if m_all is not None:
                m = m_all[:, t]
                dh_pass, dc_pass = dh * (1.0 - m), dc_next * (1.0 - m)
                dh, dcn = dh * m, dc_next * m
            else:
                dh_pass = dc_pass = 0.0
                dcn = dc_next
            ga = gates[:, t]
            i, f, u, o = ga[:, :H], ga[:, H:2 * H], ga[:, 2 * H:3 * H], ga[:, 3 * H:]
            tc = tcs[:, t]
            dc = dcn + dh * o * (1.0 - tc * tc)
            dz = dxw[:, t]
            dz[:, :H] = dc * u * i * (1.0 - i)
            dz[:, H:2 * H] = dc * c_prev[:, t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - u * u)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dwh += h_prev[:, t].T @ dz
            dh_next = dz @ whd.T + dh_pass
            dc_next = dc * f + dc_pass
        flat = dxw.reshape(-1, 4 * H)
        return (
            dxw @ wxd.T if x.requires_grad else None,
            xd.reshape(-1, n_in).T @ flat if wx.requires_grad else None,
            dwh,
            flat.sum(axis=0),
        )

    return _node(out, (x, wx, wh, b), bw)
