"""Minimal reverse-mode autodiff on numpy float64 arrays.

A Tensor wraps a float64 ndarray plus an optional backward closure and parent
links; calling ``backward`` on a scalar loss walks the graph once in reverse
topological order. The op set is deliberately small: what the synthesizer,
the CTC recognizer and the losses need, nothing more. Recurrent cells get a
fused ``gru_step`` op (hand-written backward) because per-gate graph nodes
dominate runtime on a single core.

No broadcasting except bias-add; shapes must match exactly otherwise.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes; names the op and shapes."""


def _shape_err(op, *shapes):
    return ShapeError(f"{op}: incompatible shapes {[tuple(s) for s in shapes]}")


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, name={self.name!r})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Value copy outside the graph (stop-gradient)."""
        return Tensor(self.values.copy())

    def backward(self):
        """Populate grads of everything this scalar depends on."""
        if self.values.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.values)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _make(values, parents, backward_fn, name=None):
    out = Tensor(values)
    out._parents = tuple(parents)
    out._backward = backward_fn
    out.name = name
    return out


def constant(values):
    return Tensor(values)


def parameter(values, name=None):
    return Tensor(values, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------

def add(a, b):
    """Same-shape add, or bias-add of a 1-D vector onto the trailing dim."""
    if a.values.shape == b.values.shape:
        def bwd(g):
            a._accumulate(g)
            b._accumulate(g)
        return _make(a.values + b.values, (a, b), bwd, "add")
    if b.values.ndim == 1 and a.values.ndim >= 1 and a.values.shape[-1] == b.values.shape[0]:
        def bwd(g):
            a._accumulate(g)
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return _make(a.values + b.values, (a, b), bwd, "add-bias")
    raise _shape_err("add", a.values.shape, b.values.shape)


def sub(a, b):
    if a.values.shape != b.values.shape:
        raise _shape_err("sub", a.values.shape, b.values.shape)

    def bwd(g):
        a._accumulate(g)
        b._accumulate(-g)
    return _make(a.values - b.values, (a, b), bwd, "sub")


def mul(a, b):
    if a.values.shape != b.values.shape:
        raise _shape_err("mul", a.values.shape, b.values.shape)

    def bwd(g):
        a._accumulate(g * b.values)
        b._accumulate(g * a.values)
    return _make(a.values * b.values, (a, b), bwd, "mul")


def scale(a, k):
    k = float(k)

    def bwd(g):
        a._accumulate(g * k)
    return _make(a.values * k, (a,), bwd, "scale")


def matmul(a, b):
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
        raise _shape_err("matmul", a.values.shape, b.values.shape)

    def bwd(g):
        a._accumulate(g @ b.values.T)
        b._accumulate(a.values.T @ g)
    return _make(a.values @ b.values, (a, b), bwd, "matmul")


def tanh(a):
    out_v = np.tanh(a.values)

    def bwd(g):
        a._accumulate(g * (1.0 - out_v * out_v))
    return _make(out_v, (a,), bwd, "tanh")


def sigmoid(a):
    out_v = _sigmoid(a.values)

    def bwd(g):
        a._accumulate(g * out_v * (1.0 - out_v))
    return _make(out_v, (a,), bwd, "sigmoid")


def _sigmoid(x):
    # sigmoid(x) = (1 + tanh(x/2)) / 2: stable at both tails and a single
    # vectorized transcendental, unlike the two-branch exp formulation
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(a):
    mask = a.values > 0

    def bwd(g):
        a._accumulate(g * mask)
    return _make(a.values * mask, (a,), bwd, "relu")


def tabs(a):
    sign = np.sign(a.values)

    def bwd(g):
        a._accumulate(g * sign)
    return _make(np.abs(a.values), (a,), bwd, "abs")


def tsum(a, axis=None):
    def bwd(g):
        if axis is None:
            a._accumulate(np.full_like(a.values, float(g)))
        else:
            a._accumulate(np.expand_dims(g, axis) * np.ones_like(a.values))
    return _make(np.sum(a.values, axis=axis), (a,), bwd, "sum")


def tmean(a, axis=None):
    n = a.values.size if axis is None else a.values.shape[axis]

    def bwd(g):
        if axis is None:
            a._accumulate(np.full_like(a.values, float(g) / n))
        else:
            a._accumulate(np.expand_dims(g, axis) * np.ones_like(a.values) / n)
    return _make(np.mean(a.values, axis=axis), (a,), bwd, "mean")


def concat(tensors, axis=-1):
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])
    return _make(np.concatenate([t.values for t in tensors], axis=axis), tensors, bwd, "concat")


def tslice(a, key):
    """Basic (non-fancy) indexing with gradient scatter."""
    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.values)
        a.grad[key] += g
    return _make(a.values[key], (a,), bwd, "slice")


def reshape(a, shape):
    orig = a.values.shape

    def bwd(g):
        a._accumulate(g.reshape(orig))
    return _make(a.values.reshape(shape), (a,), bwd, "reshape")


def softmax(a, axis=-1):
    v = a.values - np.max(a.values, axis=axis, keepdims=True)
    e = np.exp(v)
    out_v = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out_v, axis=axis, keepdims=True)
        a._accumulate(out_v * (g - dot))
    return _make(out_v, (a,), bwd, "softmax")


def log_softmax(a, axis=-1):
    v = a.values - np.max(a.values, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(v), axis=axis, keepdims=True))
    out_v = v - lse
    p = np.exp(out_v)

    def bwd(g):
        a._accumulate(g - p * np.sum(g, axis=axis, keepdims=True))
    return _make(out_v, (a,), bwd, "log-softmax")


def embedding(table, ids):
    """table: (V, E) parameter; ids: int array (any shape) -> ids.shape + (E,)."""
    ids = np.asarray(ids)
    if np.any(ids < 0) or np.any(ids >= table.values.shape[0]):
        raise ValueError(
            f"embedding-lookup: id out of range for table of size {table.values.shape[0]}")

    def bwd(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.values)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
    return _make(table.values[ids], (table,), bwd, "embedding")


def _zero_pad_time(a, half):
    """(B, T, C) -> (B, T+2*half, C) zero-padded; np.pad's argument
    normalization is pure overhead at this call rate."""
    if half == 0:
        return a
    b, t, c = a.shape
    out = np.zeros((b, t + 2 * half, c))
    out[:, half:half + t] = a
    return out


def conv1d(x, kernel):
    """Same-padded 1-D convolution over time.

    x: (B, T, Cin), kernel: (K, Cin, Cout) with K odd -> (B, T, Cout).
    """
    if x.values.ndim != 3 or kernel.values.ndim != 3 or \
            x.values.shape[2] != kernel.values.shape[1] or kernel.values.shape[0] % 2 != 1:
        raise _shape_err("conv1d", x.values.shape, kernel.values.shape)
    k = kernel.values.shape[0]
    half = k // 2
    xp = _zero_pad_time(x.values, half)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (B,T,Cin,K)
    # tensordot lowers to one BLAS call; einsum's path search costs more than
    # the contraction itself at these sizes
    out_v = np.tensordot(win, kernel.values, axes=([2, 3], [1, 0]))

    def bwd(g):
        kernel._accumulate(
            np.tensordot(win, g, axes=([0, 1], [0, 1])).transpose(1, 0, 2))
        gp = _zero_pad_time(g, half)
        gwin = np.lib.stride_tricks.sliding_window_view(gp, k, axis=1)  # (B,T,Cout,K)
        # correlation with the flipped kernel
        x._accumulate(np.tensordot(gwin[..., ::-1], kernel.values,
                                   axes=([3, 2], [0, 2])))
    return _make(out_v, (x, kernel), bwd, "conv1d")


# ---------------------------------------------------------------------------
# fused ops for the hot recurrent path
# ---------------------------------------------------------------------------

def gru_step(x, h, wx, wh, b):
    """One GRU cell step, fused.

    x: (B, Din), h: (B, H), wx: (Din, 3H), wh: (H, 3H), b: (3H,).
    Gate column layout is [update z | reset r | candidate n]; the candidate's
    recurrent term uses r*h.
    """
    hdim = h.values.shape[1]
    if wx.values.shape != (x.values.shape[1], 3 * hdim) or \
            wh.values.shape != (hdim, 3 * hdim) or b.values.shape != (3 * hdim,):
        raise _shape_err("gru_step", x.values.shape, h.values.shape,
                         wx.values.shape, wh.values.shape, b.values.shape)
    xv, hv = x.values, h.values
    pre = xv @ wx.values + b.values
    pre[:, :2 * hdim] += hv @ wh.values[:, :2 * hdim]
    z = _sigmoid(pre[:, :hdim])
    r = _sigmoid(pre[:, hdim:2 * hdim])
    rh = r * hv
    an = pre[:, 2 * hdim:] + rh @ wh.values[:, 2 * hdim:]
    n = np.tanh(an)
    out_v = (1.0 - z) * n + z * hv

    def bwd(g):
        da = np.empty((g.shape[0], 3 * hdim))
        daz = da[:, :hdim]
        dar = da[:, hdim:2 * hdim]
        dan = da[:, 2 * hdim:]
        np.multiply(g, 1.0 - z, out=dan)
        dan *= 1.0 - n * n
        np.multiply(g, hv - n, out=daz)
        daz *= z * (1.0 - z)
        drh = dan @ wh.values[:, 2 * hdim:].T
        np.multiply(drh, hv, out=dar)
        dar *= r * (1.0 - r)
        dh = g * z
        dh += drh * r
        dh += da[:, :2 * hdim] @ wh.values[:, :2 * hdim].T
        x._accumulate(da @ wx.values.T)
        h._accumulate(dh)
        wx._accumulate(xv.T @ da)
        if wh.grad is None:
            wh.grad = np.zeros_like(wh.values)
        wh.grad[:, :2 * hdim] += hv.T @ da[:, :2 * hdim]
        wh.grad[:, 2 * hdim:] += rh.T @ dan
        b._accumulate(da.sum(axis=0))
    return _make(out_v, (x, h, wx, wh, b), bwd, "gru_step")


def gru_cell(xp, h, wh, b, mask=None):
    """GRU step from a precomputed input projection xp = x @ wx, (B, 3H).

    Sequence layers project all timesteps through wx in one matmul up front,
    leaving only the recurrent work in here. mask: optional (B, 1) ndarray;
    rows with mask 0 pass the previous state through unchanged (padding).
    Gate layout matches gru_step.
    """
    hdim = h.values.shape[1]
    if xp.values.shape != (h.values.shape[0], 3 * hdim) or \
            wh.values.shape != (hdim, 3 * hdim) or b.values.shape != (3 * hdim,):
        raise _shape_err("gru_cell", xp.values.shape, h.values.shape,
                         wh.values.shape, b.values.shape)
    hv = h.values
    pre = xp.values + b.values
    pre[:, :2 * hdim] += hv @ wh.values[:, :2 * hdim]
    z = _sigmoid(pre[:, :hdim])
    r = _sigmoid(pre[:, hdim:2 * hdim])
    rh = r * hv
    n = np.tanh(pre[:, 2 * hdim:] + rh @ wh.values[:, 2 * hdim:])
    out_v = (1.0 - z) * n + z * hv
    if mask is not None:
        out_v = mask * out_v + (1.0 - mask) * hv

    def bwd(g):
        if mask is not None:
            gm = g * mask
        else:
            gm = g
        da = np.empty((g.shape[0], 3 * hdim))
        daz = da[:, :hdim]
        dar = da[:, hdim:2 * hdim]
        dan = da[:, 2 * hdim:]
        np.multiply(gm, 1.0 - z, out=dan)
        dan *= 1.0 - n * n
        np.multiply(gm, hv - n, out=daz)
        daz *= z * (1.0 - z)
        drh = dan @ wh.values[:, 2 * hdim:].T
        np.multiply(drh, hv, out=dar)
        dar *= r * (1.0 - r)
        dh = gm * z
        dh += drh * r
        dh += da[:, :2 * hdim] @ wh.values[:, :2 * hdim].T
        if mask is not None:
            dh += g * (1.0 - mask)
        xp._accumulate(da)
        h._accumulate(dh)
        if wh.grad is None:
            wh.grad = np.zeros_like(wh.values)
        wh.grad[:, :2 * hdim] += hv.T @ da[:, :2 * hdim]
        wh.grad[:, 2 * hdim:] += rh.T @ dan
        b._accumulate(da.sum(axis=0))
    return _make(out_v, (xp, h, wh, b), bwd, "gru_cell")


def attn_energies(query, keys, loc, v):
    """tanh(keys + query[:,None,:] + loc) . v -> (B, L)."""
    if keys.values.shape != loc.values.shape or \
            query.values.shape != (keys.values.shape[0], keys.values.shape[2]) or \
            v.values.shape != (keys.values.shape[2],):
        raise _shape_err("attn_energies", query.values.shape, keys.values.shape,
                         loc.values.shape, v.values.shape)
    t = np.tanh(keys.values + query.values[:, None, :] + loc.values)
    out_v = t @ v.values

    def bwd(g):
        dt = g[:, :, None] * v.values * (1.0 - t * t)
        keys._accumulate(dt)
        loc._accumulate(dt)
        query._accumulate(dt.sum(axis=1))
        v._accumulate(np.tensordot(g, t, axes=([0, 1], [0, 1])))
    return _make(out_v, (query, keys, loc, v), bwd, "attn_energies")


def attn_context(weights, enc):
    """weights: (B, L), enc: (B, L, H) -> (B, H) weighted sum."""
    if weights.values.shape != enc.values.shape[:2]:
        raise _shape_err("attn_context", weights.values.shape, enc.values.shape)
    out_v = (weights.values[:, :, None] * enc.values).sum(axis=1)

    def bwd(g):
        weights._accumulate((enc.values * g[:, None, :]).sum(axis=2))
        enc._accumulate(weights.values[:, :, None] * g[:, None, :])
    return _make(out_v, (weights, enc), bwd, "attn_context")


def bce_with_logits(logits, targets, pos_weight=1.0):
    """Elementwise stable binary cross-entropy from logits; returns same shape.

    loss = -[w * y * log sigmoid(x) + (1-y) * log(1 - sigmoid(x))]
    """
    if logits.values.shape != np.shape(targets):
        raise _shape_err("bce_with_logits", logits.values.shape, np.shape(targets))
    x = logits.values
    y = np.asarray(targets, dtype=np.float64)
    w = np.where(y > 0.5, float(pos_weight), 1.0)
    # -log sigmoid(x) = softplus(-x); -log(1-sigmoid(x)) = softplus(x)
    sp_neg = np.logaddexp(0.0, -x)
    sp_pos = np.logaddexp(0.0, x)
    out_v = w * y * sp_neg + (1.0 - y) * sp_pos
    s = _sigmoid(x)

    def bwd(g):
        logits._accumulate(g * (w * y * (s - 1.0) + (1.0 - y) * s))
    return _make(out_v, (logits,), bwd, "bce_with_logits")


def dropout(a, rate, rng):
    """Inverted dropout; identity when rate == 0."""
    if rate == 0.0:
        return a
    mask = (rng.random(a.values.shape) >= rate) / (1.0 - rate)

    def bwd(g):
        a._accumulate(g * mask)
    return _make(a.values * mask, (a,), bwd, "dropout")


# ---------------------------------------------------------------------------
# dispatch surface
# ---------------------------------------------------------------------------

_KINDS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax-over-axis": softmax,
    "log-softmax-over-axis": log_softmax,
    "concat": lambda *ts, axis=-1: concat(list(ts), axis=axis),
    "slice": tslice,
    "sum": tsum,
    "mean": tmean,
    "abs": tabs,
    "conv1d": conv1d,
    "embedding-lookup": embedding,
}


def op_apply(kind, *inputs, **kwargs):
    """Apply a registered op by name; raises KeyError for unknown kinds."""
    return _KINDS[kind](*inputs, **kwargs)
