"""Dense float tensors with reverse-mode automatic differentiation.

Values are stored as numpy arrays (float32 by default; float64 tensors are
accepted so numeric tests can run at higher precision).  Every differentiable
operation records a TapeNode linking the output to its inputs together with a
closure that maps the output gradient to input gradients.  ``backward`` walks
the recorded graph once in reverse topological order.

Gradient buffers accumulate: calling ``backward`` twice without clearing
``.grad`` adds the new gradients onto the old ones.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    EmptyLossError,
    NumericDomainError,
    ParameterError,
)

DEFAULT_DTYPE = np.float32

# Additive attention-mask value: large enough that (x + NEG_MASK) == NEG_MASK
# for any activation-scale x in float32, so exp() underflows to exactly 0.
NEG_MASK = -1e30


class TapeNode:
    """One recorded operation: op tag, parent tensors, and the backward rule.

    ``backward_fn(grad_out) -> tuple`` returns one gradient array per parent
    (``None`` for parents that do not require grad).
    """

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class GradTensor:
    """N-dimensional float array, optionally participating in the grad tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, GradTensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

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

    def item(self):
        return float(self.data)

    def detach(self):
        """Same values, no grad requirement, disconnected from the tape."""
        return GradTensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"GradTensor(shape={self.shape}{flag})"

    # operator sugar; the module-level functions are the primary API
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x, dtype=None):
    if isinstance(x, GradTensor):
        return x
    return GradTensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _make(data, op, parents, backward_fn):
    out = GradTensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward_fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(data, "add", (a, b), backward_fn)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward_fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(data, "sub", (a, b), backward_fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(data, "mul", (a, b), backward_fn)


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)
    data = a.data * np.asarray(s, dtype=a.dtype)

    def backward_fn(g):
        return (g * np.asarray(s, dtype=g.dtype),)

    return _make(data, "scale", (a,), backward_fn)


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward_fn(g):
        return (g * data,)

    return _make(data, "exp", (a,), backward_fn)


def matmul(a, b):
    """Matrix product with numpy semantics (leading dims broadcast).

    Backward follows dA = dC @ B^T, dB = A^T @ dC on the last two axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(data, "matmul", (a, b), backward_fn)


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    old_shape = a.shape

    def backward_fn(g):
        return (g.reshape(old_shape),)

    return _make(data, "reshape", (a,), backward_fn)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _make(data, "transpose", (a,), backward_fn)


def concat_seq(a, b, axis=0):
    """Concatenate along ``axis``; operand ``a`` comes first."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim:
        raise DimensionError(f"concat rank mismatch: {a.shape} vs {b.shape}")
    for ax in range(a.ndim):
        if ax != axis % a.ndim and a.shape[ax] != b.shape[ax]:
            raise DimensionError(f"concat extents disagree off-axis: {a.shape} vs {b.shape}")
    data = np.concatenate([a.data, b.data], axis=axis)
    split = a.shape[axis % a.ndim]

    def backward_fn(g):
        ga, gb = np.split(g, [split], axis=axis)
        return (ga if a.requires_grad else None,
                gb if b.requires_grad else None)

    return _make(data, "concat_seq", (a, b), backward_fn)


def embedding(table, ids):
    """Row lookup ``table[ids]``; backward scatter-adds into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding id out of range for table of {table.shape[0]} rows")
    data = table.data[ids]

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(data, "embedding", (table,), backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities and normalizers
# ---------------------------------------------------------------------------

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(a):
    """GELU under the tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        return (g * d.astype(g.dtype),)

    return _make(data.astype(x.dtype), "gelu", (a,), backward_fn)


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis``.

    Rejects non-finite input; use an additive ``NEG_MASK`` constant (finite)
    for masking so masked weights underflow to exactly zero.
    """
    a = _as_tensor(a)
    if axis >= a.ndim or axis < -a.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {a.shape}")
    if not np.isfinite(a.data).all():
        raise NumericDomainError("softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, "softmax", (a,), backward_fn)


def l2_normalize(a, axis=-1, eps=1e-12):
    """Scale vectors along ``axis`` to unit L2 norm."""
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True) + eps)
    data = a.data / norm

    def backward_fn(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - data * dot) / norm,)

    return _make(data, "l2_normalize", (a,), backward_fn)


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row normalization over the last axis, then affine gain/bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"gain/bias must match last extent {d}, got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward_fn(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            gx = (gy - m1 - xhat * m2) * inv
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        return gx, ggain, gbias

    return _make(data.astype(x.dtype), "layer_norm", (x, gain, bias), backward_fn)


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------


def sum_all(a):
    a = _as_tensor(a)
    data = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward_fn(g):
        return (np.full(a.shape, float(g), dtype=a.dtype),)

    return _make(data, "sum", (a,), backward_fn)


def mean_all(a):
    a = _as_tensor(a)
    data = np.asarray(a.data.mean(), dtype=a.dtype)
    n = a.size

    def backward_fn(g):
        return (np.full(a.shape, float(g) / n, dtype=a.dtype),)

    return _make(data, "mean", (a,), backward_fn)


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets, ignore_id=-100, count_ignored_in_mean=False):
    """Mean negative log-probability of the true token at each position.

    Positions whose target equals ``ignore_id`` contribute nothing to the
    value or the gradient.  By default the mean is taken over supervised
    positions only; ``count_ignored_in_mean=True`` divides by the full
    sequence length instead.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [N x V] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"targets shape {targets.shape} does not match logits rows {logits.shape[0]}")
    keep = targets != ignore_id
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise EmptyLossError("all positions carry ignore_id; nothing to supervise")
    v = logits.shape[1]
    kept_targets = targets[keep]
    if kept_targets.min() < 0 or kept_targets.max() >= v:
        raise ContractError(f"target id out of range for vocab {v}")
    denom = targets.shape[0] if count_ignored_in_mean else n_kept
    logp = _log_softmax(logits.data)
    rows = np.nonzero(keep)[0]
    data = np.asarray(-logp[rows, kept_targets].sum() / denom, dtype=logits.dtype)

    def backward_fn(g):
        probs = np.exp(logp)
        gl = np.zeros_like(logits.data)
        gl[rows] = probs[rows]
        gl[rows, kept_targets] -= 1.0
        gl *= float(g) / denom
        return (gl,)

    return _make(data, "cross_entropy", (logits,), backward_fn)


def kl_divergence(p_logits, q_logits):
    """Mean over rows of KL(p || q) with p = softmax(p_logits) held fixed.

    The reference side ``p_logits`` is treated as a constant: gradient flows
    only into ``q_logits``.
    """
    p_logits, q_logits = _as_tensor(p_logits), _as_tensor(q_logits)
    if p_logits.shape != q_logits.shape:
        raise DimensionError(f"kl shapes disagree: {p_logits.shape} vs {q_logits.shape}")
    if p_logits.ndim != 2:
        raise DimensionError(f"kl_divergence expects [N x V] logits, got {p_logits.shape}")
    n = p_logits.shape[0]
    logp = _log_softmax(p_logits.data)
    logq = _log_softmax(q_logits.data)
    p = np.exp(logp)
    data = np.asarray((p * (logp - logq)).sum() / n, dtype=q_logits.dtype)

    def backward_fn(g):
        q = np.exp(logq)
        gq = (q - p) * (float(g) / n)
        return (None, gq.astype(q_logits.dtype))

    return _make(data, "kl_divergence", (p_logits, q_logits), backward_fn)


def l2_distance(a, b):
    """Mean squared difference over all elements (per-element convention).

    The squared Euclidean distance between corresponding vectors, averaged
    over every element so the value is invariant to sequence length and
    width.  ``l2_distance([1,0],[0,1]) == 1.0`` under this normalization.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"l2_distance shapes disagree: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = a.size
    data = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def backward_fn(g):
        base = diff * (2.0 * float(g) / n)
        return (base.astype(a.dtype) if a.requires_grad else None,
                (-base).astype(b.dtype) if b.requires_grad else None)

    return _make(data, "l2_distance", (a, b), backward_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss):
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar.  Gradients accumulate across calls; clear with
    ``zero_grad`` between steps.
    """
    if not isinstance(loss, GradTensor):
        raise ContractError("backward expects a GradTensor")
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    flow = {id(loss): np.ones((), dtype=loss.dtype)}
    for t in reversed(order):
        g = flow.get(id(t))
        if g is None or t.node is None:
            continue
        grads = t.node.backward_fn(g)
        for parent, pg in zip(t.node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flow:
                flow[key] = flow[key] + pg
            else:
                flow[key] = pg

    for t in order:
        g = flow.get(id(t))
        if g is None or not t.requires_grad:
            continue
        if t.node is not None:
            continue  # only leaves retain gradients
        if t.grad is None:
            t.grad = np.array(g, dtype=t.dtype)
        else:
            t.grad = t.grad + g.astype(t.dtype)


def zero_grad(tensors):
    for t in tensors:
        t.zero_grad()
