"""Parameter registry and transformer building blocks on top of ndgrad."""

from __future__ import annotations

import hashlib

import numpy as np

from . import ndgrad as ng
from .errors import DimensionError
from .ndgrad import GradTensor

LN_EPS = 1e-5


class ParamSet:
    """Named parameter registry backing checkpoints and optimizers."""

    def __init__(self):
        self._params = {}

    def register(self, name: str, tensor: GradTensor) -> GradTensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self, trainable_only=False):
        ts = self._params.values()
        return [t for t in ts if t.requires_grad] if trainable_only else list(ts)

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def freeze(self, prefix=""):
        for name, t in self._params.items():
            if name.startswith(prefix):
                t.requires_grad = False

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_dict(self):
        return {name: np.array(t.data) for name, t in self._params.items()}

    def load_state_dict(self, state):
        for name, t in self._params.items():
            if name not in state:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=t.dtype)
            if arr.shape != t.shape:
                raise DimensionError(
                    f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr

    def checksum(self, prefix="") -> str:
        """SHA-256 over the raw bytes of all (prefix-matching) parameters."""
        h = hashlib.sha256()
        for name in sorted(self._params):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(np.ascontiguousarray(self._params[name].data).tobytes())
        return h.hexdigest()


def normal_param(rng, shape, std=0.02):
    return GradTensor(rng.normal(0.0, std, size=shape).astype(np.float32),
                      requires_grad=True)


def lecun_std(fan_in: int) -> float:
    return 1.0 / np.sqrt(fan_in)


def zeros_param(shape):
    return GradTensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def ones_param(shape):
    return GradTensor(np.ones(shape, dtype=np.float32), requires_grad=True)


class Linear:
    """y = x @ w + b with weight [d_in x d_out]; fan-in-scaled init by default."""

    def __init__(self, params: ParamSet, name: str, d_in: int, d_out: int, rng,
                 std=None, bias=True):
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        if std is None:
            std = lecun_std(d_in)
        self.w = params.register(f"{name}.w", normal_param(rng, (d_in, d_out), std))
        self.b = params.register(f"{name}.b", zeros_param((d_out,))) if bias else None

    def __call__(self, x):
        out = ng.matmul(x, self.w)
        if self.b is not None:
            out = ng.add(out, self.b)
        return out


class Embedding:
    """Token-id lookup table [vocab x d]."""

    def __init__(self, params: ParamSet, name: str, vocab: int, d: int, rng, std=0.02):
        self.table = params.register(f"{name}.table", normal_param(rng, (vocab, d), std))

    def __call__(self, ids):
        return ng.embedding(self.table, np.asarray(ids, dtype=np.intp))


class LayerNorm:
    def __init__(self, params: ParamSet, name: str, d: int):
        self.gain = params.register(f"{name}.gain", ones_param((d,)))
        self.bias = params.register(f"{name}.bias", zeros_param((d,)))

    def __call__(self, x):
        return ng.layer_norm(x, self.gain, self.bias, eps=LN_EPS)


class Mlp:
    """Two-layer feed-forward with GELU, expansion factor ``ratio``."""

    def __init__(self, params: ParamSet, name: str, d: int, rng, ratio=4):
        self.fc1 = Linear(params, f"{name}.fc1", d, ratio * d, rng)
        self.fc2 = Linear(params, f"{name}.fc2", ratio * d, d, rng)

    def __call__(self, x):
        return self.fc2(ng.gelu(self.fc1(x)))


def causal_mask(length: int) -> np.ndarray:
    """Additive [L x L] mask: 0 on/below the diagonal, NEG_MASK above."""
    mask = np.zeros((length, length), dtype=np.float32)
    mask[np.triu_indices(length, k=1)] = ng.NEG_MASK
    return mask


class Attention:
    """Multi-head self-attention with optional QK-normalization.

    With ``qk_norm`` every per-head query/key vector is scaled to unit L2
    norm and multiplied by a learned positive per-head scale (exp of a raw
    parameter); the usual 1/sqrt(d_head) factor is dropped.  Without it,
    standard scaled dot-product attention.  The mask is an additive [L x L]
    array (see ``causal_mask``); pass None for bidirectional attention.
    """

    def __init__(self, params: ParamSet, name: str, d: int, heads: int, rng,
                 qk_norm=False):
        if d % heads != 0:
            raise DimensionError(f"hidden size {d} not divisible by heads {heads}")
        self.d, self.heads = d, heads
        self.d_head = d // heads
        self.qk_norm = qk_norm
        self.q_proj = Linear(params, f"{name}.q", d, d, rng)
        self.k_proj = Linear(params, f"{name}.k", d, d, rng)
        self.v_proj = Linear(params, f"{name}.v", d, d, rng)
        self.o_proj = Linear(params, f"{name}.o", d, d, rng)
        # log of the per-head scale, so the effective scale stays positive
        self.qk_log_scale = params.register(f"{name}.qk_log_scale",
                                            zeros_param((heads, 1, 1)))

    def _split_heads(self, x, length):
        return ng.transpose(ng.reshape(x, (length, self.heads, self.d_head)), (1, 0, 2))

    def __call__(self, u, mask=None):
        length = u.shape[0]
        q = self._split_heads(self.q_proj(u), length)
        k = self._split_heads(self.k_proj(u), length)
        v = self._split_heads(self.v_proj(u), length)
        if self.qk_norm:
            gamma = ng.exp(self.qk_log_scale)
            q = ng.mul(ng.l2_normalize(q, axis=-1), gamma)
            k = ng.mul(ng.l2_normalize(k, axis=-1), gamma)
            scores = ng.matmul(q, ng.transpose(k, (0, 2, 1)))
        else:
            scores = ng.scale(ng.matmul(q, ng.transpose(k, (0, 2, 1))),
                              1.0 / np.sqrt(self.d_head))
        if mask is not None:
            scores = ng.add(scores, GradTensor(mask))
        weights = ng.softmax(scores, axis=-1)
        out = ng.matmul(weights, v)
        out = ng.reshape(ng.transpose(out, (1, 0, 2)), (length, self.d))
        return self.o_proj(out)


class Block:
    """Transformer block in parallel or sequential form.

    Parallel (``parallel=True``): one shared normalization feeds both
    branches and their outputs are summed into the residual,
    ``y = x + Attn(LN(x)) + MLP(LN(x))``.  Sequential: the classic
    ``x' = x + Attn(LN1(x)); y = x' + MLP(LN2(x'))``.

    Both normalization layers are always allocated so the two forms share
    one parameter layout (the form flag can be toggled on equal weights).
    """

    def __init__(self, params: ParamSet, name: str, d: int, heads: int, rng,
                 parallel=True, qk_norm=False, mlp_ratio=4):
        self.parallel = parallel
        self.ln1 = LayerNorm(params, f"{name}.ln1", d)
        self.ln2 = LayerNorm(params, f"{name}.ln2", d)
        self.attn = Attention(params, f"{name}.attn", d, heads, rng, qk_norm=qk_norm)
        self.mlp = Mlp(params, f"{name}.mlp", d, rng, ratio=mlp_ratio)

    def __call__(self, x, mask=None):
        if self.parallel:
            u = self.ln1(x)
            return ng.add(ng.add(x, self.attn(u, mask)), self.mlp(u))
        x = ng.add(x, self.attn(self.ln1(x), mask))
        return ng.add(x, self.mlp(self.ln2(x)))
