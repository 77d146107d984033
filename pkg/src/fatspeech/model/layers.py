"""Transformer building blocks on top of the numerics ops.

All parameters live in a flat name -> Tensor store owned by the model;
layer objects hold references and wire the forward graph. Blocks are
pre-norm residual (LayerNorm, sublayer, add) with a final LayerNorm per
stack. Matrices are Xavier-uniform, biases zero, embedding-like vectors
N(0, d_model^-1/2); creation order is fixed so a seed pins every weight.
"""

import numpy as np

from ..errors import DataError
from ..numerics import (
    Tensor, add, concat, gather_rows, gelu, layer_norm, matmul, mul, relu,
    scale, slice_, softmax, transpose,
)

NEG_INF = -1e9


def xavier(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ParamStore:
    def __init__(self, dtype, rng):
        self.dtype = dtype
        self.rng = rng
        self.params = {}

    def matrix(self, name, shape, fan_in=None, fan_out=None):
        fan_in = fan_in if fan_in is not None else shape[0]
        fan_out = fan_out if fan_out is not None else shape[-1]
        t = Tensor(xavier(self.rng, shape, fan_in, fan_out, self.dtype),
                   requires_grad=True)
        self.params[name] = t
        return t

    def zeros(self, name, shape):
        t = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def ones(self, name, shape):
        t = Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def embedding(self, name, shape, std):
        t = Tensor((self.rng.normal(size=shape) * std).astype(self.dtype),
                   requires_grad=True)
        self.params[name] = t
        return t


def dropout(x, p, rng):
    """Inverted dropout; identity when rng is None (inference) or p == 0."""
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


def sinusoid_positions(n, d_model, dtype):
    """Standard sinusoidal position table (n, d_model), as a constant Tensor."""
    pos = np.arange(n)[:, None].astype(np.float64)
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return Tensor(table.astype(dtype))


def causal_mask(n, dtype):
    """(n, n) additive mask: 0 on and below the diagonal, NEG_INF above."""
    m = np.triu(np.full((n, n), NEG_INF, dtype=dtype), k=1)
    return Tensor(m)


class Linear:
    def __init__(self, store, prefix, d_in, d_out):
        self.w = store.matrix(f"{prefix}.w", (d_in, d_out))
        self.b = store.zeros(f"{prefix}.b", (d_out,))

    def __call__(self, x):
        return add(matmul(x, self.w), self.b)


class LayerNormParams:
    def __init__(self, store, prefix, d):
        self.g = store.ones(f"{prefix}.g", (d,))
        self.b = store.zeros(f"{prefix}.b", (d,))

    def __call__(self, x):
        return layer_norm(x, self.g, self.b)


class MultiHeadAttention:
    def __init__(self, store, prefix, d_model, heads):
        if d_model % heads:
            raise DataError(f"{prefix}: d_model {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = d_model // heads
        self.wq = Linear(store, f"{prefix}.wq", d_model, d_model)
        self.wk = Linear(store, f"{prefix}.wk", d_model, d_model)
        self.wv = Linear(store, f"{prefix}.wv", d_model, d_model)
        self.wo = Linear(store, f"{prefix}.wo", d_model, d_model)

    def __call__(self, query, memory, mask=None, collect=None):
        """Attend query (Nq, d) over memory (Nk, d).

        mask, if given, is an additive (Nq, Nk) constant. collect, if given,
        is a list receiving each head's (Nq, Nk) attention matrix as numpy.
        """
        q_all = self.wq(query)
        k_all = self.wk(memory)
        v_all = self.wv(memory)
        inv = 1.0 / np.sqrt(self.head_dim)
        contexts = []
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            q = slice_(q_all, 1, lo, hi)
            k = slice_(k_all, 1, lo, hi)
            v = slice_(v_all, 1, lo, hi)
            scores = scale(matmul(q, transpose(k)), inv)
            if mask is not None:
                scores = add(scores, mask)
            weights = softmax(scores)
            if collect is not None:
                collect.append(weights.data.copy())
            contexts.append(matmul(weights, v))
        merged = concat(contexts, axis=1)
        return self.wo(merged)


class FeedForward:
    def __init__(self, store, prefix, d_model, d_hidden, activation):
        self.fc1 = Linear(store, f"{prefix}.fc1", d_model, d_hidden)
        self.fc2 = Linear(store, f"{prefix}.fc2", d_hidden, d_model)
        if activation == "relu":
            self.act = relu
        elif activation == "gelu":
            self.act = gelu
        else:
            raise DataError(f"unknown activation {activation!r}")

    def __call__(self, x):
        return self.fc2(self.act(self.fc1(x)))


class EncoderLayer:
    def __init__(self, store, prefix, d_model, heads, d_hidden, activation, p):
        self.ln_attn = LayerNormParams(store, f"{prefix}.ln_attn", d_model)
        self.attn = MultiHeadAttention(store, f"{prefix}.attn", d_model, heads)
        self.ln_ffn = LayerNormParams(store, f"{prefix}.ln_ffn", d_model)
        self.ffn = FeedForward(store, f"{prefix}.ffn", d_model, d_hidden, activation)
        self.p = p

    def __call__(self, x, rng=None, collect=None):
        normed = self.ln_attn(x)
        h = self.attn(normed, normed, collect=collect)
        x = add(x, dropout(h, self.p, rng))
        h = self.ffn(self.ln_ffn(x))
        return add(x, dropout(h, self.p, rng))


class DecoderLayer:
    def __init__(self, store, prefix, d_model, heads, d_hidden, activation, p):
        self.ln_self = LayerNormParams(store, f"{prefix}.ln_self", d_model)
        self.self_attn = MultiHeadAttention(store, f"{prefix}.self", d_model, heads)
        self.ln_cross = LayerNormParams(store, f"{prefix}.ln_cross", d_model)
        self.cross_attn = MultiHeadAttention(store, f"{prefix}.cross", d_model, heads)
        self.ln_ffn = LayerNormParams(store, f"{prefix}.ln_ffn", d_model)
        self.ffn = FeedForward(store, f"{prefix}.ffn", d_model, d_hidden, activation)
        self.p = p

    def __call__(self, x, memory, mask, rng=None, collect_self=None, collect_cross=None):
        normed = self.ln_self(x)
        h = self.self_attn(normed, normed, mask=mask, collect=collect_self)
        x = add(x, dropout(h, self.p, rng))
        h = self.cross_attn(self.ln_cross(x), memory, collect=collect_cross)
        x = add(x, dropout(h, self.p, rng))
        h = self.ffn(self.ln_ffn(x))
        return add(x, dropout(h, self.p, rng))


def embed_ids(table, ids, d_model):
    """Token embeddings scaled by sqrt(d_model), the usual transformer convention."""
    return scale(gather_rows(table, np.asarray(ids, dtype=np.int64)),
                 float(np.sqrt(d_model)))
