"""Neural building blocks: dense layers, normalization, convolution and graph attention.

Layers register their weights in a shared ``ParamStore`` under a dotted
prefix and keep references to them, so loading a checkpoint into the store
updates every layer in place.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from errors import ConfigurationError, DimensionError
from numerics import (
    DenseArray, ParamStore, as_dense, conv2d, forward_linear, gather_rows, reduce_mean, reduce_sum,
    reshape, scatter_add, segment_softmax, silu, sqrt, square,
)

logger = logging.getLogger(__name__)


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator, bias: bool = True):
        self.weight = store.add(f"{name}.weight", uniform_init(rng, in_dim, (in_dim, out_dim)))
        self.bias = store.add(f"{name}.bias", np.zeros(out_dim)) if bias else None

    def __call__(self, x) -> DenseArray:
        return forward_linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-5):
        self.gain = store.add(f"{name}.gain", np.ones(dim))
        self.shift = store.add(f"{name}.shift", np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> DenseArray:
        x = as_dense(x)
        centered = x - reduce_mean(x, axis=-1, keepdims=True)
        variance = reduce_mean(square(centered), axis=-1, keepdims=True)
        return centered / sqrt(variance + self.eps) * self.gain + self.shift


class MLP:
    """Linear -> SiLU -> Linear"""

    def __init__(self, store: ParamStore, name: str, in_dim: int, hidden_dim: int, out_dim: int,
                 rng: np.random.Generator):
        self.hidden = Linear(store, f"{name}.hidden", in_dim, hidden_dim, rng)
        self.output = Linear(store, f"{name}.output", hidden_dim, out_dim, rng)

    def __call__(self, x) -> DenseArray:
        return self.output(silu(self.hidden(x)))


class Conv2d:
    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int,
                 kernel: tuple, rng: np.random.Generator):
        kl, kw = kernel
        fan_in = in_channels * kl * kw
        self.weight = store.add(f"{name}.weight", uniform_init(rng, fan_in, (out_channels, in_channels, kl, kw)))
        self.bias = store.add(f"{name}.bias", np.zeros(out_channels))

    def __call__(self, x) -> DenseArray:
        return conv2d(x, self.weight, self.bias)


@dataclass
class EdgeSet:
    """Directed edges src -> dst with optional per-edge features [E, C]"""

    src: np.ndarray
    dst: np.ndarray
    features: Optional[Union[np.ndarray, DenseArray]] = None

    def __len__(self) -> int:
        return int(self.src.shape[0])

    @classmethod
    def empty(cls, num_features: int = 0) -> "EdgeSet":
        features = np.zeros((0, num_features)) if num_features else None
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), features)


class GraphAttention:
    """Multi-head dot-product attention over an edge list.

    Pre-normalized queries attend over their incoming edges; keys and values
    come from the (normalized) source rows plus the edge embedding. The block
    adds the attended message and a feed-forward update residually.
    Destinations without incoming edges are returned unchanged.
    """

    def __init__(self, store: ParamStore, name: str, dim: int, num_heads: int,
                 rng: np.random.Generator, self_attention: bool = False):
        if dim % num_heads:
            raise ConfigurationError(f"hidden size {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.self_attention = self_attention
        self.norm_query = LayerNorm(store, f"{name}.norm_query", dim)
        self.norm_source = None if self_attention else LayerNorm(store, f"{name}.norm_source", dim)
        self.to_query = Linear(store, f"{name}.to_query", dim, dim, rng)
        self.to_key = Linear(store, f"{name}.to_key", dim, dim, rng)
        self.to_value = Linear(store, f"{name}.to_value", dim, dim, rng)
        self.to_out = Linear(store, f"{name}.to_out", dim, dim, rng)
        self.norm_ffn = LayerNorm(store, f"{name}.norm_ffn", dim)
        self.ffn = MLP(store, f"{name}.ffn", dim, 2 * dim, dim, rng)

    def __call__(self, queries: DenseArray, sources: Optional[DenseArray], src: np.ndarray, dst: np.ndarray,
                 edge_emb: Optional[DenseArray] = None) -> DenseArray:
        queries = as_dense(queries)
        if queries.ndim != 2 or queries.shape[1] != self.dim:
            raise DimensionError(f"attention expects queries [rows, {self.dim}], got {queries.shape}")
        if len(src) == 0:
            return queries
        num_rows = queries.shape[0]
        num_edges = len(src)
        h = self.norm_query(queries)
        base = h if self.self_attention else self.norm_source(as_dense(sources))
        kv = gather_rows(base, src)
        if edge_emb is not None:
            kv = kv + edge_emb
        q = gather_rows(self.to_query(h), dst)
        k = self.to_key(kv)
        v = self.to_value(kv)
        split = (num_edges, self.num_heads, self.head_dim)
        scores = reduce_sum(reshape(q * k, split), axis=-1) * (1.0 / math.sqrt(self.head_dim))
        alpha = segment_softmax(scores, dst, num_rows)
        message = reshape(reshape(v, split) * reshape(alpha, (num_edges, self.num_heads, 1)), (num_edges, self.dim))
        updated = queries + self.to_out(scatter_add(message, dst, num_rows))
        updated = updated + self.ffn(self.norm_ffn(updated))
        has_edge = np.zeros((num_rows, 1))
        has_edge[dst] = 1.0
        return queries + (updated - queries) * has_edge


class EdgeAttention:
    """Graph attention whose keys and values carry an embedded edge feature"""

    def __init__(self, store: ParamStore, name: str, dim: int, num_heads: int, edge_features: int,
                 rng: np.random.Generator, self_attention: bool = False):
        self.edge_mlp = MLP(store, f"{name}.edge", edge_features, dim, dim, rng) if edge_features else None
        self.attention = GraphAttention(store, f"{name}.attn", dim, num_heads, rng, self_attention=self_attention)

    def __call__(self, queries: DenseArray, sources: Optional[DenseArray], edges: EdgeSet) -> DenseArray:
        if len(edges) == 0:
            return as_dense(queries)
        edge_emb = None
        if self.edge_mlp is not None:
            edge_emb = self.edge_mlp(edges.features)
        return self.attention(queries, sources, edges.src, edges.dst, edge_emb)
