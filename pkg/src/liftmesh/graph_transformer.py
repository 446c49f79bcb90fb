"""
Graph-transformer building blocks.

A block runs a graph convolution over the skeleton adjacency, then multi-head
self-attention and a feed-forward layer, each wrapped in a residual connection
and layer normalization. ``parallel_fuse`` splits the feature width across
several narrow block stacks and concatenates their outputs.

All functions accept unbatched (N×D) or batched (B×N×D) inputs.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError, ContractViolation
from .tensor_core import (Tensor, concat, dropout, gelu, layer_norm, matmul,
                          softmax_rows, transpose)

logger = logging.getLogger(__name__)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)))


@dataclass(frozen=True)
class GtBlockParams:
    """Weights of one graph-transformer block."""

    gcn_weight: Tensor
    q: Tuple[Tensor, ...]
    k: Tuple[Tensor, ...]
    v: Tuple[Tensor, ...]
    w_out: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def __post_init__(self):
        d = self.dim
        if not (len(self.q) == len(self.k) == len(self.v) >= 1):
            raise ContractViolation("q, k and v need the same number of heads (>= 1)")
        for proj in (*self.q, *self.k, *self.v):
            if proj.dims != (d, self.head_dim):
                raise ContractViolation(
                    f"head projection dims {proj.dims} != ({d}, {self.head_dim})"
                )
        if self.w_out.dims != (self.heads * self.head_dim, d):
            raise ContractViolation(
                f"w_out dims {self.w_out.dims} != ({self.heads * self.head_dim}, {d})"
            )
        if self.heads * self.head_dim != d:
            raise ContractViolation(
                f"heads·head_dim = {self.heads * self.head_dim} must equal D = {d}"
            )
        d_ff = self.ffn_w1.dims[1]
        expected = {
            "ffn_w1": (d, d_ff), "ffn_b1": (d_ff,), "ffn_w2": (d_ff, d), "ffn_b2": (d,),
            "ln1_gain": (d,), "ln1_bias": (d,), "ln2_gain": (d,), "ln2_bias": (d,),
        }
        for name, dims in expected.items():
            if getattr(self, name).dims != dims:
                raise ContractViolation(
                    f"{name} dims {getattr(self, name).dims} != {dims}"
                )

    @property
    def dim(self) -> int:
        return self.gcn_weight.dims[1]

    @property
    def input_dim(self) -> int:
        return self.gcn_weight.dims[0]

    @property
    def heads(self) -> int:
        return len(self.q)

    @property
    def head_dim(self) -> int:
        return self.q[0].dims[1]

    def to_named(self, prefix: str) -> Dict[str, Tensor]:
        named = {f"{prefix}.gcn_weight": self.gcn_weight}
        for i in range(self.heads):
            named[f"{prefix}.q.{i}"] = self.q[i]
            named[f"{prefix}.k.{i}"] = self.k[i]
            named[f"{prefix}.v.{i}"] = self.v[i]
        named.update({
            f"{prefix}.w_out": self.w_out,
            f"{prefix}.ffn.w1": self.ffn_w1,
            f"{prefix}.ffn.b1": self.ffn_b1,
            f"{prefix}.ffn.w2": self.ffn_w2,
            f"{prefix}.ffn.b2": self.ffn_b2,
            f"{prefix}.ln1.gain": self.ln1_gain,
            f"{prefix}.ln1.bias": self.ln1_bias,
            f"{prefix}.ln2.gain": self.ln2_gain,
            f"{prefix}.ln2.bias": self.ln2_bias,
        })
        return named

    @classmethod
    def from_named(cls, named: Mapping[str, Tensor], prefix: str) -> "GtBlockParams":
        heads = 0
        while f"{prefix}.q.{heads}" in named:
            heads += 1
        try:
            return cls(
                gcn_weight=named[f"{prefix}.gcn_weight"],
                q=tuple(named[f"{prefix}.q.{i}"] for i in range(heads)),
                k=tuple(named[f"{prefix}.k.{i}"] for i in range(heads)),
                v=tuple(named[f"{prefix}.v.{i}"] for i in range(heads)),
                w_out=named[f"{prefix}.w_out"],
                ffn_w1=named[f"{prefix}.ffn.w1"],
                ffn_b1=named[f"{prefix}.ffn.b1"],
                ffn_w2=named[f"{prefix}.ffn.w2"],
                ffn_b2=named[f"{prefix}.ffn.b2"],
                ln1_gain=named[f"{prefix}.ln1.gain"],
                ln1_bias=named[f"{prefix}.ln1.bias"],
                ln2_gain=named[f"{prefix}.ln2.gain"],
                ln2_bias=named[f"{prefix}.ln2.bias"],
            )
        except KeyError as e:
            raise ContractViolation(f"Missing block tensor {e.args[0]}")


def init_block_params(
    d_in: int, d: int, heads: int, d_ff: int, rng: np.random.Generator
) -> GtBlockParams:
    """Xavier-uniform weights, unit layer-norm gains, zero biases."""
    if d % heads:
        raise ConfigError(f"heads={heads} does not divide block dim {d}")
    d_k = d // heads
    q, k, v = [], [], []
    for _ in range(heads):
        q.append(xavier_uniform(rng, d, d_k))
        k.append(xavier_uniform(rng, d, d_k))
        v.append(xavier_uniform(rng, d, d_k))
    return GtBlockParams(
        gcn_weight=xavier_uniform(rng, d_in, d),
        q=tuple(q),
        k=tuple(k),
        v=tuple(v),
        w_out=xavier_uniform(rng, heads * d_k, d),
        ffn_w1=xavier_uniform(rng, d, d_ff),
        ffn_b1=Tensor(np.zeros(d_ff)),
        ffn_w2=xavier_uniform(rng, d_ff, d),
        ffn_b2=Tensor(np.zeros(d)),
        ln1_gain=Tensor(np.ones(d)),
        ln1_bias=Tensor(np.zeros(d)),
        ln2_gain=Tensor(np.ones(d)),
        ln2_bias=Tensor(np.zeros(d)),
    )


def gcn_layer(x: Tensor, adjacency: Tensor, weight: Tensor) -> Tensor:
    """GELU(Â·X·W) over the joint graph."""
    if x.ndim < 2 or x.dims[-2] != adjacency.dims[-1]:
        raise ContractViolation(
            f"gcn_layer: {x.dims} rows do not match adjacency {adjacency.dims}"
        )
    if x.dims[-1] != weight.dims[0]:
        raise ContractViolation(
            f"gcn_layer: feature dim {x.dims[-1]} does not match weight {weight.dims}"
        )
    return gelu(matmul(matmul(adjacency, x), weight))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q·Kᵀ/√d)·V."""
    if q.dims[-1] != k.dims[-1]:
        raise ContractViolation(f"attention: q {q.dims} and k {k.dims} widths differ")
    if k.dims[-2] != v.dims[-2]:
        raise ContractViolation(f"attention: k {k.dims} and v {v.dims} lengths differ")
    scores = matmul(q, transpose(k)) / math.sqrt(q.dims[-1])
    return matmul(softmax_rows(scores), v)


def multi_head_self_attention(x: Tensor, params: GtBlockParams) -> Tensor:
    """Concat(H_1..H_h)·W_out with H_i = attention(X·Q_i, X·K_i, X·V_i)."""
    if x.dims[-1] != params.dim:
        raise ContractViolation(f"MSA: input width {x.dims[-1]} != block dim {params.dim}")
    heads = [
        scaled_dot_attention(matmul(x, q), matmul(x, k), matmul(x, v))
        for q, k, v in zip(params.q, params.k, params.v)
    ]
    return matmul(concat(heads, axis=-1), params.w_out)


def gt_block_forward(
    x: Tensor,
    adjacency: Tensor,
    params: GtBlockParams,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
) -> Tensor:
    """GCN, then attention and feed-forward sublayers with residual + layer norm."""
    y1 = gcn_layer(x, adjacency, params.gcn_weight)
    attended = dropout(multi_head_self_attention(y1, params), dropout_rate, rng)
    y2 = layer_norm(y1 + attended, params.ln1_gain, params.ln1_bias)
    hidden = dropout(
        gelu(matmul(y2, params.ffn_w1) + params.ffn_b1), dropout_rate, rng
    )
    ffn = matmul(hidden, params.ffn_w2) + params.ffn_b2
    return layer_norm(y2 + ffn, params.ln2_gain, params.ln2_bias)


def run_block_stack(
    x: Tensor,
    adjacency: Tensor,
    blocks: Sequence[GtBlockParams],
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
) -> Tensor:
    for block in blocks:
        x = gt_block_forward(x, adjacency, block, rng, dropout_rate)
    return x


def parallel_fuse(
    x: Tensor,
    adjacency: Tensor,
    split_weights: Sequence[Tensor],
    branches: Sequence[Sequence[GtBlockParams]],
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
) -> Tensor:
    """Project into B narrow branches, run each stack, concatenate features."""
    n_branches = len(branches)
    width = x.dims[-1]
    if n_branches < 1 or width % n_branches:
        raise ConfigError(f"{n_branches} branches do not divide feature width {width}")
    if len(split_weights) != n_branches:
        raise ContractViolation(
            f"{len(split_weights)} split projections for {n_branches} branches"
        )
    outputs = []
    for split, blocks in zip(split_weights, branches):
        if split.dims != (width, width // n_branches):
            raise ContractViolation(
                f"split projection dims {split.dims} != ({width}, {width // n_branches})"
            )
        outputs.append(
            run_block_stack(matmul(x, split), adjacency, blocks, rng, dropout_rate)
        )
    return concat(outputs, axis=-1)
