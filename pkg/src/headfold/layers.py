"""Transformer sub-layer primitives and their exact ensemble decompositions.

Multi-head attention is written two ways here. ``multi_head_attention``
is the usual batched computation; ``decompose_attention`` rewrites the same
weights as ``h`` general attentions ``softmax(Q W1 K^T) V W2`` whose
score and value matrices have rank at most ``d_head``. Summing those
general attentions reproduces the multi-head output. ``split_ffn`` does
the same for the feedforward block by cutting the hidden layer into
column/row blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    add,
    gelu,
    layer_norm as _layer_norm,
    matmul,
    relu,
    reshape,
    softmax_rows,
    swapaxes,
)

ACTIVATIONS = {"relu": relu, "gelu": gelu}


class SplitError(ValueError):
    """The requested split does not divide the layer evenly."""


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if self.gain.shape != self.bias.shape or self.gain.ndim != 1:
            raise DimensionError(f"gain {self.gain.shape} and bias {self.bias.shape} must be equal 1-D")
        if not self.eps > 0:
            raise ValueError("layer norm epsilon must be positive")

    @classmethod
    def identity(cls, width: int, eps: float = 1e-5) -> "LayerNormParams":
        return cls(Tensor(np.ones(width), requires_grad=True), Tensor(np.zeros(width), requires_grad=True), eps)


@dataclass
class AttentionParams:
    """Projection weights for ``heads`` attention heads.

    ``w_query``, ``w_key`` and ``w_value`` have shape ``(m, heads * d_head)``;
    columns ``[i*d_head, (i+1)*d_head)`` are head ``i``'s projection.
    ``w_out`` has shape ``(heads * d_head, m)`` and its matching row block is
    head ``i``'s slice of the output projection. Biases are optional.
    """

    w_query: Tensor
    w_key: Tensor
    w_value: Tensor
    w_out: Tensor
    heads: int
    b_query: Tensor | None = None
    b_key: Tensor | None = None
    b_value: Tensor | None = None
    b_out: Tensor | None = None

    def __post_init__(self):
        m, inner = self.w_query.shape
        if self.heads < 1 or inner % self.heads:
            raise SplitError(f"projection width {inner} is not divisible by {self.heads} heads")
        for name in ("w_key", "w_value"):
            if getattr(self, name).shape != (m, inner):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(m, inner)}")
        if self.w_out.shape != (inner, m):
            raise DimensionError(f"w_out has shape {self.w_out.shape}, expected {(inner, m)}")

    @property
    def model_dim(self) -> int:
        return self.w_query.shape[0]

    @property
    def head_dim(self) -> int:
        return self.w_query.shape[1] // self.heads

    def _cols(self, w: Tensor, i: int) -> np.ndarray:
        d = self.head_dim
        return w.data[:, i * d : (i + 1) * d]

    def query_block(self, i: int) -> np.ndarray:
        return self._cols(self.w_query, i)

    def key_block(self, i: int) -> np.ndarray:
        return self._cols(self.w_key, i)

    def value_block(self, i: int) -> np.ndarray:
        return self._cols(self.w_value, i)

    def out_block(self, i: int) -> np.ndarray:
        d = self.head_dim
        return self.w_out.data[i * d : (i + 1) * d, :]

    def has_bias(self) -> bool:
        return any(
            b is not None and np.any(b.data != 0)
            for b in (self.b_query, self.b_key, self.b_value, self.b_out)
        )

    def tensors(self) -> dict[str, Tensor]:
        out = {"w_query": self.w_query, "w_key": self.w_key, "w_value": self.w_value, "w_out": self.w_out}
        for name in ("b_query", "b_key", "b_value", "b_out"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out


@dataclass
class GeneralAttentionParams:
    """Full-width score matrix ``w_score`` and value-output matrix ``w_value_out``."""

    w_score: Tensor
    w_value_out: Tensor

    def __post_init__(self):
        m = self.w_score.shape[0]
        if self.w_score.shape != (m, m) or self.w_value_out.shape != (m, m):
            raise DimensionError(
                f"general attention needs square matrices, got {self.w_score.shape} and {self.w_value_out.shape}"
            )


@dataclass
class FfnParams:
    w_in: Tensor
    w_out: Tensor
    activation: str = "relu"
    b_in: Tensor | None = None
    b_out: Tensor | None = None

    def __post_init__(self):
        if self.w_in.ndim != 2 or self.w_out.ndim != 2 or self.w_in.shape[1] != self.w_out.shape[0]:
            raise DimensionError(f"ffn inner dimensions disagree: {self.w_in.shape} and {self.w_out.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def hidden_dim(self) -> int:
        return self.w_in.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        out = {"w_in": self.w_in, "w_out": self.w_out}
        if self.b_in is not None:
            out["b_in"] = self.b_in
        if self.b_out is not None:
            out["b_out"] = self.b_out
        return out


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    return _layer_norm(x, p.gain, p.bias, p.eps)


def _linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, return_weights=False):
    """``softmax(q k^T / sqrt(d)) v`` with ``d = q.shape[-1]``.

    ``mask[t, s]`` is True where target row ``t`` may attend to source ``s``.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = softmax_rows(scores, mask)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, width = x.shape
    x = reshape(x, (*lead, n, heads, width // heads))
    return swapaxes(x, -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = swapaxes(x, -3, -2)
    *lead, n, heads, d = x.shape
    return reshape(x, (*lead, n, heads * d))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, p: AttentionParams, mask=None, return_weights=False):
    """``[head_1; ...; head_h] W_out`` with per-head scale ``1/sqrt(d_head)``.

    Inputs may carry a leading batch axis. With ``return_weights`` the
    per-head attention probabilities (shape ``(..., h, n_t, n_s)``) are
    returned alongside the output.
    """
    if q.shape[-1] != p.model_dim or k.shape[-1] != p.model_dim or v.shape[-1] != p.model_dim:
        raise DimensionError(f"inputs must have width {p.model_dim}: got {q.shape}, {k.shape}, {v.shape}")
    qh = _split_heads(_linear(q, p.w_query, p.b_query), p.heads)
    kh = _split_heads(_linear(k, p.w_key, p.b_key), p.heads)
    vh = _split_heads(_linear(v, p.w_value, p.b_value), p.heads)
    ctx, weights = scaled_dot_product_attention(qh, kh, vh, mask, return_weights=True)
    out = _linear(_merge_heads(ctx), p.w_out, p.b_out)
    return (out, weights) if return_weights else out


def decompose_attention(p: AttentionParams) -> list[GeneralAttentionParams]:
    """Per-head general-attention factors.

    Head ``i`` becomes ``W1_i = Wq_i Wk_i^T / sqrt(d_head)`` and
    ``W2_i = Wv_i Wo_i``; both are ``m x m`` with rank at most ``d_head``.
    """
    if p.has_bias():
        raise ValueError("decomposition into general attentions requires bias-free projections")
    scale = 1.0 / math.sqrt(p.head_dim)
    parts = []
    for i in range(p.heads):
        w1 = p.query_block(i) @ p.key_block(i).T * scale
        w2 = p.value_block(i) @ p.out_block(i)
        parts.append(GeneralAttentionParams(Tensor(w1), Tensor(w2)))
    return parts


def general_attention(q: Tensor, k: Tensor, v: Tensor, g: GeneralAttentionParams, mask=None) -> Tensor:
    """``softmax(q W1 k^T) v W2`` (no implicit scaling)."""
    m = g.w_score.shape[0]
    if q.shape[-1] != m or k.shape[-1] != m or v.shape[-1] != m:
        raise DimensionError(f"inputs must have width {m}: got {q.shape}, {k.shape}, {v.shape}")
    scores = matmul(matmul(q, g.w_score), swapaxes(k, -1, -2))
    weights = softmax_rows(scores, mask)
    return matmul(matmul(weights, v), g.w_value_out)


def ffn_forward(x: Tensor, p: FfnParams) -> Tensor:
    """``phi(x W_in) W_out`` (plus biases when the params carry them)."""
    if x.shape[-1] != p.w_in.shape[0] or p.w_out.shape[1] != p.w_in.shape[0]:
        raise DimensionError(f"ffn expects width {p.w_in.shape[0]}, got input {x.shape}")
    hidden = ACTIVATIONS[p.activation](_linear(x, p.w_in, p.b_in))
    return _linear(hidden, p.w_out, p.b_out)


def split_ffn(p: FfnParams, h: int) -> list[FfnParams]:
    """Cut the hidden layer into ``h`` equal blocks whose outputs sum to the original."""
    if p.b_out is not None and np.any(p.b_out.data != 0):
        raise ValueError("an output bias cannot be shared across split parts")
    if h < 1 or p.hidden_dim % h:
        raise SplitError(f"hidden width {p.hidden_dim} is not divisible into {h} parts")
    if h == 1:
        return [p]
    w = p.hidden_dim // h
    parts = []
    for i in range(h):
        cols = slice(i * w, (i + 1) * w)
        parts.append(
            FfnParams(
                Tensor(p.w_in.data[:, cols]),
                Tensor(p.w_out.data[cols, :]),
                p.activation,
                None if p.b_in is None else Tensor(p.b_in.data[cols]),
            )
        )
    return parts


def causal_mask(n: int) -> np.ndarray:
    """Lower-triangular boolean mask: row ``t`` sees columns ``<= t``."""
    return np.tril(np.ones((n, n), dtype=bool))
