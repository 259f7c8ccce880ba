"""Parameter and inference-cost accounting for model configs.

Conventions
-----------
``built``
    Exactly the scalars :func:`headfold.model.build` materialises: token and
    learned position embeddings, an embedding layer norm per stack, attention
    and FFN weights with biases, one layer norm per sub-layer. Tied models
    share the token table between encoder, decoder and output projection.
``published``
    ``built`` plus, for encoder-only models, BERT's two segment embeddings
    and its pooler (``d_model x d_model`` dense with bias). This is the
    convention behind the published BERT and Transformer-base sizes.

FLOPs count one multiply-accumulate as one FLOP for a single sequence of
length ``seq_len`` (source and target both ``seq_len`` for encoder-decoder
models). Included: Q/K/V/output projections, attention score and context
products, FFN matmuls, and the output head (vocabulary projection of every
target position for encoder-decoder models, the pooler applied to the
first token for encoder-only models). Softmax, layer norm, activations,
bias adds and embedding lookups are not counted.
"""

from __future__ import annotations

from .model import ENCODER_DECODER, ModelConfig

CONVENTIONS = ("published", "built")
SEGMENT_TYPES = 2


def linear_params(n_in: int, n_out: int, bias: bool = True) -> int:
    return n_in * n_out + (n_out if bias else 0)


def linear_macs(tokens: int, n_in: int, n_out: int) -> int:
    return tokens * n_in * n_out


def attention_params(c: ModelConfig) -> int:
    w = c.attn_width
    return 3 * linear_params(c.d_model, w) + linear_params(w, c.d_model)


def ffn_params(c: ModelConfig) -> int:
    return linear_params(c.d_model, c.d_ffn) + linear_params(c.d_ffn, c.d_model)


def layer_norm_params(c: ModelConfig) -> int:
    return 2 * c.d_model


def param_breakdown(c: ModelConfig, convention: str = "published") -> dict[str, int]:
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}; expected one of {CONVENTIONS}")
    ln = layer_norm_params(c)
    parts = {
        "token_embeddings": c.vocab * c.d_model,
        "position_embeddings": c.max_pos * c.d_model,
        "embedding_norms": ln,
        "encoder": c.enc_layers * (attention_params(c) + ffn_params(c) + 2 * ln),
        "decoder": 0,
        "output_projection": 0,
        "segment_embeddings": 0,
        "pooler": 0,
    }
    if c.kind == ENCODER_DECODER:
        parts["position_embeddings"] *= 2
        parts["embedding_norms"] *= 2
        parts["decoder"] = c.dec_layers * (2 * attention_params(c) + ffn_params(c) + 3 * ln)
        if not c.tie_embeddings:
            parts["token_embeddings"] *= 2
    if not c.tie_embeddings:
        parts["output_projection"] = c.vocab * c.d_model
    if convention == "published" and c.kind != ENCODER_DECODER:
        parts["segment_embeddings"] = SEGMENT_TYPES * c.d_model
        parts["pooler"] = linear_params(c.d_model, c.d_model)
    return parts


def count_params(c: ModelConfig, convention: str = "published") -> int:
    """Learnable scalar count of ``c`` under ``convention``."""
    return sum(param_breakdown(c, convention).values())


def _attention_macs(c: ModelConfig, n_t: int, n_s: int) -> int:
    w = c.attn_width
    proj = linear_macs(n_t, c.d_model, w) + 2 * linear_macs(n_s, c.d_model, w) + linear_macs(n_t, w, c.d_model)
    return proj + 2 * n_t * n_s * w


def _ffn_macs(c: ModelConfig, n: int) -> int:
    return linear_macs(n, c.d_model, c.d_ffn) + linear_macs(n, c.d_ffn, c.d_model)


def flop_breakdown(c: ModelConfig, seq_len: int) -> dict[str, int]:
    if seq_len < 1:
        raise ValueError("seq_len must be at least 1")
    n = seq_len
    parts = {"encoder": c.enc_layers * (_attention_macs(c, n, n) + _ffn_macs(c, n))}
    if c.kind == ENCODER_DECODER:
        parts["decoder"] = c.dec_layers * (2 * _attention_macs(c, n, n) + _ffn_macs(c, n))
        parts["output_head"] = linear_macs(n, c.d_model, c.vocab)
    else:
        parts["decoder"] = 0
        parts["output_head"] = linear_macs(1, c.d_model, c.d_model)
    return parts


def count_flops(c: ModelConfig, seq_len: int = 512) -> int:
    """Inference multiply-accumulates for one length-``seq_len`` sequence."""
    return sum(flop_breakdown(c, seq_len).values())
