"""Plain-numpy reference forward pass, unrolled sub-layer by sub-layer.

Shares no code with the package: heads are looped explicitly and every
formula is written out from the post-LN definition.
"""

import math

import numpy as np
from scipy.special import erf


def ln(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return gain * (x - mu) / np.sqrt(var + eps) + bias


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention(xq, xkv, p, causal=False):
    d = p.head_dim
    out = np.zeros((xq.shape[0], p.model_dim))
    for i in range(p.heads):
        cols = slice(i * d, (i + 1) * d)
        q = xq @ p.w_query.data[:, cols] + p.b_query.data[cols]
        k = xkv @ p.w_key.data[:, cols] + p.b_key.data[cols]
        v = xkv @ p.w_value.data[:, cols] + p.b_value.data[cols]
        s = q @ k.T / math.sqrt(d)
        if causal:
            s = np.where(np.tril(np.ones(s.shape, dtype=bool)), s, -np.inf)
        out += softmax(s) @ v @ p.w_out.data[cols, :]
    return out + p.b_out.data


def ffn(x, p):
    h = x @ p.w_in.data + p.b_in.data
    h = np.maximum(h, 0) if p.activation == "relu" else 0.5 * h * (1 + erf(h / math.sqrt(2)))
    return h @ p.w_out.data + p.b_out.data


def sublayer(sl, x, memory=None, causal=False):
    if sl.kind == "feedforward":
        f = ffn(x, sl.params)
    elif sl.kind == "self-attention":
        f = attention(x, x, sl.params, causal)
    else:
        f = attention(x, memory, sl.params)
    return ln(sl.omega * x + f, sl.norm.gain.data, sl.norm.bias.data, sl.norm.eps)


def encode(model, tokens):
    n = len(tokens)
    x = model.tok_emb.data[tokens] + model.enc_pos.data[:n]
    x = ln(x, model.enc_emb_norm.gain.data, model.enc_emb_norm.bias.data, model.enc_emb_norm.eps)
    for sl in model.encoder:
        x = sublayer(sl, x)
    return x


def decode(model, tokens, memory):
    n = len(tokens)
    table = model.dec_tok_emb if model.dec_tok_emb is not None else model.tok_emb
    x = table.data[tokens] + model.dec_pos.data[:n]
    x = ln(x, model.dec_emb_norm.gain.data, model.dec_emb_norm.bias.data, model.dec_emb_norm.eps)
    for sl in model.decoder:
        x = sublayer(sl, x, memory, causal=True)
    out = model.out_proj if model.out_proj is not None else table
    return x @ out.data.T
