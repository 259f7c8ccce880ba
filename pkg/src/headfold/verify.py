"""Numerical self-checks: the head-sum and FFN-split identities, and gradients.

Each check evaluates a quantity two ways and reports the largest residual.
The suites here back the ``headfold verify`` command.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .layers import (
    AttentionParams,
    FfnParams,
    LayerNormParams,
    causal_mask,
    decompose_attention,
    ffn_forward,
    general_attention,
    layer_norm,
    multi_head_attention,
    split_ffn,
)
from .model import build, decoder_forward, encoder_forward, parse_shorthand
from .rng import RngStream
from .tensor import Tensor, add, grad_check, mul

STREAM_VERIFY = 5

HEAD_COUNTS = (1, 2, 4, 8)
MODEL_WIDTHS = (8, 16, 64)
SEQ_LENGTHS = (1, 3, 17)
FFN_WIDTHS = (16, 64, 256)

DEFAULT_TOLERANCES = {"attention": 1e-9, "ffn": 1e-11, "gradient": 1e-6}


def _mat(rng: RngStream, rows: int, cols: int) -> Tensor:
    return Tensor(rng.normal((rows, cols), 1.0 / math.sqrt(rows)))


def random_attention(rng: RngStream, m: int, heads: int, d_head: int | None = None, bias: bool = False) -> AttentionParams:
    d = d_head if d_head is not None else m // heads
    w = heads * d
    b = [Tensor(rng.normal((n,), 0.1)) for n in (w, w, w, m)] if bias else [None] * 4
    return AttentionParams(_mat(rng, m, w), _mat(rng, m, w), _mat(rng, m, w), _mat(rng, w, m), heads, *b)


def random_ffn(rng: RngStream, m: int, d_ffn: int, activation: str = "relu", bias: bool = False) -> FfnParams:
    b_in = Tensor(rng.normal((d_ffn,), 0.1)) if bias else None
    b_out = Tensor(rng.normal((m,), 0.1)) if bias else None
    return FfnParams(_mat(rng, m, d_ffn), _mat(rng, d_ffn, m), activation, b_in, b_out)


def attention_residual(heads: int, m: int, n: int, seed: int) -> float:
    """Relative gap between multi-head attention and its sum of general attentions."""
    if m % heads:
        raise ValueError(f"{heads} heads do not divide d_model={m}")
    rng = RngStream(seed, STREAM_VERIFY)
    p = random_attention(rng, m, heads)
    q = Tensor(rng.normal((n, m)))
    kv = Tensor(rng.normal((n + 2, m)))
    whole = multi_head_attention(q, kv, kv, p).data
    parts = sum(general_attention(q, kv, kv, g).data for g in decompose_attention(p))
    return float(np.max(np.abs(whole - parts)) / max(np.max(np.abs(whole)), np.finfo(float).tiny))


def ffn_residual(d_ffn: int, parts: int, seed: int, m: int = 16, n: int = 5) -> float:
    """Absolute gap between an FFN and the sum of its ``parts`` hidden-width blocks."""
    rng = RngStream(seed, STREAM_VERIFY)
    p = random_ffn(rng, m, d_ffn, bias=False)
    x = Tensor(rng.normal((n, m)))
    whole = ffn_forward(x, p).data
    total = sum(ffn_forward(x, piece).data for piece in split_ffn(p, parts))
    return float(np.max(np.abs(whole - total)))


def divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def gradient_errors(seed: int, eps: float = 1e-5) -> dict[str, float]:
    """Finite-difference errors for every sub-layer kind and a tiny full model."""
    rng = RngStream(seed, STREAM_VERIFY + 1)
    m, n = 6, 4
    x = Tensor(rng.normal((n, m)))
    mem = Tensor(rng.normal((n + 1, m)))
    probe = Tensor(rng.normal((n, m)))
    att = random_attention(rng, m, 2, bias=True)
    ffn_relu = random_ffn(rng, m, 8, "relu", bias=True)
    ffn_gelu = random_ffn(rng, m, 8, "gelu", bias=True)
    norm = LayerNormParams(Tensor(rng.uniform(0.5, 1.5, (m,))), Tensor(rng.normal((m,), 0.1)))
    # keep relu inputs off the kink
    pre = x.data @ ffn_relu.w_in.data + ffn_relu.b_in.data
    ffn_relu.b_in.data[np.abs(pre).min(axis=0) < 1e-3] += 0.1

    def weighted(t: Tensor) -> Tensor:
        return mul(t, probe).sum()

    errors = {
        "self-attention": grad_check(
            lambda xx, *_: weighted(multi_head_attention(xx, xx, xx, att, causal_mask(n))),
            [x, *att.tensors().values()],
            eps,
        ),
        "encoder-decoder-attention": grad_check(
            lambda xx, mm, *_: weighted(multi_head_attention(xx, mm, mm, att)),
            [Tensor(x.data.copy()), mem, *att.tensors().values()],
            eps,
        ),
        "feedforward-relu": grad_check(
            lambda xx, *_: weighted(ffn_forward(xx, ffn_relu)), [Tensor(x.data.copy()), *ffn_relu.tensors().values()], eps
        ),
        "feedforward-gelu": grad_check(
            lambda xx, *_: weighted(ffn_forward(xx, ffn_gelu)), [Tensor(x.data.copy()), *ffn_gelu.tensors().values()], eps
        ),
        "residual-layer-norm": grad_check(
            lambda xx, g, b: weighted(layer_norm(add(mul(xx, 1.5), xx), LayerNormParams(g, b))),
            [Tensor(x.data.copy()), norm.gain, norm.bias],
            eps,
        ),
    }

    config = parse_shorthand("2H-1L-1L", "desk", d_model=4, d_head=2, d_ffn=6, vocab=7, max_pos=5)
    model = build(config, rng=RngStream(seed, STREAM_VERIFY + 2))
    for sl in model.sublayers():
        sl.norm.gain.data[:] = rng.uniform(0.5, 1.5, sl.norm.gain.shape)
        sl.norm.bias.data[:] = rng.normal(sl.norm.bias.shape, 0.1)
    # unit-scale embeddings keep the embedding norm out of its high-curvature regime
    for table in (model.tok_emb, model.enc_pos, model.dec_pos):
        table.data[:] = rng.normal(table.shape)
    src = rng.integers(4, config.vocab, (3,))
    tgt = rng.integers(4, config.vocab, (2,))
    enc_probe = Tensor(rng.normal((3, config.d_model)))
    dec_probe = Tensor(rng.normal((2, config.vocab)))
    params = list(model.parameters().values())
    enc_params = [t for k, t in model.parameters().items() if not k.startswith("dec")]
    errors["encoder"] = grad_check(lambda *_: mul(encoder_forward(model, src), enc_probe).sum(), enc_params, eps)
    errors["encoder-decoder"] = grad_check(
        lambda *_: mul(decoder_forward(model, tgt, encoder_forward(model, src)), dec_probe).sum(), params, eps
    )
    return errors


@dataclass
class Check:
    name: str
    worst: float
    tolerance: float
    cases: int

    @property
    def passed(self) -> bool:
        return bool(self.worst <= self.tolerance)

    def line(self) -> str:
        flag = "ok  " if self.passed else "FAIL"
        return f"{flag} {self.name:<36} max residual {self.worst:.3e}  tol {self.tolerance:.1e}  ({self.cases} cases)"


@dataclass
class SuiteReport:
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [
                {"name": c.name, "max_residual": c.worst, "tolerance": c.tolerance, "cases": c.cases, "passed": c.passed}
                for c in self.checks
            ],
        }


def attention_suite(heads=HEAD_COUNTS, widths=MODEL_WIDTHS, lengths=SEQ_LENGTHS, seeds=range(20), tol=1e-9) -> Check:
    worst, cases = 0.0, 0
    for h in heads:
        for m in widths:
            for n in lengths:
                for s in seeds:
                    worst = max(worst, attention_residual(h, m, n, s))
                    cases += 1
    return Check("head-sum identity", worst, tol, cases)


def ffn_suite(ffn_widths=FFN_WIDTHS, seeds=range(20), tol=1e-11) -> Check:
    worst, cases = 0.0, 0
    for d in ffn_widths:
        for parts in divisors(d):
            for s in seeds:
                worst = max(worst, ffn_residual(d, parts, s))
                cases += 1
    return Check("ffn-split identity", worst, tol, cases)


def gradient_suite(seeds=range(10), tol=1e-6) -> list[Check]:
    per_name: dict[str, list[float]] = {}
    for s in seeds:
        for name, err in gradient_errors(s).items():
            per_name.setdefault(name, []).append(err)
    return [Check(f"gradient {name}", max(errs), tol, len(errs)) for name, errs in per_name.items()]


def run_suite(
    heads=HEAD_COUNTS,
    widths=MODEL_WIDTHS,
    lengths=SEQ_LENGTHS,
    ffn_widths=FFN_WIDTHS,
    seeds=range(20),
    grad_seeds=range(10),
    tolerances: dict | None = None,
) -> SuiteReport:
    tol = {**DEFAULT_TOLERANCES, **(tolerances or {})}
    report = SuiteReport()
    report.checks.append(attention_suite(heads, widths, lengths, seeds, tol["attention"]))
    report.checks.append(ffn_suite(ffn_widths, seeds, tol["ffn"]))
    report.checks.extend(gradient_suite(grad_seeds, tol["gradient"]))
    return report
