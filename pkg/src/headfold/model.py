"""Post-LN encoder and encoder-decoder stacks, and shallow-to-deep reconstruction.

Every sub-layer computes ``LN(omega * x + f(x))`` where ``f`` is
self-attention, encoder-decoder attention or the feedforward block, and
``omega`` is 1 for a vanilla model (Admin sets it from profiled variances).
Sub-layers are indexed across the whole model: the encoder's ``2 * enc_layers``
come first, then the decoder's ``3 * dec_layers``.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .initialization import ConfigError, InitSpec, draw_embedding, draw_matrix
from .layers import (
    AttentionParams,
    FfnParams,
    LayerNormParams,
    causal_mask,
    ffn_forward,
    layer_norm,
    multi_head_attention,
)
from .rng import STREAM_INIT, RngStream
from .tensor import Tensor, add, embedding, matmul, mul, no_grad, swapaxes

ENCODER_ONLY = "encoder-only"
ENCODER_DECODER = "encoder-decoder"

SELF_ATTENTION = "self-attention"
CROSS_ATTENTION = "encoder-decoder-attention"
FEEDFORWARD = "feedforward"


class InputError(ValueError):
    """Token ids or sequence lengths outside what the model supports."""


class ReconstructionError(ValueError):
    """The feedforward width cannot be split across the heads."""


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    heads: int
    enc_layers: int
    dec_layers: int
    d_model: int
    d_head: int
    d_ffn: int
    vocab: int
    max_pos: int
    activation: str = "relu"
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.kind not in (ENCODER_ONLY, ENCODER_DECODER):
            raise ConfigError(f"kind must be {ENCODER_ONLY!r} or {ENCODER_DECODER!r}, got {self.kind!r}")
        for name in ("heads", "d_model", "d_head", "d_ffn", "vocab", "max_pos"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)!r}")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if (self.dec_layers == 0) != (self.kind == ENCODER_ONLY):
            raise ConfigError("dec_layers must be 0 exactly when the model is encoder-only")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"activation must be relu or gelu, got {self.activation!r}")

    @property
    def attn_width(self) -> int:
        return self.heads * self.d_head

    @property
    def n_sublayers(self) -> int:
        return 2 * self.enc_layers + 3 * self.dec_layers

    def shorthand(self) -> str:
        s = f"{self.heads}H-{self.enc_layers}L"
        return s + (f"-{self.dec_layers}L" if self.kind == ENCODER_DECODER else "")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


CONFIG_KEYS = tuple(f.name for f in fields(ModelConfig))

# Named dimension profiles used to expand "γH-αL(-βL)" shorthand.
# d_ffn = heads * ffn_per_head, so reconstruction keeps the total FFN width.
PROFILES: dict[str, dict] = {
    "transformer-base": dict(d_model=512, d_head=64, ffn_per_head=256, vocab=37000, max_pos=256, activation="relu"),
    "bert-base": dict(d_model=768, d_head=64, ffn_per_head=256, vocab=30522, max_pos=512, activation="gelu"),
    "bert-large": dict(d_model=1024, d_head=64, ffn_per_head=256, vocab=30522, max_pos=512, activation="gelu"),
    "desk": dict(d_model=64, d_head=16, ffn_per_head=64, vocab=32, max_pos=64, activation="relu"),
}

_SHORTHAND = re.compile(r"^\s*(\d+)H-(\d+)L(?:-(\d+)L)?\s*$", re.IGNORECASE)


def parse_shorthand(text: str, defaults: str | None = None, **overrides) -> ModelConfig:
    """Expand ``"8H-6L-6L"`` / ``"12H-12L"`` with a named defaults profile.

    Without ``defaults``, encoder-decoder shorthands use ``transformer-base``
    and encoder-only ones ``bert-base``.
    """
    m = _SHORTHAND.match(text)
    if not m:
        raise ConfigError(f"cannot parse model shorthand {text!r}; expected e.g. 8H-6L-6L or 12H-12L")
    heads, enc = int(m.group(1)), int(m.group(2))
    dec = int(m.group(3)) if m.group(3) is not None else 0
    kind = ENCODER_DECODER if m.group(3) is not None else ENCODER_ONLY
    if kind == ENCODER_DECODER and dec == 0:
        raise ConfigError("an encoder-decoder shorthand needs a positive decoder depth")
    name = defaults or ("transformer-base" if kind == ENCODER_DECODER else "bert-base")
    if name not in PROFILES:
        raise ConfigError(f"unknown defaults profile {name!r}; choose from {sorted(PROFILES)}")
    prof = dict(PROFILES[name])
    per_head = prof.pop("ffn_per_head")
    values = dict(
        kind=kind, heads=heads, enc_layers=enc, dec_layers=dec, d_ffn=heads * per_head, tie_embeddings=True, **prof
    )
    values.update(overrides)
    return ModelConfig(**values)


def load_config(path) -> ModelConfig:
    """Read a JSON config whose keys are exactly the :class:`ModelConfig` fields."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    missing = [k for k in CONFIG_KEYS if k not in raw]
    extra = [k for k in raw if k not in CONFIG_KEYS]
    if missing or extra:
        raise ConfigError(f"config keys mismatch: missing {missing}, unexpected {extra}")
    return ModelConfig(**raw)


def save_config(config: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def resolve_model(spec: str, defaults: str | None = None) -> ModelConfig:
    """A shorthand string or the path of a JSON config file."""
    if _SHORTHAND.match(spec):
        return parse_shorthand(spec, defaults)
    if Path(spec).is_file():
        return load_config(spec)
    raise ConfigError(f"{spec!r} is neither a model shorthand nor a config file")


def reconstruct(config: ModelConfig) -> ModelConfig:
    """Re-stack a γ-head model into a single-head model with γ times the depth.

    The feedforward width is divided by γ; ``d_model`` and the per-head
    width ``d_head`` are kept, so every attention and FFN module of the
    shallow model has a same-sized counterpart in the deep one.
    """
    g = config.heads
    if config.d_ffn % g:
        raise ReconstructionError(f"d_ffn={config.d_ffn} is not divisible by {g} heads")
    return replace(
        config,
        heads=1,
        enc_layers=g * config.enc_layers,
        dec_layers=g * config.dec_layers,
        d_ffn=config.d_ffn // g,
    )


# -- parameters -----------------------------------------------------------------
@dataclass
class SubLayer:
    kind: str
    params: AttentionParams | FfnParams
    norm: LayerNormParams
    omega: float = 1.0

    def __post_init__(self):
        if not self.omega > 0:
            raise ConfigError("residual scale must be positive")
        expected = FfnParams if self.kind == FEEDFORWARD else AttentionParams
        if not isinstance(self.params, expected):
            raise ConfigError(f"{self.kind} sub-layer needs {expected.__name__}")

    def tensors(self) -> dict[str, Tensor]:
        out = dict(self.params.tensors())
        out["ln_gain"] = self.norm.gain
        out["ln_bias"] = self.norm.bias
        return out


@dataclass
class ModelParams:
    config: ModelConfig
    tok_emb: Tensor
    enc_pos: Tensor
    enc_emb_norm: LayerNormParams
    encoder: list[SubLayer]
    decoder: list[SubLayer] = field(default_factory=list)
    dec_tok_emb: Tensor | None = None
    dec_pos: Tensor | None = None
    dec_emb_norm: LayerNormParams | None = None
    out_proj: Tensor | None = None

    def sublayers(self) -> list[SubLayer]:
        return self.encoder + self.decoder

    def stack_starts(self) -> list[int]:
        return [0, len(self.encoder)] if self.decoder else [0]

    def output_matrix(self) -> Tensor:
        """``(vocab, d_model)`` matrix whose transpose maps states to logits."""
        if self.out_proj is not None:
            return self.out_proj
        return self.dec_tok_emb if self.dec_tok_emb is not None else self.tok_emb

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"tok_emb": self.tok_emb, "enc_pos": self.enc_pos}
        out["enc_emb_norm.gain"] = self.enc_emb_norm.gain
        out["enc_emb_norm.bias"] = self.enc_emb_norm.bias
        for i, sl in enumerate(self.encoder):
            for k, t in sl.tensors().items():
                out[f"enc.{i}.{k}"] = t
        if self.dec_tok_emb is not None:
            out["dec_tok_emb"] = self.dec_tok_emb
        if self.dec_pos is not None:
            out["dec_pos"] = self.dec_pos
            out["dec_emb_norm.gain"] = self.dec_emb_norm.gain
            out["dec_emb_norm.bias"] = self.dec_emb_norm.bias
        for i, sl in enumerate(self.decoder):
            for k, t in sl.tensors().items():
                out[f"dec.{i}.{k}"] = t
        if self.out_proj is not None:
            out["out_proj"] = self.out_proj
        return out

    def n_params(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def omegas(self) -> list[float]:
        return [sl.omega for sl in self.sublayers()]


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def build(config: ModelConfig, init: InitSpec | None = None, rng: RngStream | int = 0) -> ModelParams:
    """Materialise parameters for ``config``.

    Attention and FFN matrices follow ``init``'s weight scheme, biases start
    at zero and layer norms at identity. Residual scales are all 1; Admin
    runs set them afterwards (see :func:`headfold.initialization.apply_admin`).
    """
    init = InitSpec() if init is None else init
    if not isinstance(init, InitSpec):
        raise ConfigError(f"init must be an InitSpec, got {type(init).__name__}")
    if isinstance(rng, int):
        rng = RngStream(rng, STREAM_INIT)
    c = config
    ref = init.reference or c
    attn_fans = (c.d_model, ref.heads * ref.d_head)
    ffn_fans = (c.d_model, ref.d_ffn)

    def attention() -> AttentionParams:
        w = c.attn_width
        return AttentionParams(
            draw_matrix(init, (c.d_model, w), rng, attn_fans),
            draw_matrix(init, (c.d_model, w), rng, attn_fans),
            draw_matrix(init, (c.d_model, w), rng, attn_fans),
            draw_matrix(init, (w, c.d_model), rng, attn_fans[::-1]),
            c.heads,
            _zeros(w),
            _zeros(w),
            _zeros(w),
            _zeros(c.d_model),
        )

    def ffn() -> FfnParams:
        return FfnParams(
            draw_matrix(init, (c.d_model, c.d_ffn), rng, ffn_fans),
            draw_matrix(init, (c.d_ffn, c.d_model), rng, ffn_fans[::-1]),
            c.activation,
            _zeros(c.d_ffn),
            _zeros(c.d_model),
        )

    def sub(kind, params):
        return SubLayer(kind, params, LayerNormParams.identity(c.d_model))

    tok_emb = draw_embedding(init, (c.vocab, c.d_model), rng)
    enc_pos = draw_embedding(init, (c.max_pos, c.d_model), rng)
    encoder = []
    for _ in range(c.enc_layers):
        encoder.append(sub(SELF_ATTENTION, attention()))
        encoder.append(sub(FEEDFORWARD, ffn()))
    model = ModelParams(c, tok_emb, enc_pos, LayerNormParams.identity(c.d_model), encoder)
    if c.kind == ENCODER_DECODER:
        if not c.tie_embeddings:
            model.dec_tok_emb = draw_embedding(init, (c.vocab, c.d_model), rng)
        model.dec_pos = draw_embedding(init, (c.max_pos, c.d_model), rng)
        model.dec_emb_norm = LayerNormParams.identity(c.d_model)
        for _ in range(c.dec_layers):
            model.decoder.append(sub(SELF_ATTENTION, attention()))
            model.decoder.append(sub(CROSS_ATTENTION, attention()))
            model.decoder.append(sub(FEEDFORWARD, ffn()))
    if not c.tie_embeddings:
        model.out_proj = draw_embedding(init, (c.vocab, c.d_model), rng)
    return model


# -- forward --------------------------------------------------------------------
class Trace:
    """Optional collector for residual-branch outputs and attention maps."""

    def __init__(self, keep_branches: bool = False, keep_attention: bool = False):
        self.keep_branches = keep_branches
        self.keep_attention = keep_attention
        self.branches: dict[int, np.ndarray] = {}
        self.attention: dict[int, np.ndarray] = {}


def _check_tokens(tokens, config: ModelConfig) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.ndim not in (1, 2) or ids.shape[-1] < 1:
        raise InputError(f"tokens must be a non-empty 1-D or 2-D id array, got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError("token ids must be integers")
    if ids.min() < 0 or ids.max() >= config.vocab:
        raise InputError(f"token id out of range [0, {config.vocab})")
    if ids.shape[-1] > config.max_pos:
        raise InputError(f"sequence length {ids.shape[-1]} exceeds max_pos={config.max_pos}")
    return ids.astype(np.int64)


def _embed(table: Tensor, pos: Tensor, norm: LayerNormParams, ids: np.ndarray) -> Tensor:
    n = ids.shape[-1]
    x = add(embedding(table, ids), embedding(pos, np.arange(n)))
    return layer_norm(x, norm)


def apply_sublayer(sl: SubLayer, x: Tensor, memory: Tensor | None = None, mask=None, trace=None, index=0) -> Tensor:
    """``LN(omega * x + f(x))`` for one sub-layer."""
    weights = None
    want = trace is not None and trace.keep_attention
    if sl.kind == FEEDFORWARD:
        branch = ffn_forward(x, sl.params)
    elif sl.kind == SELF_ATTENTION:
        res = multi_head_attention(x, x, x, sl.params, mask, return_weights=want)
        branch, weights = res if want else (res, None)
    else:
        res = multi_head_attention(x, memory, memory, sl.params, None, return_weights=want)
        branch, weights = res if want else (res, None)
    if trace is not None:
        if trace.keep_branches:
            trace.branches[index] = branch.data.copy()
        if weights is not None:
            trace.attention[index] = weights.data.copy()
    skip = x if sl.omega == 1.0 else mul(x, sl.omega)
    return layer_norm(add(skip, branch), sl.norm)


def encoder_forward(p: ModelParams, tokens, trace: Trace | None = None) -> Tensor:
    """Encoder states for 1-D ``(n,)`` or batched ``(B, n)`` token ids."""
    ids = _check_tokens(tokens, p.config)
    x = _embed(p.tok_emb, p.enc_pos, p.enc_emb_norm, ids)
    for i, sl in enumerate(p.encoder):
        x = apply_sublayer(sl, x, trace=trace, index=i)
    return x


def logits_from_states(p: ModelParams, x: Tensor) -> Tensor:
    return matmul(x, swapaxes(p.output_matrix(), 0, 1))


def decoder_forward(p: ModelParams, target_tokens, memory: Tensor, trace: Trace | None = None) -> Tensor:
    """Vocabulary logits for the (teacher-forced) target prefix, causally masked."""
    if p.config.kind != ENCODER_DECODER:
        raise ConfigError("encoder-only model has no decoder")
    ids = _check_tokens(target_tokens, p.config)
    table = p.dec_tok_emb if p.dec_tok_emb is not None else p.tok_emb
    x = _embed(table, p.dec_pos, p.dec_emb_norm, ids)
    mask = causal_mask(ids.shape[-1])
    base = len(p.encoder)
    for j, sl in enumerate(p.decoder):
        x = apply_sublayer(sl, x, memory=memory, mask=mask, trace=trace, index=base + j)
    return logits_from_states(p, x)


def forward_logits(p: ModelParams, batch, trace: Trace | None = None, grad: bool = True) -> Tensor:
    """Logits for a task batch: decoder logits, or per-position encoder logits."""
    if not grad:
        with no_grad():
            return forward_logits(p, batch, trace, grad=True)
    memory = encoder_forward(p, batch.src, trace)
    if p.config.kind == ENCODER_DECODER:
        return decoder_forward(p, batch.tgt_in, memory, trace)
    return logits_from_states(p, memory)
