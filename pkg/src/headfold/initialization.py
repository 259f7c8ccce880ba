"""Weight initialisation: Xavier, truncated normal, and Admin residual scaling.

Admin keeps the vanilla post-LN architecture and parameter set. It runs a
few forward passes on profiling batches with every residual scale at 1,
records the variance ``v_i`` of each residual branch output, and then fixes
the identity path of sub-layer ``i`` to ``omega_i * x_i`` with::

    omega_i = sqrt(max(1, v_0 + ... + v_{i-1}))

The prefix sum restarts at the first sub-layer of each stack (encoder,
decoder), since each stack starts from its own embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable, Iterable

import numpy as np

from .rng import RngStream
from .tensor import Tensor

if TYPE_CHECKING:
    from .model import ModelConfig, ModelParams

SCHEMES = ("xavier", "truncated-normal", "admin")


class ConfigError(ValueError):
    """Invalid model or initialisation configuration."""


class ProfilingError(ArithmeticError):
    """A residual branch produced non-finite activations while profiling."""


@dataclass(frozen=True)
class InitSpec:
    """How to draw the initial weights.

    ``reference`` (optional) is a model config whose matrix widths set the
    Xavier fans, so a reconstructed deep model can keep the per-matrix
    scales of the shallow model it came from.
    """

    scheme: str = "xavier"
    base: str = "xavier"
    scale: float = 0.02
    profile_batches: int = 1
    reference: "ModelConfig | None" = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown init scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.base not in ("xavier", "truncated-normal"):
            raise ConfigError(f"admin base scheme must be xavier or truncated-normal, got {self.base!r}")
        if self.uses_scale and not self.scale > 0:
            raise ConfigError("truncated-normal std must be positive")
        if self.profile_batches < 1:
            raise ConfigError("admin needs at least one profiling batch")

    @property
    def weight_scheme(self) -> str:
        return self.base if self.scheme == "admin" else self.scheme

    @property
    def uses_scale(self) -> bool:
        return self.weight_scheme == "truncated-normal"

    @property
    def is_admin(self) -> bool:
        return self.scheme == "admin"

    def describe(self) -> dict:
        out = {"scheme": self.scheme}
        if self.is_admin:
            out["base"] = self.base
            out["profile_batches"] = self.profile_batches
        if self.uses_scale:
            out["scale"] = self.scale
        if self.reference is not None:
            out["reference"] = self.reference.shorthand()
        return out

    @classmethod
    def parse(cls, text: str, **kw) -> "InitSpec":
        """``vanilla``/``xavier``, ``truncated-normal``, ``admin`` or ``admin:truncated-normal``."""
        name, _, base = text.partition(":")
        name = {"vanilla": "xavier", "default": "xavier"}.get(name, name)
        if name == "admin":
            return cls("admin", base or "xavier", **kw)
        if base:
            raise ConfigError(f"only admin takes a base scheme, got {text!r}")
        return cls(name, **kw)


def xavier_init(shape, rng: RngStream, fans: tuple[int, int] | None = None) -> Tensor:
    """Uniform on ``+-sqrt(6 / (fan_in + fan_out))``; fans default to the 2-D shape."""
    if len(shape) != 2:
        raise ConfigError(f"xavier init needs a 2-D shape, got {tuple(shape)}")
    fan_in, fan_out = fans if fans is not None else shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, tuple(shape)), requires_grad=True)


def truncated_normal_init(shape, std: float, rng: RngStream) -> Tensor:
    """Normal(0, std^2) with every draw outside ``+-2 std`` redrawn."""
    if not std > 0:
        raise ConfigError("std must be positive")
    values = rng.normal(tuple(shape), std)
    bad = np.abs(values) > 2 * std
    while bad.any():
        values[bad] = rng.normal(int(bad.sum()), std)
        bad = np.abs(values) > 2 * std
    return Tensor(values, requires_grad=True)


def draw_matrix(spec: InitSpec, shape, rng: RngStream, fans=None) -> Tensor:
    if spec.weight_scheme == "xavier":
        return xavier_init(shape, rng, fans)
    return truncated_normal_init(shape, spec.scale, rng)


def draw_embedding(spec: InitSpec, shape, rng: RngStream) -> Tensor:
    # every scheme: small truncated-normal rows, so tied output logits start near uniform
    # (inputs pass through an embedding layer norm, which removes the scale)
    return truncated_normal_init(shape, spec.scale, rng)


# -- Admin -----------------------------------------------------------------
@dataclass
class AdminProfile:
    variances: list[float]
    omegas: list[float]
    stack_starts: list[int] = field(default_factory=lambda: [0])
    seed: int = 0
    batch_size: int = 0
    seq_len: int = 0

    def records(self) -> list[dict]:
        return [
            {"sublayer": i, "variance": v, "omega": w}
            for i, (v, w) in enumerate(zip(self.variances, self.omegas))
        ]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "batch_size": self.batch_size,
            "seq_len": self.seq_len,
            "stack_starts": list(self.stack_starts),
            "sublayers": self.records(),
        }


def admin_omegas(variances: Iterable[float], stack_starts: Iterable[int] = (0,)) -> list[float]:
    """Residual scales from branch variances: strict prefix sums floored at one."""
    starts = set(stack_starts)
    omegas, acc = [], 0.0
    for i, v in enumerate(variances):
        if i in starts:
            acc = 0.0
        omegas.append(math.sqrt(max(1.0, acc)))
        acc += v
    return omegas


def admin_profile(
    model: "ModelParams",
    batches: Callable[[RngStream], object],
    rng: RngStream,
    n_batches: int = 1,
) -> AdminProfile:
    """Measure residual-branch variances with all omegas at one.

    ``batches(rng)`` returns a task batch (see :mod:`headfold.tasks`). The
    variance of each branch output is pooled over every token position,
    feature and profiling batch.
    """
    from .model import forward_logits, Trace

    if any(sl.omega != 1.0 for sl in model.sublayers()):
        raise ConfigError("admin profiling expects a model with every residual scale equal to 1")
    count = len(model.sublayers())
    sums = np.zeros(count)
    sq = np.zeros(count)
    ns = np.zeros(count)
    last = None
    for _ in range(n_batches):
        batch = batches(rng)
        last = batch
        trace = Trace(keep_branches=True)
        forward_logits(model, batch, trace=trace, grad=False)
        for i, out in trace.branches.items():
            if not np.all(np.isfinite(out)):
                raise ProfilingError(f"non-finite activations in residual branch of sub-layer {i}")
            sums[i] += out.sum()
            sq[i] += (out * out).sum()
            ns[i] += out.size
    means = sums / ns
    variances = np.maximum(sq / ns - means * means, 0.0).tolist()
    starts = model.stack_starts()
    shape = getattr(last, "tokens_shape", (0, 0))
    return AdminProfile(
        variances=variances,
        omegas=admin_omegas(variances, starts),
        stack_starts=starts,
        seed=rng.seed,
        batch_size=int(shape[0]),
        seq_len=int(shape[1]) if len(shape) > 1 else 0,
    )


def apply_admin(model: "ModelParams", profile: AdminProfile) -> "ModelParams":
    """Return a model sharing ``model``'s parameter tensors with fixed residual scales."""
    subs = model.sublayers()
    if len(profile.omegas) != len(subs):
        raise ConfigError(f"profile has {len(profile.omegas)} scales for {len(subs)} sub-layers")
    if any(w <= 0 for w in profile.omegas):
        raise ConfigError("residual scales must be positive")
    n_enc = len(model.encoder)
    encoder = [replace(sl, omega=float(w)) for sl, w in zip(model.encoder, profile.omegas[:n_enc])]
    decoder = [replace(sl, omega=float(w)) for sl, w in zip(model.decoder, profile.omegas[n_enc:])]
    return replace(model, encoder=encoder, decoder=decoder)
