"""Desk-scale toy tasks standing in for translation and masked-LM corpora.

``copy`` and ``reverse`` are sequence-to-sequence tasks. For an
encoder-decoder model the batch is a source/target pair with a
teacher-forced decoder input. An encoder-only model sees the source
followed by ``seq_len`` mask tokens and must emit the target at those
slots, so it still has to route information through attention.

``masked-token`` sequences repeat a short random motif; a fixed fraction
of positions is replaced by the mask token and the model predicts the
original ids there, which the other repeats of the motif determine.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .rng import RngStream

PAD, BOS, EOS, MASK = 0, 1, 2, 3
N_RESERVED = 4
KINDS = ("copy", "reverse", "masked-token")
LAYOUTS = ("encoder-decoder", "encoder-only")


@dataclass(frozen=True)
class ToyTask:
    kind: str = "copy"
    vocab: int = 32
    seq_len: int = 8
    mask_fraction: float = 0.15
    layout: str = "encoder-decoder"
    motif_periods: tuple[int, ...] = (2, 3, 4)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task {self.kind!r}; expected one of {KINDS}")
        if self.vocab < N_RESERVED + 1:
            raise ValueError(f"vocab must exceed the {N_RESERVED} reserved ids")
        if self.seq_len < 1:
            raise ValueError("seq_len must be positive")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")
        if self.kind == "masked-token" and self.layout != "encoder-only":
            object.__setattr__(self, "layout", "encoder-only")
        if not 0 <= self.mask_fraction <= 1:
            raise ValueError("mask_fraction must lie in [0, 1]")

    @property
    def n_masked(self) -> int:
        return math.floor(self.mask_fraction * self.seq_len + 1e-9)

    @property
    def input_len(self) -> int:
        """Length of the encoder input (and the decoder input, if any)."""
        if self.kind != "masked-token" and self.layout == "encoder-only":
            return 2 * self.seq_len
        return self.seq_len

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motif_periods"] = list(self.motif_periods)
        return d

    def __call__(self, rng: RngStream, batch_size: int = 32) -> "Batch":
        return make_batch(self, batch_size, rng)


@dataclass
class Batch:
    src: np.ndarray
    tgt_in: np.ndarray | None
    targets: np.ndarray
    loss_mask: np.ndarray

    @property
    def tokens_shape(self) -> tuple[int, ...]:
        return self.src.shape


def target_for(kind: str, seq: np.ndarray) -> np.ndarray:
    """Copy or reverse along the last axis."""
    if kind == "copy":
        return seq.copy()
    if kind == "reverse":
        return seq[..., ::-1].copy()
    raise ValueError(f"{kind!r} has no sequence target")


def make_batch(task: ToyTask, batch_size: int, rng: RngStream) -> Batch:
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = task.seq_len
    if task.kind == "masked-token":
        return _masked_batch(task, batch_size, rng)
    seq = rng.integers(N_RESERVED, task.vocab, (batch_size, n))
    tgt = target_for(task.kind, seq)
    if task.layout == "encoder-decoder":
        tgt_in = np.concatenate([np.full((batch_size, 1), BOS), tgt[:, :-1]], axis=1)
        return Batch(seq, tgt_in, tgt, np.ones((batch_size, n)))
    src = np.concatenate([seq, np.full((batch_size, n), MASK)], axis=1)
    targets = np.concatenate([np.full((batch_size, n), PAD), tgt], axis=1)
    mask = np.concatenate([np.zeros((batch_size, n)), np.ones((batch_size, n))], axis=1)
    return Batch(src, None, targets, mask)


def _masked_batch(task: ToyTask, batch_size: int, rng: RngStream) -> Batch:
    n, k = task.seq_len, task.n_masked
    periods = np.asarray(task.motif_periods)
    seq = np.empty((batch_size, n), dtype=np.int64)
    src = np.empty_like(seq)
    mask = np.zeros((batch_size, n))
    for b in range(batch_size):
        p = int(periods[rng.integers(0, len(periods))])
        motif = rng.integers(N_RESERVED, task.vocab, p)
        seq[b] = np.resize(motif, n)
        src[b] = seq[b]
        if k:
            pos = rng.choice(n, k)
            src[b, pos] = MASK
            mask[b, pos] = 1.0
    if k == 0:
        raise ValueError("masked-token task masks no positions; raise mask_fraction or seq_len")
    targets = np.where(mask > 0, seq, PAD)
    return Batch(src, None, targets, mask)
