"""scikit-learn style wrapper: fit a transformer on integer token sequences.

``X`` is an ``(n_samples, n_src)`` array of token ids. For an
encoder-decoder shorthand ``y`` is an ``(n_samples, n_tgt)`` array of target
sequences and :meth:`SequenceTransformer.predict` decodes greedily. For an
encoder-only shorthand ``y`` labels every input position (same shape as
``X``) and ``predict`` returns per-position argmax ids. ``transform``
yields fixed-width features for downstream estimators.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .initialization import InitSpec, admin_profile, apply_admin
from .model import ENCODER_DECODER, build, decoder_forward, encoder_forward, forward_logits, logits_from_states, parse_shorthand
from .optim import OptimState, adam_step
from .rng import STREAM_INIT, STREAM_PROFILE, STREAM_TRAIN_DATA, RngStream
from .tasks import BOS, Batch
from .tensor import cross_entropy, no_grad


def _token_array(a, name: str) -> np.ndarray:
    raw = check_array(a, dtype=None, ensure_2d=True, input_name=name)
    if not np.issubdtype(raw.dtype, np.integer):
        if not np.issubdtype(raw.dtype, np.floating) or np.any(raw != np.round(raw)):
            raise ValueError(f"{name} must hold integer token ids, got dtype {raw.dtype}")
    a = raw.astype(np.int64)
    if a.min() < 0:
        raise ValueError(f"{name} holds negative token ids")
    return a


class SequenceTransformer(BaseEstimator):
    """Post-LN transformer trained with Adam on token-sequence pairs.

    Parameters mirror the command line: ``model`` is a shorthand such as
    ``"2H-2L-2L"`` expanded with the ``defaults`` profile, while ``vocab``
    and ``max_pos`` are sized from the training data. Id ``1`` is the
    decoder start token.
    """

    def __init__(
        self,
        model: str = "2H-2L-2L",
        defaults: str = "desk",
        init: str = "vanilla",
        steps: int = 300,
        batch_size: int = 32,
        lr: float = 1e-3,
        warmup: int = 100,
        clip_norm: float | None = 1.0,
        random_state: int = 0,
    ):
        self.model = model
        self.defaults = defaults
        self.init = init
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup = warmup
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _batch(self, X: np.ndarray, y: np.ndarray) -> Batch:
        if self.config_.kind == ENCODER_DECODER:
            tgt_in = np.concatenate([np.full((len(y), 1), BOS), y[:, :-1]], axis=1)
            return Batch(X, tgt_in, y, np.ones(y.shape))
        return Batch(X, None, y, np.ones(y.shape))

    def fit(self, X, y):
        X = _token_array(X, "X")
        y = _token_array(y, "y")
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        vocab = int(max(X.max(), y.max(), BOS)) + 1
        probe = parse_shorthand(self.model, self.defaults)
        if probe.kind != ENCODER_DECODER and X.shape != y.shape:
            raise ValueError("an encoder-only model needs one label per input position (y.shape == X.shape)")
        self.config_ = parse_shorthand(self.model, self.defaults, vocab=vocab, max_pos=max(X.shape[1], y.shape[1]))
        self.n_target_ = y.shape[1]
        init = InitSpec.parse(self.init)
        seed = self.random_state
        model = build(self.config_, init, RngStream(seed, STREAM_INIT))
        data_rng = RngStream(seed, STREAM_TRAIN_DATA)

        def sample(rng: RngStream) -> Batch:
            idx = rng.integers(0, len(X), min(self.batch_size, len(X)))
            return self._batch(X[idx], y[idx])

        if init.is_admin:
            model = apply_admin(model, admin_profile(model, sample, RngStream(seed, STREAM_PROFILE), init.profile_batches))
        params = model.parameters()
        opt = OptimState(lr=self.lr, warmup=self.warmup, clip_norm=self.clip_norm)
        self.loss_curve_ = []
        for _ in range(self.steps):
            batch = sample(data_rng)
            for p in params.values():
                p.grad = None
            loss = cross_entropy(forward_logits(model, batch), batch.targets, batch.loss_mask)
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"training loss became non-finite at step {len(self.loss_curve_) + 1}")
            loss.backward()
            adam_step(params, {k: p.grad for k, p in params.items() if p.grad is not None}, opt)
            self.loss_curve_.append(value)
        self.model_ = model
        self.n_features_in_ = X.shape[1]
        return self

    def _check_input(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _token_array(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} positions; the model was fitted on {self.n_features_in_}")
        if X.max() >= self.config_.vocab:
            raise ValueError(f"X holds ids >= the fitted vocabulary size {self.config_.vocab}")
        return X

    def transform(self, X) -> np.ndarray:
        """Encoder states averaged over positions, shape ``(n_samples, d_model)``."""
        X = self._check_input(X)
        with no_grad():
            return encoder_forward(self.model_, X).data.mean(axis=1)

    def predict(self, X) -> np.ndarray:
        X = self._check_input(X)
        with no_grad():
            return self._predict(X)

    def _predict(self, X: np.ndarray) -> np.ndarray:
        memory = encoder_forward(self.model_, X)
        if self.config_.kind != ENCODER_DECODER:
            return logits_from_states(self.model_, memory).data.argmax(axis=-1)
        out = np.full((len(X), 1), BOS, dtype=np.int64)
        for _ in range(self.n_target_):
            logits = decoder_forward(self.model_, out, memory).data
            out = np.concatenate([out, logits[:, -1].argmax(axis=-1)[:, None]], axis=1)
        return out[:, 1:]

    def score(self, X, y) -> float:
        """Token accuracy of :meth:`predict`."""
        y = _token_array(y, "y")
        pred = self.predict(X)
        if pred.shape != y.shape:
            raise ValueError(f"y has shape {y.shape}, predictions {pred.shape}")
        return float((pred == y).mean())
