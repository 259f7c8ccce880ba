"""Training loop, divergence detection, and the stability / head-count sweeps."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .accounting import count_params
from .initialization import InitSpec, admin_profile, apply_admin
from .model import ModelConfig, ModelParams, Trace, build, forward_logits, parse_shorthand, reconstruct
from .optim import OptimState, adam_step
from .rng import STREAM_INIT, STREAM_PROFILE, STREAM_TRAIN_DATA, STREAM_VALID_DATA, RngStream
from .tasks import Batch, ToyTask, make_batch
from .tensor import cross_entropy

CONVERGED = "converged"
DIVERGED_NAN = "diverged-nan"
DIVERGED_EXPLOSION = "diverged-explosion"
DIVERGED_STALLED = "diverged-stalled"


@dataclass(frozen=True)
class TrainSettings:
    """Optimiser, batching, evaluation and divergence-detector knobs."""

    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 100
    decay: str = "inverse-sqrt"
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    eval_every: int = 100
    eval_batches: int = 2
    eval_batch_size: int = 64
    divergence_factor: float = 10.0
    divergence_window: int = 50
    divergence_patience: int = 100
    stall_fraction: float | None = 0.9

    def to_dict(self) -> dict:
        return asdict(self)


# Warmup-free, unclipped, high peak rate: the frozen "aggressive" regime used
# by the desk-scale stability sweep.
AGGRESSIVE = TrainSettings(lr=3e-3, warmup=0, decay="constant", clip_norm=None)


class DivergenceDetector:
    """Flags non-finite losses, or losses above ``factor`` times the trailing
    ``window``-step moving average for ``patience`` consecutive steps.

    The reference average is frozen when an exceedance streak starts, and a
    flagged detector stays flagged.
    """

    def __init__(self, factor: float = 10.0, window: int = 50, patience: int = 100):
        self.factor = factor
        self.window = window
        self.patience = patience
        self.history: deque[float] = deque(maxlen=window)
        self.reference: float | None = None
        self.streak_start: int | None = None
        self.streak = 0
        self.status: str | None = None
        self.step: int | None = None

    def update(self, step: int, loss: float) -> str | None:
        if self.status is not None:
            return self.status
        if not math.isfinite(loss):
            self.status, self.step = DIVERGED_NAN, step
            return self.status
        if len(self.history) == self.window:
            ref = self.reference if self.streak else sum(self.history) / self.window
            if loss > self.factor * ref:
                if not self.streak:
                    self.reference, self.streak_start = ref, step
                self.streak += 1
                if self.streak >= self.patience:
                    self.status, self.step = DIVERGED_EXPLOSION, self.streak_start
                return self.status
        self.streak, self.reference = 0, None
        self.history.append(loss)
        return None

    def scan(self, losses) -> str | None:
        for i, loss in enumerate(losses, start=1):
            self.update(i, loss)
        return self.status


def stalled(losses, window: int, fraction: float | None) -> bool:
    """True when the last ``window`` losses average at least ``fraction`` of the first ``window``.

    Applied once at the end of a run: a model that never leaves its starting
    loss level failed to train even though nothing overflowed.
    """
    if fraction is None or len(losses) < 2 * window:
        return False
    return float(np.mean(losses[-window:])) >= fraction * float(np.mean(losses[:window]))


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    init: dict
    task: dict
    settings: dict
    seed: int
    steps: int
    n_params: int
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    status: str = CONVERGED
    diverged_step: int | None = None
    wall_seconds: float = 0.0
    concentration: dict = field(default_factory=dict)
    admin: dict | None = None

    @property
    def diverged(self) -> bool:
        return self.status != CONVERGED

    @property
    def final_val_loss(self) -> float:
        return self.validation[-1]["loss"] if self.validation else float("nan")

    @property
    def final_val_accuracy(self) -> float:
        return self.validation[-1]["accuracy"] if self.validation else float("nan")

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "grad_norm"])
        for i, (loss, lr, gn) in enumerate(zip(self.losses, self.lrs, self.grad_norms), start=1):
            w.writerow([i, _fmt(loss), _fmt(lr), _fmt(gn)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())

    def summary(self) -> dict:
        """Everything except wall-clock time and the per-step trace."""
        return {
            "model": _shorthand(self.config),
            "config": self.config,
            "config_hash": self.config_hash,
            "init": self.init,
            "task": self.task,
            "settings": self.settings,
            "seed": self.seed,
            "steps": self.steps,
            "steps_run": len(self.losses),
            "n_params": self.n_params,
            "status": self.status,
            "diverged_step": self.diverged_step,
            "initial_loss": self.losses[0] if self.losses else None,
            "final_loss": self.losses[-1] if self.losses else None,
            "validation": self.validation,
            "concentration": self.concentration,
            "admin": self.admin,
        }


def _fmt(x: float) -> str:
    return repr(float(x))


def _shorthand(config: dict) -> str:
    return ModelConfig(**config).shorthand()


def attention_concentration(weights) -> dict:
    """Mean row entropy (nats) and mean row maximum of attention maps.

    ``weights`` holds probability rows along its last axis; any leading axes
    (batch, heads, layers) are pooled.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim < 1 or w.shape[-1] == 0:
        raise ValueError("attention weights need a non-empty last axis")
    rows = w.reshape(-1, w.shape[-1])
    if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("attention rows must be probability distributions")
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(rows > 0, rows * np.log(rows), 0.0)
    return {"entropy": float(-plogp.sum(axis=1).mean()), "max": float(rows.max(axis=1).mean())}


def _model_concentration(model: ModelParams, batch: Batch) -> dict:
    trace = Trace(keep_attention=True)
    forward_logits(model, batch, trace=trace, grad=False)
    if not trace.attention:
        return {"entropy": float("nan"), "max": float("nan")}
    stats = [attention_concentration(w) for w in trace.attention.values()]
    return {
        "entropy": float(np.mean([s["entropy"] for s in stats])),
        "max": float(np.mean([s["max"] for s in stats])),
    }


def evaluate(model: ModelParams, batches: list[Batch]) -> dict:
    total_loss, total_w, correct = 0.0, 0.0, 0.0
    for b in batches:
        logits = forward_logits(model, b, grad=False)
        w = b.loss_mask.sum()
        total_loss += float(cross_entropy(logits, b.targets, b.loss_mask).data) * w
        pred = logits.data.argmax(axis=-1)
        correct += float(((pred == b.targets) * b.loss_mask).sum())
        total_w += w
    return {"loss": total_loss / total_w, "accuracy": correct / total_w}


def task_for(config: ModelConfig, task: ToyTask) -> ToyTask:
    layout = "encoder-decoder" if config.kind == "encoder-decoder" else "encoder-only"
    if task.kind == "masked-token" or task.layout == layout:
        return task
    return replace(task, layout=layout)


def prepare_model(config: ModelConfig, init: InitSpec, task: ToyTask, seed: int, batch_size: int = 32):
    """Build (and Admin-profile, if requested) a model; returns (model, profile-or-None)."""
    model = build(config, init, RngStream(seed, STREAM_INIT))
    if not init.is_admin:
        return model, None
    profile = admin_profile(
        model, lambda r: make_batch(task, batch_size, r), RngStream(seed, STREAM_PROFILE), init.profile_batches
    )
    return apply_admin(model, profile), profile


def train(
    config: ModelConfig,
    init: InitSpec,
    task: ToyTask,
    seed: int,
    steps: int,
    settings: TrainSettings | None = None,
    inject_nan_at: int | None = None,
    return_model: bool = False,
):
    """Train one model and return its :class:`RunRecord`.

    Divergence is an outcome, not an exception: the run stops at the first
    non-finite loss or gradient, or when the explosion detector fires. A run
    that finishes without leaving its starting loss level is marked stalled.
    ``inject_nan_at`` poisons the gradient of that step (detector testing).
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    s = settings or TrainSettings()
    task = task_for(config, task)
    if task.input_len > config.max_pos:
        raise ValueError(f"task inputs of length {task.input_len} exceed max_pos={config.max_pos}")
    started = time.perf_counter()
    model, profile = prepare_model(config, init, task, seed, s.batch_size)
    params = model.parameters()
    opt = OptimState(
        lr=s.lr, warmup=s.warmup, decay=s.decay, beta1=s.beta1, beta2=s.beta2, eps=s.eps, clip_norm=s.clip_norm
    )
    data_rng = RngStream(seed, STREAM_TRAIN_DATA)
    valid_rng = RngStream(seed, STREAM_VALID_DATA)
    valid = [make_batch(task, s.eval_batch_size, valid_rng) for _ in range(s.eval_batches)]
    record = RunRecord(
        config=config.to_dict(),
        config_hash=config.digest(),
        init=init.describe(),
        task=task.to_dict(),
        settings=s.to_dict(),
        seed=seed,
        steps=steps,
        n_params=count_params(config, "built"),
        admin=None if profile is None else profile.to_dict(),
    )
    record.concentration["init"] = _model_concentration(model, valid[0])
    detector = DivergenceDetector(s.divergence_factor, s.divergence_window, s.divergence_patience)

    for step in range(1, steps + 1):
        batch = make_batch(task, s.batch_size, data_rng)
        for p in params.values():
            p.grad = None
        loss = cross_entropy(forward_logits(model, batch), batch.targets, batch.loss_mask)
        loss_value = float(loss.data)
        if math.isfinite(loss_value):
            loss.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        if inject_nan_at == step:
            first = next(iter(grads))
            grads[first] = np.full_like(grads[first], np.nan)
        info = adam_step(params, grads, opt) if math.isfinite(loss_value) else {"lr": opt.lr_at(step), "grad_norm": float("nan")}
        record.losses.append(loss_value)
        record.lrs.append(info["lr"])
        record.grad_norms.append(info["grad_norm"])
        status = detector.update(step, loss_value)
        if status is None and not math.isfinite(info["grad_norm"]):
            detector.status, detector.step = DIVERGED_NAN, step
            status = DIVERGED_NAN
        if status is not None:
            record.status, record.diverged_step = status, detector.step
            break
        if step % s.eval_every == 0 or step == steps:
            record.validation.append({"step": step, **evaluate(model, valid)})

    if not record.diverged and stalled(record.losses, s.divergence_window, s.stall_fraction):
        record.status, record.diverged_step = DIVERGED_STALLED, len(record.losses)
    if not record.diverged:
        record.concentration["final"] = _model_concentration(model, valid[0])
    record.wall_seconds = time.perf_counter() - started
    return (record, model) if return_model else record


# -- sweeps ----------------------------------------------------------------------
def resolve_workers(workers: int | None = None) -> int:
    env = os.environ.get("HEADFOLD_WORKERS")
    if env:
        workers = int(env)
    return max(1, int(workers or 1))


def _run_job(job: dict) -> RunRecord:
    return train(**job)


def run_jobs(jobs: list[dict], workers: int | None = None) -> list[RunRecord]:
    """Run independent ``train`` calls, in order, on a bounded process pool."""
    n = resolve_workers(workers)
    if n == 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_job, jobs))


def deep_init(init: InitSpec, shallow: ModelConfig, match_scale: bool = True) -> InitSpec:
    return replace(init, reference=shallow) if match_scale and init.weight_scheme == "xavier" else init


def init_label(init: InitSpec) -> str:
    if init.is_admin:
        return "admin" if init.base == "xavier" else f"admin:{init.base}"
    return "vanilla" if init.scheme == "xavier" else init.scheme


@dataclass
class SweepTable:
    kind: str
    cells: dict[str, dict]
    records: list[RunRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"sweep": self.kind, **self.meta, "cells": self.cells}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def stability_sweep(
    shallow: ModelConfig,
    seeds,
    inits,
    task: ToyTask,
    steps: int,
    settings: TrainSettings | None = None,
    workers: int | None = None,
    match_init_scale: bool = True,
    include_shallow: bool = True,
) -> SweepTable:
    """Divergence rate per (model, init) cell for ``shallow`` and ``reconstruct(shallow)``."""
    if shallow.heads < 2:
        raise ValueError("stability sweep needs a multi-head shallow config")
    deep = reconstruct(shallow)
    seeds = list(seeds)
    inits = [InitSpec.parse(i) if isinstance(i, str) else i for i in inits]
    models = [(shallow, False), (deep, True)] if include_shallow else [(deep, True)]
    jobs, keys = [], []
    for cfg, is_deep in models:
        for init in inits:
            spec = deep_init(init, shallow, match_init_scale) if is_deep else init
            for seed in seeds:
                jobs.append(dict(config=cfg, init=spec, task=task, seed=seed, steps=steps, settings=settings))
                keys.append(f"{cfg.shorthand()}|{init_label(init)}")
    records = run_jobs(jobs, workers)
    cells: dict[str, dict] = {}
    for key, rec in zip(keys, records):
        cell = cells.setdefault(key, {"runs": 0, "diverged": 0, "statuses": [], "final_val_loss": []})
        cell["runs"] += 1
        cell["diverged"] += int(rec.diverged)
        cell["statuses"].append(rec.status)
        cell["final_val_loss"].append(rec.final_val_loss)
    for cell in cells.values():
        cell["rate"] = cell["diverged"] / cell["runs"]
    meta = {
        "shallow": shallow.shorthand(),
        "deep": deep.shorthand(),
        "shallow_config": shallow.to_dict(),
        "seeds": seeds,
        "steps": steps,
        "task": task.to_dict(),
        "settings": (settings or TrainSettings()).to_dict(),
    }
    return SweepTable("stability", cells, records, meta)


def head_sweep(
    alphas,
    layers: int,
    task: ToyTask,
    steps: int,
    seeds,
    defaults: str = "desk",
    init: InitSpec | str = "admin",
    settings: TrainSettings | None = None,
    workers: int | None = None,
    kind_suffix: bool = False,
) -> SweepTable:
    """Shallow ``αH-{layers}L`` versus its single-head reconstruction ``1H-{α·layers}L``.

    The per-head width and ``d_model`` come from ``defaults``; the FFN width
    is ``α`` times the profile's per-head FFN width, so each pair has the same
    total number of heads and matched size. Both families use the same
    ``init`` so the ``α = 1`` pair is one architecture trained twice.
    ``kind_suffix`` adds an equal-depth decoder (``αH-kL-kL``).
    """
    alphas = list(alphas)
    seeds = list(seeds)
    if not alphas or not seeds:
        raise ValueError("alphas and seeds must be non-empty")
    init = InitSpec.parse(init) if isinstance(init, str) else init
    jobs, tags = [], []
    for a in alphas:
        name = f"{a}H-{layers}L" + (f"-{layers}L" if kind_suffix else "")
        shallow = parse_shorthand(name, defaults)
        deep = reconstruct(shallow)
        for seed in seeds:
            jobs.append(dict(config=shallow, init=init, task=task, seed=seed, steps=steps, settings=settings))
            tags.append((a, "shallow", shallow))
            jobs.append(
                dict(config=deep, init=deep_init(init, shallow), task=task, seed=seed, steps=steps, settings=settings)
            )
            tags.append((a, "deep", deep))
    records = run_jobs(jobs, workers)
    cells: dict[str, dict] = {}
    for (a, role, cfg), rec in zip(tags, records):
        row = cells.setdefault(str(a), {"alpha": a})
        row[f"{role}_model"] = cfg.shorthand()
        row[f"{role}_params"] = count_params(cfg, "built")
        row.setdefault(f"{role}_val_loss", []).append(rec.final_val_loss)
        row.setdefault(f"{role}_val_accuracy", []).append(rec.final_val_accuracy)
        row.setdefault(f"{role}_status", []).append(rec.status)
    for row in cells.values():
        row["gap"] = [s - d for s, d in zip(row["shallow_val_loss"], row["deep_val_loss"])]
        row["mean_gap"] = float(np.mean(row["gap"]))
    meta = {
        "layers": layers,
        "seeds": seeds,
        "steps": steps,
        "defaults": defaults,
        "init": init.describe(),
        "task": task.to_dict(),
        "settings": (settings or TrainSettings()).to_dict(),
    }
    return SweepTable("heads", cells, records, meta)
