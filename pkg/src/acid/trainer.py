"""Supervised training on streams of fresh synthetic datasets."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import io
from .evaluation import auc
from .model import ACID
from .numeric import RngStream, backward
from .synthgen import TRAIN_SEED_RANGE, ConfigError, ConfigSpace, Dataset, DatasetStream, check_disjoint

log = logging.getLogger(__name__)

# Attention-score budget per micro-batch (number of floats in one SoS score tensor).
MICRO_BATCH_BUDGET = 6_000_000


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, msg, step=None, seeds=None, last_checkpoint=None):
        super().__init__(msg)
        self.step = step
        self.seeds = seeds
        self.last_checkpoint = last_checkpoint


def bce_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean binary cross entropy on logits, ``softplus(l) - g*l`` form."""
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    if logits.shape != labels.shape or logits.numel() < 1:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} must match and be non-empty")
    return (F.softplus(logits) - labels * logits).mean()


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the original norm."""
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    config_space: ConfigSpace = field(default_factory=ConfigSpace)
    seed_range: tuple = TRAIN_SEED_RANGE
    checkpoint_every: int = 500
    telemetry_every: int = 10
    telemetry_window: int = 20
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.config_space, dict):
            self.config_space = ConfigSpace.from_dict(self.config_space)
        self.seed_range = tuple(self.seed_range)
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["config_space"] = self.config_space.to_dict()
        d["seed_range"] = list(self.seed_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def stack(datasets: Sequence[Dataset], dtype=torch.float32):
    """Equal-shape datasets -> (B, n, d) tensors for x, y, z."""
    shapes = {d.shape for d in datasets}
    if len(shapes) != 1:
        raise ValueError(f"datasets in one batch must share a shape, got {sorted(shapes)}")
    return tuple(torch.as_tensor(np.stack([getattr(d, a) for d in datasets]), dtype=dtype) for a in "xyz")


def micro_batch_size(ds: Dataset, h: int, budget: int | None = None) -> int:
    budget = MICRO_BATCH_BUDGET if budget is None else budget
    per = h * ds.n * ds.n * (ds.dx + ds.dy + ds.dz)
    return max(1, budget // per)


def batch_logits(model: ACID, datasets: Sequence[Dataset], *, training=False, generator=None) -> torch.Tensor:
    """Logits for equal-shape datasets, evaluated in memory-bounded chunks (no grad)."""
    out = []
    chunk = micro_batch_size(datasets[0], model.cfg.h)
    with torch.no_grad():
        for i in range(0, len(datasets), chunk):
            x, y, z = stack(datasets[i : i + chunk], model.dtype)
            out.append(model(x, y, z, training=training, generator=generator))
    return torch.cat(out)


def predict(model: ACID, datasets: Sequence[Dataset]) -> np.ndarray:
    """Inference-mode logits for datasets of any mix of shapes."""
    model.eval()
    groups: dict = {}
    for i, d in enumerate(datasets):
        groups.setdefault(d.shape, []).append(i)
    out = np.empty(len(datasets))
    for idx in groups.values():
        out[idx] = batch_logits(model, [datasets[i] for i in idx]).double().numpy()
    return out


def grad_step(model: ACID, datasets: Sequence[Dataset], generator=None) -> tuple[float, torch.Tensor]:
    """Forward + backward of the mean BCE over ``datasets``, accumulated chunkwise.

    Gradients land in ``p.grad``; returns the loss and the (detached) logits.
    """
    labels = torch.tensor([d.label for d in datasets], dtype=model.dtype)
    chunk = micro_batch_size(datasets[0], model.cfg.h)
    total, logits = 0.0, []
    for i in range(0, len(datasets), chunk):
        part = datasets[i : i + chunk]
        x, y, z = stack(part, model.dtype)
        out = model(x, y, z, training=True, generator=generator)
        loss = bce_loss(out, labels[i : i + len(part)]) * (len(part) / len(datasets))
        backward(loss)
        total += float(loss.detach())
        logits.append(out.detach())
    return total, torch.cat(logits)


class TrainingLog(list):
    """Telemetry records; optionally mirrored to a JSON-lines file."""

    def __init__(self, path=None):
        super().__init__()
        self.path = Path(path) if path else None

    def append(self, record: dict) -> None:
        super().append(record)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


class Trainer:
    """Owns the optimizer state, streams and RNGs of one training run."""

    def __init__(self, model: ACID, config: TrainConfig, *, log_path=None, checkpoint_path=None,
                 forbidden_seed_ranges: Iterable = ()):
        for r in forbidden_seed_ranges:
            check_disjoint(tuple(config.seed_range), tuple(r))
        self.model = model
        self.config = config
        self.step = 0
        self.opt = AdamState()
        self.stream = DatasetStream(config.config_space, config.seed, config.seed_range)
        self.dropout_gen = RngStream(config.seed, (1,)).torch_generator()
        self.log = TrainingLog(log_path)
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.last_checkpoint = None
        self._window = deque(maxlen=config.telemetry_window)
        self._t0 = time.perf_counter()

    # -- state --------------------------------------------------------------
    def rng_state(self) -> dict:
        return {"stream": self.stream.state(), "dropout": io.torch_generator_state(self.dropout_gen)}

    def restore(self, info: dict) -> None:
        self.step = int(info.get("step", 0))
        if info.get("optimizer") is not None:
            self.opt = info["optimizer"]
        rng = info.get("rng_state") or {}
        if "stream" in rng:
            self.stream.set_state(rng["stream"])
        if "dropout" in rng:
            io.set_torch_generator_state(self.dropout_gen, rng["dropout"])

    def save(self, path=None) -> Path:
        path = Path(path or self.checkpoint_path)
        io.save_checkpoint(path, self.model, step=self.step, optimizer_state=self.opt,
                           rng_state=self.rng_state(), extra={"train_config": self.config.to_dict()})
        self.last_checkpoint = path
        return path

    # -- loop ---------------------------------------------------------------
    def train_on(self, datasets: Sequence[Dataset]) -> float:
        """One optimizer step on ``datasets`` (all of one shape)."""
        cfg = self.config
        self.model.train()
        for p in self.model.parameters():
            p.grad = None
        loss, logits = grad_step(self.model, datasets, self.dropout_gen)
        if not math.isfinite(loss):
            seeds = [d.seed for d in datasets]
            raise NumericalError(
                f"non-finite loss at step {self.step + 1} (batch seeds {seeds[:8]}...); "
                f"last good checkpoint: {self.last_checkpoint}",
                step=self.step + 1, seeds=seeds, last_checkpoint=self.last_checkpoint,
            )
        params = dict(self.model.named_parameters())
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        if cfg.clip_norm:
            clip_grad_norm(grads, cfg.clip_norm)
        adam_step(params, grads, self.opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        self.step += 1
        self._window.append((logits.double().numpy(), np.array([d.label for d in datasets])))
        if cfg.telemetry_every and self.step % cfg.telemetry_every == 0:
            self.log.append(self.telemetry(loss))
        return loss

    def telemetry(self, loss: float) -> dict:
        scores = np.concatenate([w[0] for w in self._window])
        labels = np.concatenate([w[1] for w in self._window])
        rec = {"step": self.step, "loss": loss, "running_auc": None, "h0_logit_mean": None,
               "h1_logit_mean": None, "wallclock_ms": round(1000 * (time.perf_counter() - self._t0), 1)}
        if (labels == 0).any():
            rec["h0_logit_mean"] = float(scores[labels == 0].mean())
        if (labels == 1).any():
            rec["h1_logit_mean"] = float(scores[labels == 1].mean())
        if rec["h0_logit_mean"] is not None and rec["h1_logit_mean"] is not None:
            rec["running_auc"] = auc(scores, labels)
        return rec

    def run(self, steps: int | None = None) -> TrainingLog:
        """Train until ``config.steps`` (or ``steps`` more) optimizer steps have been taken."""
        cfg = self.config
        target = cfg.steps if steps is None else self.step + steps
        while self.step < target:
            self.train_on(self.stream.batch(cfg.batch_size))
            if self.checkpoint_path and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                self.save()
        if self.checkpoint_path:
            self.save()
        self.model.eval()
        return self.log


def train(model: ACID, config: TrainConfig, **kw) -> tuple[ACID, TrainingLog]:
    tr = Trainer(model, config, **kw)
    return model, tr.run()


def finetune(model: ACID, corpus: Sequence[Dataset], config: TrainConfig, *, down_sample: int = 50,
             optimizer_state: AdamState | None = None, **kw) -> tuple[ACID, TrainingLog]:
    """Continue training on row-subsampled copies of labeled corpus datasets.

    Each batch picks one shape group of the corpus, then ``batch_size``
    datasets from it, each cut down to ``down_sample`` rows.
    """
    if not corpus:
        raise ConfigError("fine-tuning corpus is empty")
    if any(d.label is None for d in corpus):
        raise ConfigError("fine-tuning corpus contains unlabeled datasets")
    tr = Trainer(model, config, **kw)
    if optimizer_state is not None:
        tr.opt = optimizer_state
    rng = RngStream(config.seed, (2,)).generator
    groups: dict = {}
    for d in corpus:
        groups.setdefault(d.shape[1:], []).append(d)
    keys = sorted(groups)
    weights = np.array([len(groups[k]) for k in keys], dtype=float)
    for _ in range(config.steps):
        key = keys[int(rng.choice(len(keys), p=weights / weights.sum()))]
        pool = groups[key]
        picks = rng.integers(0, len(pool), size=config.batch_size)
        tr.train_on([pool[int(i)].subsample(down_sample, rng) for i in picks])
    model.eval()
    return model, tr.log
