"""Labeled synthetic datasets from structural equation models.

Six generative models, three per class:

====  =====  ==============================================================
id    label  structure
====  =====  ==============================================================
M1    0      chain       X -> Z -> Y
M2    0      fork        X <- Z -> Y
M3    0      independent X, Y, Z mutually independent
M4    1      direct edge X <- Z -> Y plus X -> Y
M5    1      collider    X -> Z <- Y (conditioning on Z opens the path)
M6    1      confounded  X <- Z -> Y plus a hidden U -> X, U -> Y
====  =====  ==============================================================

Mechanisms are random one-hidden-layer tanh MLPs of width ``k`` ("MLP-k").
Mechanism outputs are standardized before Gaussian noise of scale
``noise_scale`` is added, and every emitted column is standardized.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .numeric import RngStream

log = logging.getLogger(__name__)

MODELS = ("M1", "M2", "M3", "M4", "M5", "M6")
LABELS = {"M1": 0, "M2": 0, "M3": 0, "M4": 1, "M5": 1, "M6": 1}

TRAIN_SEED_RANGE = (0, 2**31)
TEST_SEED_RANGE = (2**31, 2**32)


class ConfigError(ValueError):
    """Invalid generator or stream configuration."""


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    label: int | None = None
    seed: int | None = None
    model_id: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = _as_matrix(self.x, "x")
        self.y = _as_matrix(self.y, "y")
        self.z = _as_matrix(self.z, "z")
        n = self.x.shape[0]
        if n < 1 or self.y.shape[0] != n or self.z.shape[0] != n:
            raise ValueError(
                f"x, y, z must share a row count >= 1, got {self.x.shape}, {self.y.shape}, {self.z.shape}"
            )
        for name in ("x", "y", "z"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"dataset {name} contains NaN or Inf")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dx(self) -> int:
        return self.x.shape[1]

    @property
    def dy(self) -> int:
        return self.y.shape[1]

    @property
    def dz(self) -> int:
        return self.z.shape[1]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.n, self.dx, self.dy, self.dz)

    def subsample(self, size: int, rng: np.random.Generator) -> "Dataset":
        """Rows drawn without replacement, or with replacement if ``size > n``."""
        replace_rows = size > self.n
        if replace_rows:
            log.warning("down-sample size %d exceeds %d rows; sampling with replacement", size, self.n)
        idx = rng.choice(self.n, size=size, replace=replace_rows)
        return Dataset(self.x[idx], self.y[idx], self.z[idx], self.label, self.seed, self.model_id, dict(self.meta))


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[1] < 1:
        raise ValueError(f"{name} must be an (n, d) matrix with d >= 1, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class GenConfig:
    n: int = 200
    dx: int = 1
    dy: int = 1
    dz: int = 5
    k: int = 16
    noise_scale: float = 0.3
    seed: int = 0
    model_id: str = "M1"
    linear: bool = False

    def __post_init__(self):
        if self.n < 1 or min(self.dx, self.dy, self.dz) < 1:
            raise ConfigError(f"n and all dimensions must be >= 1: {self}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not self.noise_scale > 0:
            raise ConfigError(f"noise_scale must be positive, got {self.noise_scale}")
        if self.model_id not in LABELS:
            raise ConfigError(f"unknown model_id {self.model_id!r}; expected one of {MODELS}")


class Mechanism:
    """``u -> W2 act(W1 u + b1) + b2`` with hidden width ``k``."""

    def __init__(self, w1, b1, w2, b2, linear: bool = False):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2
        self.linear = linear

    def __call__(self, u: np.ndarray) -> np.ndarray:
        hidden = u @ self.w1 + self.b1
        if not self.linear:
            hidden = np.tanh(hidden)
        return hidden @ self.w2 + self.b2


def sample_mechanism(in_dim: int, out_dim: int, k: int, rng: np.random.Generator, linear: bool = False) -> Mechanism:
    """Random MLP-k: weights N(0, 1), biases N(0, 0.1^2)."""
    if in_dim < 1 or out_dim < 1 or k < 1:
        raise ConfigError(f"mechanism dims must be >= 1, got in={in_dim} out={out_dim} k={k}")
    w1 = rng.standard_normal((in_dim, k))
    b1 = rng.normal(0.0, 0.1, k)
    w2 = rng.standard_normal((k, out_dim))
    b2 = rng.normal(0.0, 0.1, out_dim)
    return Mechanism(w1, b1, w2, b2, linear)


def standardize(a: np.ndarray) -> np.ndarray:
    """Column-wise zero mean, unit (population) variance; constant columns are only centred."""
    a = a - a.mean(axis=0)
    sd = a.std(axis=0)
    sd[sd == 0] = 1.0
    return a / sd


def generate(config: GenConfig) -> Dataset:
    """Draw one dataset; everything is a pure function of ``config``."""
    c = config
    rng = RngStream(c.seed).generator
    n = c.n

    def mech(i, o):
        return sample_mechanism(i, o, c.k, rng, c.linear)

    def noise(d):
        return c.noise_scale * rng.standard_normal((n, d))

    def root(d):
        return rng.standard_normal((n, d))

    def signal(*parts):
        # Each parent's contribution is standardized so none dominates by scale.
        return standardize(sum(standardize(p) for p in parts))

    m = c.model_id
    if m == "M1":
        x = root(c.dx)
        z = signal(mech(c.dx, c.dz)(x)) + noise(c.dz)
        y = signal(mech(c.dz, c.dy)(z)) + noise(c.dy)
    elif m == "M2":
        z = root(c.dz)
        x = signal(mech(c.dz, c.dx)(z)) + noise(c.dx)
        y = signal(mech(c.dz, c.dy)(z)) + noise(c.dy)
    elif m == "M3":
        x, y, z = root(c.dx), root(c.dy), root(c.dz)
    elif m == "M4":
        z = root(c.dz)
        x = signal(mech(c.dz, c.dx)(z)) + noise(c.dx)
        y = signal(mech(c.dz, c.dy)(z), mech(c.dx, c.dy)(x)) + noise(c.dy)
    elif m == "M5":
        x, y = root(c.dx), root(c.dy)
        z = signal(mech(c.dx + c.dy, c.dz)(np.hstack([x, y]))) + noise(c.dz)
    else:  # M6
        z, u = root(c.dz), root(1)
        x = signal(mech(c.dz, c.dx)(z), mech(1, c.dx)(u)) + noise(c.dx)
        y = signal(mech(c.dz, c.dy)(z), mech(1, c.dy)(u)) + noise(c.dy)

    meta = {"k": c.k, "noise_scale": c.noise_scale, "linear": c.linear}
    return Dataset(standardize(x), standardize(y), standardize(z), LABELS[m], c.seed, m, meta)


@dataclass(frozen=True)
class ConfigSpace:
    """Sets the stream samples dataset shapes and models from."""

    n: tuple[int, ...] = (50, 200)
    dz: tuple[int, ...] = (5, 10, 20)
    k: tuple[int, ...] = (16,)
    dx: int = 1
    dy: int = 1
    models: tuple[str, ...] = MODELS
    noise_scale: float = 0.3
    linear: bool = False

    def __post_init__(self):
        for name in ("n", "dz", "k", "models"):
            val = getattr(self, name)
            if isinstance(val, (int, str)):
                object.__setattr__(self, name, (val,))
            elif not isinstance(val, tuple):
                object.__setattr__(self, name, tuple(val))
            if not getattr(self, name):
                raise ConfigError(f"config space field {name!r} is empty")
        unknown = set(self.models) - set(MODELS)
        if unknown:
            raise ConfigError(f"unknown models {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfigSpace":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def check_disjoint(a: tuple[int, int], b: tuple[int, int]) -> None:
    """Raise :class:`ConfigError` if the half-open seed ranges overlap."""
    for lo, hi in (a, b):
        if not lo < hi:
            raise ConfigError(f"empty seed range [{lo}, {hi})")
    if a[0] < b[1] and b[0] < a[1]:
        raise ConfigError(f"seed ranges [{a[0]}, {a[1]}) and [{b[0]}, {b[1]}) overlap")


class DatasetStream:
    """Endless reproducible stream of fresh labeled datasets.

    Every dataset gets its own seed drawn uniformly from ``seed_range``; the
    class label is a fair coin and the model is uniform within that class.
    ``batches`` fixes one ``(n, dz, k)`` per batch so datasets stack densely.
    """

    def __init__(self, space: ConfigSpace, seed: int, seed_range: tuple[int, int] = TRAIN_SEED_RANGE):
        lo, hi = seed_range
        if not 0 <= lo < hi <= 2**64:
            raise ConfigError(f"invalid seed range [{lo}, {hi})")
        self.space = space
        self.seed = seed
        self.seed_range = (int(lo), int(hi))
        self.rng = RngStream(seed)
        self.seeds_used: list[int] = []
        self._by_label = {
            lab: [m for m in space.models if LABELS[m] == lab] for lab in (0, 1)
        }

    def _draw_seed(self) -> int:
        lo, hi = self.seed_range
        return lo + int(self.rng.generator.integers(0, hi - lo, dtype=np.uint64))

    def _draw_model(self) -> str:
        classes = [lab for lab in (0, 1) if self._by_label[lab]]
        lab = classes[int(self.rng.generator.integers(len(classes)))]
        return self.rng.choice(self._by_label[lab])

    def _draw_shape(self) -> tuple[int, int, int]:
        s = self.space
        return self.rng.choice(s.n), self.rng.choice(s.dz), self.rng.choice(s.k)

    def _make(self, n: int, dz: int, k: int, model_id: str | None = None) -> Dataset:
        s = self.space
        seed = self._draw_seed()
        model_id = model_id or self._draw_model()
        self.seeds_used.append(seed)
        cfg = GenConfig(n=n, dx=s.dx, dy=s.dy, dz=dz, k=k, noise_scale=s.noise_scale,
                        seed=seed, model_id=model_id, linear=s.linear)
        return generate(cfg)

    def __iter__(self) -> Iterator[Dataset]:
        while True:
            yield self._make(*self._draw_shape())

    def take(self, count: int) -> list[Dataset]:
        return list(itertools.islice(iter(self), count))

    def batch(self, size: int) -> list[Dataset]:
        shape = self._draw_shape()
        return [self._make(*shape) for _ in range(size)]

    def batches(self, size: int) -> Iterator[list[Dataset]]:
        while True:
            yield self.batch(size)

    def state(self) -> dict:
        return self.rng.state()

    def set_state(self, state: dict) -> None:
        self.rng.set_state(state)


def stream(space: ConfigSpace, seed: int, seed_range: tuple[int, int] = TRAIN_SEED_RANGE) -> Iterator[Dataset]:
    return iter(DatasetStream(space, seed, seed_range))


def balanced_corpus(
    space: ConfigSpace,
    count: int,
    seed: int,
    seed_range: tuple[int, int] = TEST_SEED_RANGE,
) -> list[Dataset]:
    """``count`` datasets, half H0 and half H1 (models cycled within each class)."""
    ds = DatasetStream(space, seed, seed_range)
    h0 = [m for m in space.models if LABELS[m] == 0]
    h1 = [m for m in space.models if LABELS[m] == 1]
    out = []
    for i in range(count):
        pool = (h0, h1)[i % 2] or h0 or h1
        n, dz, k = ds._draw_shape()
        out.append(ds._make(n, dz, k, pool[(i // 2) % len(pool)]))
    return out


def with_shape(space: ConfigSpace, **changes) -> ConfigSpace:
    return replace(space, **changes)


def fingerprint(space: ConfigSpace) -> str:
    return hashlib.sha256(json.dumps(space.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
