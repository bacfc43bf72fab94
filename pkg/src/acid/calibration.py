"""Null distribution of the test statistic and p-values.

The logits of H0 datasets are modelled by a skew-normal law with location
``xi``, scale ``omega`` and shape ``alpha``::

    pdf(t) = 2/omega * phi(u) * Phi(alpha * u),   u = (t - xi) / omega
    cdf(t) = Phi(u) - 2 * T(u, alpha)             (T = Owen's T function)

Large logits are evidence for dependence, so the p-value is the right tail
``1 - cdf(logit)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, special, stats

from .synthgen import LABELS, ConfigError, ConfigSpace, DatasetStream, TRAIN_SEED_RANGE, fingerprint

FORMAT_VERSION = 1
MIN_NULL_COUNT = 100
_MAX_SKEW = 0.9952717464311565  # |skewness| supremum of the family
_LOG2 = math.log(2.0)

REJECT = "reject_H0"
FAIL_TO_REJECT = "fail_to_reject"


class DegenerateSampleError(ValueError):
    pass


def skewnorm_logpdf(t, loc, scale, shape):
    u = (np.asarray(t, dtype=np.float64) - loc) / scale
    return _LOG2 - math.log(scale) - 0.5 * u * u - 0.5 * math.log(2 * math.pi) + special.log_ndtr(shape * u)


def skewnorm_cdf(t, loc, scale, shape):
    u = (np.asarray(t, dtype=np.float64) - loc) / scale
    return np.clip(special.ndtr(u) - 2.0 * special.owens_t(u, shape), 0.0, 1.0)


def skewnorm_sf(t, loc, scale, shape):
    # 1 - cdf written without the cancellation in the right tail.
    u = (np.asarray(t, dtype=np.float64) - loc) / scale
    return np.clip(special.ndtr(-u) + 2.0 * special.owens_t(u, shape), 0.0, 1.0)


@dataclass
class NullDistribution:
    location: float
    scale: float
    shape: float
    n_fit: int = 0
    log_likelihood: float = float("nan")
    ks_statistic: float = float("nan")
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def cdf(self, t):
        return skewnorm_cdf(t, self.location, self.scale, self.shape)

    def sf(self, t):
        return skewnorm_sf(t, self.location, self.scale, self.shape)

    def logpdf(self, t):
        return skewnorm_logpdf(t, self.location, self.scale, self.shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format_version"] = FORMAT_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NullDistribution":
        if d.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
            raise ValueError(f"unsupported calibration format_version {d.get('format_version')}")
        keys = ("location", "scale", "shape", "n_fit", "log_likelihood", "ks_statistic", "provenance")
        return cls(**{k: d[k] for k in keys if k in d})


def moment_init(samples) -> tuple[float, float, float]:
    """Method-of-moments (location, scale, shape), skewness clipped into the attainable range."""
    x = np.asarray(samples, dtype=np.float64)
    mean, sd = x.mean(), x.std()
    g = float(stats.skew(x))
    g = float(np.clip(g, -_MAX_SKEW + 1e-4, _MAX_SKEW - 1e-4))
    a = abs(g) ** (2.0 / 3.0)
    delta = math.copysign(math.sqrt(math.pi / 2 * a / (a + ((4 - math.pi) / 2) ** (2.0 / 3.0))), g)
    delta = float(np.clip(delta, -0.995, 0.995))
    shape = delta / math.sqrt(1 - delta * delta)
    scale = sd / math.sqrt(1 - 2 * delta * delta / math.pi)
    loc = mean - scale * delta * math.sqrt(2 / math.pi)
    return loc, scale, shape


def fit_skew_normal(samples, min_count: int = MIN_NULL_COUNT) -> NullDistribution:
    """Maximum-likelihood skew-normal fit by Nelder-Mead from the moment estimate."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size < min_count:
        raise ConfigError(f"need a 1-d sample of at least {min_count} values, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("samples contain NaN or Inf")
    if x.std() == 0:
        raise DegenerateSampleError("samples have zero variance")
    loc0, scale0, shape0 = moment_init(x)
    # Work on standardized data so the simplex sees unit-scale parameters.
    mu, sd = x.mean(), x.std()
    xs = (x - mu) / sd

    def nll(theta):
        loc, log_scale, shape = theta
        return -float(np.sum(skewnorm_logpdf(xs, loc, math.exp(log_scale), shape)))

    theta0 = np.array([(loc0 - mu) / sd, math.log(scale0 / sd), shape0])
    best = None
    for start in (theta0, np.array([theta0[0], theta0[1], 0.0])):
        res = optimize.minimize(nll, start, method="Nelder-Mead",
                                options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 20000, "maxfev": 40000})
        if best is None or res.fun < best.fun:
            best = res
    loc_s, log_scale_s, shape = best.x
    loc = mu + sd * loc_s
    scale = sd * math.exp(log_scale_s)
    null = NullDistribution(float(loc), float(scale), float(shape), n_fit=int(x.size))
    null.log_likelihood = float(np.sum(null.logpdf(x)))
    null.ks_statistic = float(stats.kstest(x, null.cdf).statistic)
    return null


def p_value(logit, null: NullDistribution) -> float:
    """Right-tail probability of the fitted null beyond ``logit``."""
    return float(null.sf(logit))


def decide(p: float, alpha: float = 0.05) -> str:
    """Reject H0 iff ``p < alpha`` (equality does not reject)."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return REJECT if p < alpha else FAIL_TO_REJECT


def collect_null_logits(model, space: ConfigSpace, count: int, seed: int,
                        seed_range: tuple[int, int] = TRAIN_SEED_RANGE) -> np.ndarray:
    """Inference-mode logits of ``count`` fresh H0 datasets drawn from ``space``."""
    from .trainer import predict

    if count < MIN_NULL_COUNT:
        raise ConfigError(f"null count must be >= {MIN_NULL_COUNT}, got {count}")
    h0 = tuple(m for m in space.models if LABELS[m] == 0)
    if not h0:
        raise ConfigError("config space has no H0 models")
    stream = DatasetStream(ConfigSpace.from_dict({**space.to_dict(), "models": list(h0)}), seed, seed_range)
    return predict(model, stream.take(count))


def calibrate(model, space: ConfigSpace, count: int = 2000, seed: int = 0,
              seed_range: tuple[int, int] = TRAIN_SEED_RANGE, model_fingerprint: str | None = None) -> NullDistribution:
    logits = collect_null_logits(model, space, count, seed, seed_range)
    null = fit_skew_normal(logits)
    null.provenance = {
        "config_space": space.to_dict(),
        "config_space_fingerprint": fingerprint(space),
        "model_fingerprint": model_fingerprint,
        "seed": seed,
        "seed_range": list(seed_range),
    }
    return null
