"""Tensor primitives used by the model.

Tensors are ``torch.Tensor`` values; torch's autograd provides the reverse-mode
differentiation. The functions here pin down the exact conventions the model
relies on (shape errors, zero-variance layer norm, inverted dropout) and the
:class:`RngStream` gives reproducible counter-based random streams.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch

LN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product ``a @ b`` with leading-axis broadcasting."""
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner axes differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError as exc:
        raise ShapeError(
            f"matmul leading axes do not broadcast: {tuple(a.shape)} @ {tuple(b.shape)}"
        ) from exc
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Max-shifted softmax along ``axis``. NaN input raises."""
    if torch.isnan(x).any():
        raise FloatingPointError("softmax received NaN input")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    ex = torch.exp(shifted)
    return ex / ex.sum(dim=axis, keepdim=True)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Normalize to zero mean / unit population variance along ``axis``, then scale and shift.

    A constant input maps to ``bias`` (the centred values are exactly zero).
    """
    mean = x.mean(dim=axis, keepdim=True)
    centred = x - mean
    var = (centred * centred).mean(dim=axis, keepdim=True)
    normed = centred / torch.sqrt(var + LN_EPS)
    if axis not in (-1, x.dim() - 1):
        normed = normed.movedim(axis, -1)
        return (normed * gain + bias).movedim(-1, axis)
    return normed * gain + bias


def dropout(
    x: torch.Tensor,
    rate: float,
    training: bool,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.empty_like(x).bernoulli_(1.0 - rate, generator=generator)
    return x * keep / (1.0 - rate)


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/dw into ``.grad`` of every leaf that requires grad."""
    if loss.numel() != 1 or loss.dim() > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


class RngStream:
    """Reproducible random stream backed by the Philox counter-based generator.

    Child streams are derived by key, so producers never share state and the
    draw sequence of each child is independent of scheduling order.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int, key: Sequence[int] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.key])
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(key))

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size, dtype=np.uint64 if high > 2**63 - 1 else np.int64)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def choice(self, options, p=None):
        idx = self.generator.choice(len(options), p=p)
        return options[int(idx)]

    def torch_generator(self) -> torch.Generator:
        """A torch generator seeded from this stream (used for dropout masks)."""
        g = torch.Generator()
        g.manual_seed(int(self.generator.integers(0, 2**63 - 1)))
        return g

    def state(self) -> dict:
        """JSON-safe generator state."""
        st = self.generator.bit_generator.state
        return {
            **st,
            "state": {k: [int(v) for v in a] for k, a in st["state"].items()},
            "buffer": [int(v) for v in st["buffer"]],
        }

    def set_state(self, state: dict) -> None:
        st = dict(state)
        st["state"] = {k: np.asarray(v, dtype=np.uint64) for k, v in state["state"].items()}
        st["buffer"] = np.asarray(state["buffer"], dtype=np.uint64)
        self.generator.bit_generator.state = st


def glorot_(t: torch.Tensor, fan_in: int, fan_out: int, generator: torch.Generator | None = None) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)
    return t
