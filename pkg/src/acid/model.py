"""Whole-dataset encoder and classifier.

A dataset enters as three matrices ``X (n, dX)``, ``Y (n, dY)``, ``Z (n, dZ)``
(with an optional leading batch axis). Every entry is embedded to a vector of
size ``e``; ``L`` layers then mix information with three kinds of attention:

* self-attention over the dimensions of each row (SoD),
* cross-attention from the Z dimensions into the X and Y dimensions (CoD),
* self-attention over the samples of each column (SoS).

The final X and Y representations are compared with ``h`` squared dot-product
heads, averaged over samples and max-pooled over dimension pairs, giving an
``h``-vector that an MLP maps to a single logit. X and Y go through the same
modules, so swapping them leaves the logit unchanged.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
from torch import nn
import torch.nn.functional as F

from . import numeric

SUMMARY_EPS = 1e-6
OUTPUT_INIT_SCALE = 0.01


@dataclass(frozen=True)
class ModelConfig:
    e: int = 32
    h: int = 8
    L: int = 4
    dropout_rate: float = 0.1
    ffn_hidden: int = 2
    classifier_hidden: int = 64

    def __post_init__(self):
        if self.e < 1 or self.h < 1 or self.L < 1:
            raise ValueError(f"e, h, L must be >= 1, got {self.e}, {self.h}, {self.L}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.ffn_hidden < 1 or self.classifier_hidden < 1:
            raise ValueError("ffn_hidden and classifier_hidden must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """``softmax(q k^T / sqrt(e)) v`` over the last two axes; ``e`` is the query width."""
    scores = numeric.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    return numeric.matmul(numeric.softmax(scores, axis=-1), v)


def _fast_attention(q, k, v):
    # Same formula as attention() without the NaN guard; the float32 hot path.
    if not (torch.is_grad_enabled() and (q.requires_grad or k.requires_grad or v.requires_grad)):
        # The fused kernel never materializes the score matrix: ~4x faster at
        # large n, but its backward is slower than the plain version below.
        return F.scaled_dot_product_attention(q, k, v)
    scores = (q * (1.0 / math.sqrt(q.shape[-1]))) @ k.transpose(-1, -2)
    return torch.softmax(scores, dim=-1) @ v


class FFN(nn.Module):
    """Position-wise two-layer perceptron with ReLU."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(d_in, d_hidden))
        self.b1 = nn.Parameter(torch.zeros(d_hidden))
        self.w2 = nn.Parameter(torch.empty(d_hidden, d_out))
        self.b2 = nn.Parameter(torch.zeros(d_out))

    def forward(self, x):
        return F.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2


class MHAttn(nn.Module):
    """Multi-head attention block with residual projection, layer norm and FFN.

    ``IR = LN(A Wr + Dropout(mha(A, B)))`` and the output is
    ``A Wr + Dropout(FFN(IR))``. Each head works at the full width ``e``:
    head ``i`` projects ``A`` and ``B`` with ``W_i^A``/``W_i^B`` and then applies
    its own query/key/value maps; ``W^H`` mixes the ``h`` concatenated heads.
    """

    def __init__(self, d_a: int, d_b: int, cfg: ModelConfig):
        super().__init__()
        e, h = cfg.e, cfg.h
        self.e, self.h = e, h
        self.rate = cfg.dropout_rate
        self.w_a = nn.Parameter(torch.empty(h, d_a, e))
        self.w_b = nn.Parameter(torch.empty(h, d_b, e))
        self.w_q = nn.Parameter(torch.empty(h, e, e))
        self.w_k = nn.Parameter(torch.empty(h, e, e))
        self.w_v = nn.Parameter(torch.empty(h, e, e))
        self.w_h = nn.Parameter(torch.empty(h * e, e))
        self.w_res = nn.Parameter(torch.empty(d_a, e))
        self.ln_gain = nn.Parameter(torch.ones(e))
        self.ln_bias = nn.Parameter(torch.zeros(e))
        self.ffn = FFN(e, cfg.ffn_hidden * e, e)

    def _joint(self, w_in: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        # Compose per-head (d, e) and (e, e) maps into one (d, h*e) matrix so a
        # single matmul projects every head at once.
        return (w_in @ w).permute(1, 0, 2).reshape(w_in.shape[1], self.h * self.e)

    def _split_heads(self, t: torch.Tensor) -> torch.Tensor:
        # (..., n, h*e) -> (..., h, n, e)
        return t.unflatten(-1, (self.h, self.e)).movedim(-2, -3)

    def mha(self, a: torch.Tensor, b: torch.Tensor, exact: bool = False) -> torch.Tensor:
        """a: (..., n, dA), b: (..., m, dB) -> (..., n, e)."""
        wq = self._joint(self.w_a, self.w_q)
        wk = self._joint(self.w_b, self.w_k)
        wv = self._joint(self.w_b, self.w_v)
        if a is b:
            q, k, v = (a @ torch.cat([wq, wk, wv], dim=1)).chunk(3, dim=-1)
        else:
            q = a @ wq
            k, v = (b @ torch.cat([wk, wv], dim=1)).chunk(2, dim=-1)
        q, k, v = self._split_heads(q), self._split_heads(k), self._split_heads(v)
        heads = attention(q, k, v) if exact else _fast_attention(q, k, v)
        return heads.movedim(-3, -2).flatten(-2) @ self.w_h

    def forward(self, a, b=None, *, training=False, generator=None, exact=False):
        if b is None:
            b = a
        res = a @ self.w_res
        drop = lambda t: numeric.dropout(t, self.rate, training, generator)  # noqa: E731
        ir = numeric.layer_norm(res + drop(self.mha(a, b, exact)), self.ln_gain, self.ln_bias)
        return res + drop(self.ffn(ir))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        e = cfg.e
        self.sod_xy = MHAttn(e, e, cfg)
        self.sod_z = MHAttn(e, e, cfg)
        self.cod = MHAttn(e, e, cfg)
        self.sos_xy = MHAttn(e, e, cfg)
        self.sos_z = MHAttn(e, e, cfg)
        self.ffn_xy = FFN(e, cfg.ffn_hidden * e, e)
        self.ffn_z = FFN(e, cfg.ffn_hidden * e, e)

    def forward(self, x, y, z, *, training=False, generator=None, exact=False):
        """x: (B, n, dX, e), y: (B, n, dY, e), z: (B, n, dZ, e)."""
        kw = dict(training=training, generator=generator, exact=exact)
        dx = x.shape[-2]
        xy = torch.cat([x, y], dim=-2)

        # SoD: attention across the dimensions of one variable, row by row.
        if x.shape == y.shape:
            sod = self.sod_xy(torch.stack([x, y]), **kw)
            sod_x, sod_y = sod[0], sod[1]
        else:
            sod_x, sod_y = self.sod_xy(x, **kw), self.sod_xy(y, **kw)
        sod_z = self.sod_z(z, **kw)

        # CoD: X and Y dimensions query the Z dimensions of the same row.
        # Queries are independent, so X and Y share one call.
        cod = self.cod(xy, z, **kw)

        # SoS: attention across samples, column by column.
        sos = self.sos_xy(xy.transpose(-2, -3), **kw).transpose(-2, -3)
        sos_z = self.sos_z(z.transpose(-2, -3), **kw).transpose(-2, -3)

        x_new = self.ffn_xy(x + sod_x + cod[..., :dx, :] + sos[..., :dx, :])
        y_new = self.ffn_xy(y + sod_y + cod[..., dx:, :] + sos[..., dx:, :])
        z_new = self.ffn_z(z + sod_z + sos_z)
        return x_new, y_new, z_new


def summary_statistic(xt: torch.Tensor, yt: torch.Tensor) -> torch.Tensor:
    """Per-head dependence magnitudes.

    xt: (..., n, dX, h, e), yt: (..., n, dY, h, e) -> (..., h). Squared dot
    products over the embedding axis, averaged over samples, max over the
    (X-dim, Y-dim) grid.
    """
    s = torch.einsum("...oirc,...ojrc->...oijr", xt, yt) ** 2
    m = s.mean(dim=-4)  # (..., dX, dY, h)
    return m.flatten(-3, -2).amax(dim=-2)


class ACID(nn.Module):
    """Amortized conditional independence classifier (one logit per dataset)."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        e, h = cfg.e, cfg.h
        self.emb_xy = FFN(1, cfg.ffn_hidden * e, e)
        self.emb_z = FFN(1, cfg.ffn_hidden * e, e)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.L))
        self.summary = FFN(e, cfg.ffn_hidden * e, h * e)
        self.classifier = FFN(h, cfg.classifier_hidden, 1)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        g = torch.Generator().manual_seed(int(seed))
        for name, p in self.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.startswith("b") or leaf == "ln_bias":
                nn.init.zeros_(p)
            elif leaf == "ln_gain":
                nn.init.ones_(p)
            else:
                fan_in, fan_out = p.shape[-2], p.shape[-1]
                numeric.glorot_(p, fan_in, fan_out, g)
        with torch.no_grad():
            # Start near logit 0 so early training is not pinned to one class.
            self.classifier.w2.mul_(OUTPUT_INIT_SCALE)

    def embed(self, x, y, z):
        """Scalar entries -> e-vectors: (..., n, d) -> (..., n, d, e)."""
        return (
            self.emb_xy(x.unsqueeze(-1)),
            self.emb_xy(y.unsqueeze(-1)),
            self.emb_z(z.unsqueeze(-1)),
        )

    def encode(self, x, y, z, *, training=False, generator=None, exact=False):
        ex, ey, ez = self.embed(x, y, z)
        for layer in self.layers:
            ex, ey, ez = layer(ex, ey, ez, training=training, generator=generator, exact=exact)
        return ex, ey, ez

    def summarize(self, ex: torch.Tensor, ey: torch.Tensor) -> torch.Tensor:
        h, e = self.cfg.h, self.cfg.e
        xt = self.summary(ex).unflatten(-1, (h, e))
        yt = self.summary(ey).unflatten(-1, (h, e))
        return summary_statistic(xt, yt)

    def forward(self, x, y, z, *, training=False, generator=None, exact=None):
        """Logits for a batch ``(B, n, d*)`` or a single dataset ``(n, d*)``.

        ``exact`` selects the explicit softmax attention path instead of the
        fused kernel; it defaults to on for float64 parameters.
        """
        if exact is None:
            exact = self.classifier.w1.dtype == torch.float64
        ex, ey, ez = self.encode(x, y, z, training=training, generator=generator, exact=exact)
        # The classifier sees log R: R spans orders of magnitude across datasets
        # and the raw squared dot products starve the gradient near zero.
        r = torch.log(self.summarize(ex, ey) + SUMMARY_EPS)
        return self.classifier(r).squeeze(-1)

    @property
    def dtype(self) -> torch.dtype:
        return self.classifier.w1.dtype

    def logit(self, dataset, training: bool = False) -> float:
        """Logit for one :class:`acid.synthgen.Dataset` in inference mode."""
        with torch.inference_mode():
            x, y, z = (torch.as_tensor(m, dtype=self.dtype) for m in (dataset.x, dataset.y, dataset.z))
            out = self(x, y, z, training=training)
        val = float(out)
        if not math.isfinite(val):
            raise FloatingPointError(
                f"non-finite logit for dataset seed={dataset.seed} model={dataset.model_id} "
                f"shape=({dataset.n}, {dataset.dx}, {dataset.dy}, {dataset.dz})"
            )
        return val
