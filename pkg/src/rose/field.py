"""The dual-branch neural field.

A shared location MLP feeds three heads: a density head, a
view-dependent color head, and a view-independent illuminance
transition head. The illuminance path runs through a low-rank
denoising module that projects features into a rank-k subspace,
reconstructs them as an attention-weighted combination of M learnable
filters, and uses the reconstruction to reweight the original feature.
Density and illuminance depend on position only, so both are identical
across viewing directions by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import DTensor
from .errors import DomainError, ShapeError


@dataclass
class Encoding:
    """Sinusoidal positional encoding: [v, sin(2^0 pi v), cos(2^0 pi v), ...]."""

    n_freq: int
    include_input: bool = True

    def out_dim(self, in_dim: int) -> int:
        base = in_dim * 2 * self.n_freq
        return base + (in_dim if self.include_input else 0)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise DomainError("encode: inputs must be finite")
        B, D = v.shape
        L = self.n_freq
        freqs = np.pi * (2.0 ** np.arange(L))
        ang = v[:, None, :] * freqs[None, :, None]  # (B, L, D)
        s = np.sin(ang)
        c = np.cos(ang)
        off = D if self.include_input else 0
        out = np.empty((B, off + 2 * L * D))
        if self.include_input:
            out[:, :D] = v
        for k in range(L):
            out[:, off + 2 * k * D : off + (2 * k + 1) * D] = s[:, k, :]
            out[:, off + (2 * k + 1) * D : off + (2 * k + 2) * D] = c[:, k, :]
        return out


@dataclass
class FieldConfig:
    width: int = 128
    depth: int = 8
    skip: int = 4  # re-concat the encoded input before this layer
    n_freq_pos: int = 10
    n_freq_dir: int = 4
    lrd_enabled: bool = True
    lrd_order: str = "lrd_first"  # or "mlp_first"
    lrd_k: int = 16
    lrd_m: int = 32
    i_floor: float = 1e-4
    # Low-light inputs imply transitions well below 1; starting the head
    # dark (softplus(-1.5) ~ 0.2) spares the correction loss a long scale
    # migration between the two branches.
    i_head_bias: float = -1.5

    def __post_init__(self):
        if self.lrd_order not in ("lrd_first", "mlp_first"):
            raise DomainError(f"lrd_order must be lrd_first or mlp_first, got {self.lrd_order!r}")
        if self.lrd_enabled and self.lrd_k >= self.width:
            raise DomainError(
                f"lrd_k ({self.lrd_k}) must be smaller than the feature width ({self.width})"
            )


class Linear:
    """x @ W + b with Kaiming-uniform fan-in init."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        bound = np.sqrt(6.0 / n_in)
        self.w = ad.parameter(rng.uniform(-bound, bound, size=(n_in, n_out)), name=f"{name}.w")
        self.b = ad.parameter(np.zeros(n_out), name=f"{name}.b")

    def __call__(self, x: DTensor) -> DTensor:
        return ad.linear(x, self.w, self.b)

    def params(self):
        return [self.w, self.b]


class LRDModule:
    """Reduction-reconstruction-reweight over a bank of low-rank filters.

    f_k = reduce(f)            (B, k)
    w   = softmax(f_k @ E)     (B, M), rows sum to 1
    f_g = w @ E^T              (B, k), rank <= min(k, M)
    out = expand(f_g) * f      (B, D)
    """

    def __init__(self, width: int, k: int, m: int, rng: np.random.Generator, name: str):
        if k >= width:
            raise DomainError(f"LRD: k ({k}) must be smaller than the feature width ({width})")
        self.width = width
        self.k = k
        self.m = m
        self.reduce = Linear(width, k, rng, f"{name}.reduce")
        self.embed = ad.parameter(
            rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, m)), name=f"{name}.embed"
        )
        self.expand = Linear(k, width, rng, f"{name}.expand")

    def __call__(self, f: DTensor) -> DTensor:
        if f.shape[-1] != self.width:
            raise ShapeError(f"LRD: expected feature width {self.width}, got {f.shape[-1]}")
        f_k = self.reduce(f)
        w = ad.softmax(ad.matmul(f_k, self.embed))
        f_g = ad.matmul(w, _transpose(self.embed))
        return ad.mul(self.expand(f_g), f)

    def attention(self, f: DTensor):
        """(w, f_g) for inspection and tests."""
        f_k = self.reduce(f)
        w = ad.softmax(ad.matmul(f_k, self.embed))
        f_g = ad.matmul(w, _transpose(self.embed))
        return w, f_g

    def params(self):
        return self.reduce.params() + [self.embed] + self.expand.params()


def _transpose(t: DTensor) -> DTensor:
    """2-D transpose as an autodiff op."""
    out_data = t.data.T.copy()

    def bwd(g):
        t._accum(g.T.copy(), True)

    return ad._make(out_data, (t,), bwd)


@dataclass
class FieldSample:
    """Per-sample-point field outputs."""

    sigma: DTensor  # (P,)
    c: DTensor  # (P, 3)
    i: DTensor  # (P,)


class RoseField:
    """Location MLP + density, color, and illuminance-transition heads."""

    def __init__(self, cfg: FieldConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.pos_enc = Encoding(cfg.n_freq_pos)
        self.dir_enc = Encoding(cfg.n_freq_dir)
        in_pos = self.pos_enc.out_dim(3)
        in_dir = self.dir_enc.out_dim(3)
        W = cfg.width
        H = W // 2

        self.fx = []
        n_in = in_pos
        for li in range(cfg.depth):
            if li == cfg.skip and li > 0:
                n_in += in_pos
            self.fx.append(Linear(n_in, W, rng, f"fx.{li}"))
            n_in = W

        self.f_sigma = Linear(W, 1, rng, "sigma")
        self.c_hidden = Linear(W + in_dir, H, rng, "c.hidden")
        self.c_out = Linear(H, 3, rng, "c.out")

        self.fi_hidden0 = Linear(W, H, rng, "fi.hidden0")
        self.fi_hidden1 = Linear(H, H, rng, "fi.hidden1")
        self.fi_head = Linear(H, 1, rng, "fi.head")
        self.fi_head.b.data[:] = cfg.i_head_bias
        self.lrd = None
        self.lrd_post = None
        if cfg.lrd_enabled:
            if cfg.lrd_order == "lrd_first":
                self.lrd = LRDModule(W, cfg.lrd_k, cfg.lrd_m, rng, "lrd")
            else:
                self.lrd_post = LRDModule(H, min(cfg.lrd_k, H - 1), cfg.lrd_m, rng, "lrd")

    # -- parameters ------------------------------------------------------

    def params(self) -> dict[str, DTensor]:
        mods = [*self.fx, self.f_sigma, self.c_hidden, self.c_out,
                self.fi_hidden0, self.fi_hidden1, self.fi_head]
        out: dict[str, DTensor] = {}
        for m in mods:
            for p in m.params():
                out[p.name] = p
        for lrd in (self.lrd, self.lrd_post):
            if lrd is not None:
                for p in lrd.params():
                    out[p.name] = p
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())

    # -- forward ----------------------------------------------------------

    def trunk(self, x_enc: np.ndarray) -> DTensor:
        h = DTensor(x_enc)
        x_const = DTensor(x_enc)
        for li, lin in enumerate(self.fx):
            if li == self.cfg.skip and li > 0:
                h = ad.concat([h, x_const], axis=1)
            h = ad.relu(lin(h))
        return h

    def illum_feature(self, f_x: DTensor) -> DTensor:
        """Pre-head illuminance feature under the configured wiring."""
        if self.lrd is not None:
            f_in = self.lrd(f_x)
        else:
            f_in = f_x
        h = ad.relu(self.fi_hidden0(f_in))
        h = ad.relu(self.fi_hidden1(h))
        if self.lrd_post is not None:
            h = self.lrd_post(h)
        return h

    def forward(
        self,
        x: np.ndarray,
        d: np.ndarray | None = None,
        d_enc: np.ndarray | None = None,
    ) -> FieldSample:
        """Field outputs at points ``x`` viewed along ``d``.

        ``d`` may be pre-encoded and repeated per sample via ``d_enc``.
        Density and illuminance ignore the direction entirely.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != 3:
            raise ShapeError(f"field forward: x must be (P, 3), got {x.shape}")
        if d_enc is None:
            if d is None:
                raise ShapeError("field forward: provide d or d_enc")
            d = np.asarray(d, dtype=np.float64)
            if d.shape != x.shape:
                raise ShapeError(f"field forward: d {d.shape} must match x {x.shape}")
            d_enc = self.dir_enc(d)
        elif d_enc.shape[0] != x.shape[0]:
            raise ShapeError(
                f"field forward: d_enc rows {d_enc.shape[0]} != points {x.shape[0]}"
            )

        f_x = self.trunk(self.pos_enc(x))

        sigma = ad.softplus(self.f_sigma(f_x))
        sigma = ad.reshape(sigma, (x.shape[0],))

        ch = ad.relu(self.c_hidden(ad.concat([f_x, DTensor(d_enc)], axis=1)))
        c = ad.sigmoid(self.c_out(ch))

        hi = self.illum_feature(f_x)
        i = ad.softplus(self.fi_head(hi))
        i = ad.add(ad.reshape(i, (x.shape[0],)), self.cfg.i_floor)

        return FieldSample(sigma=sigma, c=c, i=i)
