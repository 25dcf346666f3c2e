"""The unsupervised training objective.

Reconstruction: squared error between the rendered low-light color and
the observation, with dark observations optionally remapped by the
inverse tone curve phi(x) = 1/2 - sin(asin(1 - 2x) / 3) so small pixel
values carry more weight. The remap models the camera's tone-mapped
output; datasets that store linear radiance (the synthetic generator
here) disable it via ``tone_curve_enabled``.

Illumination correction: squared distance between the batch-pooled mean
of the rendered normal-light colors and the desired illumination level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DTensor
from .errors import DomainError, ShapeError


@dataclass
class LossConfig:
    e_target: float = 0.45
    lambda_ic: float = 1e-3
    eps_tone: float = 1e-3
    tone_clamp: bool = True
    tone_curve_enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.e_target < 1.0:
            raise DomainError(f"e_target must lie in (0, 1), got {self.e_target}")
        if self.lambda_ic < 0.0:
            raise DomainError(f"lambda_ic must be >= 0, got {self.lambda_ic}")
        if self.eps_tone <= 0.0:
            raise DomainError(f"eps_tone must be > 0, got {self.eps_tone}")


def tone_curve(x, clamp: bool = False):
    """phi(x) = 1/2 - sin(asin(1 - 2x) / 3), monotone on [0, 1].

    Accepts a DTensor (differentiable) or a numpy array. Inputs outside
    [0, 1] raise a DomainError unless ``clamp`` is set.
    """
    if isinstance(x, DTensor):
        if clamp:
            x = DTensor(np.clip(x.data, 0.0, 1.0)) if not x.requires_grad else _clip01(x)
        inner = ad.asin(ad.sub(1.0, ad.mul(x, 2.0)))
        return ad.sub(0.5, ad.sin(ad.div(inner, 3.0)))
    x = np.asarray(x, dtype=np.float64)
    if clamp:
        x = np.clip(x, 0.0, 1.0)
    elif x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise DomainError(
            f"tone_curve: inputs must lie in [0, 1], got range [{x.min():.6g}, {x.max():.6g}]"
        )
    return 0.5 - np.sin(np.arcsin(1.0 - 2.0 * x) / 3.0)


def _clip01(x: DTensor) -> DTensor:
    """Differentiable clamp to [0, 1] (zero gradient outside)."""
    data = np.clip(x.data, 0.0, 1.0)
    inside = (x.data > 0.0) & (x.data < 1.0)

    def bwd(g):
        x._accum(g * inside, True)

    return ad._make(data, (x,), bwd)


def mse_target(c_low_obs: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """The regression target for observed low-light colors."""
    obs = np.asarray(c_low_obs, dtype=np.float64)
    if obs.size and (obs.min() < 0.0 or obs.max() > 1.0):
        raise DomainError("loss_mse: observations must lie in [0, 1]")
    if not cfg.tone_curve_enabled:
        return obs
    shifted = obs + cfg.eps_tone
    if cfg.tone_clamp:
        shifted = np.clip(shifted, 0.0, 1.0)
    return tone_curve(shifted)


def loss_mse(c_low_pred: DTensor, c_low_obs: np.ndarray, cfg: LossConfig) -> DTensor:
    """Per-ray mean of the squared L2 between prediction and (remapped)
    observation. The remap applies to the observation side only."""
    target = mse_target(c_low_obs, cfg)
    if c_low_pred.shape != target.shape:
        raise ShapeError(
            f"loss_mse: prediction {c_low_pred.shape} vs observation {target.shape}"
        )
    n_rays = target.shape[0]
    if n_rays == 0:
        raise ShapeError("loss_mse: empty batch")
    sq = ad.square(ad.sub(c_low_pred, target))
    return ad.mul(ad.tsum(sq), 1.0 / n_rays)


def _pooled_mean(t: DTensor) -> DTensor:
    """Global average pooling whose value is bit-identical under any
    permutation of the entries (summation order fixed by sorting)."""
    val = np.asarray(np.sort(t.data, axis=None).mean())

    def bwd(g):
        t._accum(np.full(t.shape, float(g) / t.data.size), True)

    return ad._make(val, (t,), bwd)


def loss_ic(c_nor_pred: DTensor, cfg: LossConfig) -> DTensor:
    """Squared distance between the pooled mean intensity and e_target."""
    if c_nor_pred.size == 0:
        raise ShapeError("loss_ic: empty batch")
    gap = _pooled_mean(c_nor_pred)
    return ad.square(ad.sub(gap, cfg.e_target))


def loss_total(mse: DTensor, ic: DTensor, cfg: LossConfig) -> DTensor:
    return ad.add(mse, ad.mul(ic, cfg.lambda_ic))


def tv_penalty(i_samples: DTensor) -> DTensor:
    """Total variation of per-sample illuminance along each ray (the
    ablation alternative to the low-rank module): per-ray mean of
    sum_n |i_{n+1} - i_n|."""
    if i_samples.ndim != 2:
        raise ShapeError(f"tv_penalty: expected (B, N), got {i_samples.shape}")
    B, N = i_samples.shape
    diff = ad.sub(_slice_cols(i_samples, 1, N), _slice_cols(i_samples, 0, N - 1))
    return ad.mul(ad.tsum(ad.tabs(diff)), 1.0 / B)


def _slice_cols(t: DTensor, lo: int, hi: int) -> DTensor:
    data = t.data[:, lo:hi]

    def bwd(g):
        full = np.zeros_like(t.data)
        full[:, lo:hi] = g
        t._accum(full, True)

    return ad._make(data, (t,), bwd)
