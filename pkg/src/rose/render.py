"""Volume rendering of per-sample field outputs into per-ray quantities.

Per ray, the transmittance-weighted sums of sample colors and sample
illuminance transitions give the normal-light color and the illuminance
transition value; their product reconstructs the observed low-light
color. Both sums consume the same weights (same densities, same
spacings).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DTensor
from .cameras import Camera, RayBundle, hierarchical_samples, rays_for_pixels, stratified_samples
from .errors import DomainError, ShapeError
from .field import FieldSample, RoseField


@dataclass
class RenderedRay:
    """Per-ray integrated quantities (batched)."""

    c_nor: DTensor  # (B, 3)
    i_trans: DTensor  # (B,)
    c_low: DTensor  # (B, 3)
    acc: DTensor  # (B,)
    weights: DTensor  # (B, N)


def render_rays(samples: FieldSample, bundle: RayBundle, white_bkgd: bool = False) -> RenderedRay:
    """Integrate flat field samples (P = B*N points, ray-major) along rays."""
    if bundle.t_vals is None or bundle.deltas is None:
        raise ShapeError("render_rays: bundle carries no samples")
    B, N = bundle.t_vals.shape
    if samples.sigma.size != B * N:
        raise ShapeError(
            f"render_rays: {samples.sigma.size} samples do not align with "
            f"{B} rays x {N} depths"
        )
    if np.min(samples.sigma.data) < 0:
        raise DomainError("render_rays: negative density violates the field invariant")
    if np.min(bundle.deltas) < 0:
        raise DomainError("render_rays: negative sample spacing")

    sigma = ad.reshape(samples.sigma, (B, N))
    c = ad.reshape(samples.c, (B, N, 3))
    ivals = ad.reshape(samples.i, (B, N))

    optical = ad.mul(sigma, bundle.deltas)
    alpha = ad.sub(1.0, ad.exp(ad.neg(optical)))
    trans = ad.exp(ad.neg(ad.cumsum_exclusive(optical, axis=1)))
    weights = ad.mul(trans, alpha)  # (B, N)

    acc = ad.tsum(weights, axis=1)
    c_nor = ad.tsum(ad.mul(ad.reshape(weights, (B, N, 1)), c), axis=1)  # (B, 3)
    if white_bkgd:
        c_nor = ad.add(c_nor, ad.reshape(ad.sub(1.0, acc), (B, 1)))
    i_trans = ad.tsum(ad.mul(weights, ivals), axis=1)  # (B,)
    c_low = ad.mul(c_nor, ad.reshape(i_trans, (B, 1)))

    return RenderedRay(c_nor=c_nor, i_trans=i_trans, c_low=c_low, acc=acc, weights=weights)


def run_field(field: RoseField, bundle: RayBundle) -> FieldSample:
    """Evaluate the field at every sample point of the bundle.

    Directions are encoded once per ray and repeated across samples.
    """
    B, N = bundle.t_vals.shape
    pts = bundle.positions().reshape(-1, 3)
    d_enc = np.repeat(field.dir_enc(bundle.dirs), N, axis=0)
    return field.forward(pts, d_enc=d_enc)


def render_bundle(
    coarse: RoseField,
    fine: RoseField,
    bundle: RayBundle,
    n_coarse: int,
    n_fine: int,
    rng: np.random.Generator | None = None,
    perturb: bool = False,
    white_bkgd: bool = False,
):
    """Coarse pass, weight-guided fine pass. Returns (coarse_out, fine_out,
    fine_bundle). With ``rng=None`` the whole pipeline is deterministic."""
    cb = stratified_samples(bundle, n_coarse, rng=rng, perturb=perturb)
    out_c = render_rays(run_field(coarse, cb), cb, white_bkgd=white_bkgd)
    fb = hierarchical_samples(cb, out_c.weights.data, n_fine, rng=rng)
    out_f = render_rays(run_field(fine, fb), fb, white_bkgd=white_bkgd)
    return out_c, out_f, fb


def render_image(
    coarse: RoseField,
    fine: RoseField,
    cam: Camera,
    near: float,
    far: float,
    n_coarse: int,
    n_fine: int,
    chunk: int = 4096,
    white_bkgd: bool = False,
):
    """Full-frame deterministic render. Chunk size does not change pixels.

    Returns a dict of float64 images: normal-light (H,W,3), illuminance
    transition (H,W), low-light (H,W,3), accumulated opacity (H,W).
    """
    if chunk < 1:
        raise DomainError(f"render_image: chunk must be >= 1, got {chunk}")
    H, W = cam.height, cam.width
    nor = np.empty((H * W, 3))
    low = np.empty((H * W, 3))
    illum = np.empty(H * W)
    acc = np.empty(H * W)
    with ad.no_grad():
        for lo in range(0, H * W, chunk):
            ids = np.arange(lo, min(lo + chunk, H * W))
            bundle = rays_for_pixels(cam, ids, near, far)
            _, out, _ = render_bundle(
                coarse, fine, bundle, n_coarse, n_fine, rng=None, perturb=False,
                white_bkgd=white_bkgd,
            )
            nor[ids] = out.c_nor.data
            low[ids] = out.c_low.data
            illum[ids] = out.i_trans.data
            acc[ids] = out.acc.data
    return {
        "nor": nor.reshape(H, W, 3),
        "low": low.reshape(H, W, 3),
        "illum": illum.reshape(H, W),
        "acc": acc.reshape(H, W),
    }
