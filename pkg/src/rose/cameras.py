"""Camera rays and along-ray sampling.

Pinhole cameras use the OpenGL convention: the camera looks down its
local -z axis and ``c2w`` is a 4x4 camera-to-world transform. Rays pass
through pixel centers. Sampling produces stratified coarse depths and
inverse-CDF fine depths guided by coarse rendering weights.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError, ShapeError

# Standard terminal spacing: the last sample's interval extends to infinity
# for rendering purposes.
TERMINAL_DELTA = 1e10


@dataclass
class Camera:
    width: int
    height: int
    camera_angle_x: float  # horizontal field of view, radians
    c2w: np.ndarray  # 4x4 camera-to-world, OpenGL axes

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise ShapeError(f"Camera: c2w must be 4x4, got {self.c2w.shape}")
        if self.width < 1 or self.height < 1:
            raise DomainError(f"Camera: resolution {self.width}x{self.height} invalid")
        R = self.c2w[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise DomainError("Camera: rotation block of c2w is not orthonormal within 1e-6")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / np.tan(0.5 * self.camera_angle_x)

    @property
    def n_pixels(self) -> int:
        return self.width * self.height


@dataclass
class RayBundle:
    """A batch of rays with optional per-ray sample depths.

    ``t_vals`` are strictly increasing depths in [near, far]; ``deltas``
    are spacings t_{n+1} - t_n with a large terminal spacing appended.
    """

    origins: np.ndarray  # (B, 3)
    dirs: np.ndarray  # (B, 3), unit norm
    near: float
    far: float
    t_vals: np.ndarray | None = None  # (B, N)
    deltas: np.ndarray | None = None  # (B, N)

    @property
    def n_rays(self) -> int:
        return self.origins.shape[0]

    def positions(self) -> np.ndarray:
        """World-space sample points, shape (B, N, 3)."""
        if self.t_vals is None:
            raise ShapeError("RayBundle.positions: no samples drawn yet")
        return self.origins[:, None, :] + self.dirs[:, None, :] * self.t_vals[..., None]


def rays_for_pixels(cam: Camera, pixel_ids, near: float, far: float) -> RayBundle:
    """Rays through the centers of the given row-major pixel indices."""
    ids = np.asarray(pixel_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cam.n_pixels):
        bad = ids[(ids < 0) | (ids >= cam.n_pixels)][0]
        raise DomainError(f"rays_for_pixels: pixel index {bad} outside 0..{cam.n_pixels - 1}")
    rows = ids // cam.width
    cols = ids % cam.width
    f = cam.focal
    u = (cols + 0.5) - 0.5 * cam.width
    v = (rows + 0.5) - 0.5 * cam.height
    dirs_cam = np.stack([u / f, -v / f, -np.ones_like(u, dtype=np.float64)], axis=-1)
    R = cam.c2w[:3, :3]
    dirs = dirs_cam @ R.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.c2w[:3, 3], dirs.shape).copy()
    return RayBundle(origins=origins, dirs=dirs, near=float(near), far=float(far))


def all_pixel_rays(cam: Camera, near: float, far: float) -> RayBundle:
    return rays_for_pixels(cam, np.arange(cam.n_pixels), near, far)


def _strictify(t: np.ndarray) -> np.ndarray:
    """Bump ties by machine epsilon so depths are strictly increasing."""
    for j in range(1, t.shape[1]):
        t[:, j] = np.maximum(t[:, j], np.nextafter(t[:, j - 1], np.inf))
    return t


def _with_deltas(bundle: RayBundle, t: np.ndarray) -> RayBundle:
    deltas = np.empty_like(t)
    deltas[:, :-1] = t[:, 1:] - t[:, :-1]
    deltas[:, -1] = TERMINAL_DELTA
    return replace(bundle, t_vals=t, deltas=deltas)


def stratified_samples(
    bundle: RayBundle,
    n_coarse: int,
    rng: np.random.Generator | None = None,
    perturb: bool = False,
) -> RayBundle:
    """Coarse depths: bin midpoints of [near, far], or one uniform draw
    per bin when ``perturb`` is set."""
    if n_coarse < 1:
        raise DomainError(f"stratified_samples: n_coarse must be >= 1, got {n_coarse}")
    if bundle.far <= bundle.near:
        raise DomainError(
            f"stratified_samples: far ({bundle.far}) must exceed near ({bundle.near})"
        )
    B = bundle.n_rays
    edges = np.linspace(bundle.near, bundle.far, n_coarse + 1)
    if perturb:
        if rng is None:
            raise DomainError("stratified_samples: perturb=True requires an rng")
        u = rng.random((B, n_coarse))
        t = edges[:-1] + u * (edges[1:] - edges[:-1])
    else:
        mids = 0.5 * (edges[:-1] + edges[1:])
        t = np.broadcast_to(mids, (B, n_coarse)).copy()
    return _with_deltas(bundle, _strictify(t))


def sample_pdf(
    t_coarse: np.ndarray,
    weights: np.ndarray,
    n_fine: int,
    near: float,
    far: float,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant PDF proportional to
    per-sample weights. Each coarse sample owns the bin between the
    midpoints of its neighbors (outer bins clipped to [near, far]).
    Rays whose weights sum to ~0 fall back to a uniform PDF.
    """
    if np.any(weights < 0):
        raise DomainError("sample_pdf: weights must be nonnegative")
    B, Nc = t_coarse.shape
    mids = 0.5 * (t_coarse[:, 1:] + t_coarse[:, :-1])
    edges = np.concatenate(
        [np.full((B, 1), near), mids, np.full((B, 1), far)], axis=1
    )  # (B, Nc+1)
    w = weights + 0.0
    total = w.sum(axis=1, keepdims=True)
    degenerate = total[:, 0] < 1e-12
    if np.any(degenerate):
        w[degenerate] = 1.0
        total = w.sum(axis=1, keepdims=True)
    pdf = w / total
    cdf = np.concatenate([np.zeros((B, 1)), np.cumsum(pdf, axis=1)], axis=1)  # (B, Nc+1)
    cdf[:, -1] = 1.0

    if rng is None:
        # Deterministic path for evaluation renders: bin midpoints of [0,1).
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (B, n_fine)).copy()
    else:
        u = rng.random((B, n_fine))

    # For each u, index of the last cdf entry <= u.
    idx = (u[:, :, None] >= cdf[:, None, :]).sum(axis=-1) - 1
    idx = np.clip(idx, 0, Nc - 1)
    cdf_lo = np.take_along_axis(cdf, idx, axis=1)
    cdf_hi = np.take_along_axis(cdf, idx + 1, axis=1)
    edge_lo = np.take_along_axis(edges, idx, axis=1)
    edge_hi = np.take_along_axis(edges, idx + 1, axis=1)
    denom = cdf_hi - cdf_lo
    denom = np.where(denom < 1e-12, 1.0, denom)
    frac = (u - cdf_lo) / denom
    return edge_lo + frac * (edge_hi - edge_lo)


def hierarchical_samples(
    bundle: RayBundle,
    coarse_weights: np.ndarray,
    n_fine: int,
    rng: np.random.Generator | None = None,
) -> RayBundle:
    """Fine depths drawn from the coarse-weight PDF, merged with the
    coarse depths and re-sorted; output carries n_coarse + n_fine samples."""
    if bundle.t_vals is None:
        raise ShapeError("hierarchical_samples: bundle has no coarse samples")
    if coarse_weights.shape != bundle.t_vals.shape:
        raise ShapeError(
            f"hierarchical_samples: weights {coarse_weights.shape} do not match "
            f"t_vals {bundle.t_vals.shape}"
        )
    t_fine = sample_pdf(
        bundle.t_vals, coarse_weights, n_fine, bundle.near, bundle.far, rng=rng
    )
    merged = np.sort(np.concatenate([bundle.t_vals, t_fine], axis=1), axis=1)
    return _with_deltas(bundle, _strictify(merged))


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = eye - target
    z /= np.linalg.norm(z)
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    c2w = np.eye(4)
    c2w[:3, 0] = x
    c2w[:3, 1] = y
    c2w[:3, 2] = z
    c2w[:3, 3] = eye
    return c2w
