"""Dataset loading, synthetic scene generation, and 8-bit image IO.

A scene directory holds ``poses.json`` plus ``images/low/*.png`` and,
for synthetic scenes, ``images/nor/*.png`` ground truth and
``illum/*.png`` ground-truth illuminance transition maps.

The generator ray-traces Lambertian spheres/boxes to produce
normal-light views, evaluates a parametric illuminance transition field
at the surface hit points, and emits the low-light observations as the
per-pixel product plus optional per-image Gaussian sensor noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import Camera, look_at, rays_for_pixels
from .errors import DatasetError, DomainError

# -- 8-bit image IO ---------------------------------------------------------


def save_image(path, img: np.ndarray) -> None:
    """Write a float image in [0,1] as an 8-bit PNG (round half up)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    q = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    mode = "RGB" if q.ndim == 3 else "L"
    Image.fromarray(q, mode=mode).save(path)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"image file missing: {path}")
    with Image.open(path) as im:
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.float64)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


# -- dataset ------------------------------------------------------------------


@dataclass
class SceneDataset:
    cameras: list[Camera]
    images_low: np.ndarray  # (F, H, W, 3)
    near: float
    far: float
    splits: list[str]  # per-frame: train | val | test
    images_nor: np.ndarray | None = None  # (F, H, W, 3)
    illum_gt: np.ndarray | None = None  # (F, H, W)
    names: list[str] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.cameras)

    @property
    def resolution(self):
        return self.images_low.shape[1:3]

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]


def load_dataset(scene_dir) -> SceneDataset:
    scene_dir = Path(scene_dir)
    poses_path = scene_dir / "poses.json"
    if not poses_path.exists():
        raise DatasetError(f"poses.json missing in {scene_dir}")
    meta = json.loads(poses_path.read_text())
    for key in ("camera_angle_x", "near", "far", "frames"):
        if key not in meta:
            raise DatasetError(f"poses.json missing key {key!r}")

    cams, lows, nors, illums, splits, names = [], [], [], [], [], []
    have_nor = have_illum = True
    shape = None
    for fi, frame in enumerate(meta["frames"]):
        rel = frame["file_path"]
        img_path = scene_dir / rel
        if not img_path.exists():
            raise DatasetError(f"frame {fi}: image {rel} listed in poses.json is missing")
        img = load_image(img_path)
        if img.ndim != 3:
            raise DatasetError(f"frame {fi}: {rel} is not an RGB image")
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DatasetError(
                f"frame {fi}: resolution {img.shape[:2]} differs from frame 0 {shape[:2]}"
            )
        H, W = img.shape[:2]
        cams.append(
            Camera(
                width=W,
                height=H,
                camera_angle_x=float(meta["camera_angle_x"]),
                c2w=np.asarray(frame["transform_matrix"], dtype=np.float64),
            )
        )
        lows.append(img)
        splits.append(frame.get("split", "train"))
        name = Path(rel).name
        names.append(name)
        nor_path = scene_dir / "images" / "nor" / name
        illum_path = scene_dir / "illum" / name
        if nor_path.exists():
            nors.append(load_image(nor_path))
        else:
            have_nor = False
        if illum_path.exists():
            illums.append(load_image(illum_path))
        else:
            have_illum = False

    if not cams:
        raise DatasetError(f"{scene_dir}: poses.json lists no frames")
    return SceneDataset(
        cameras=cams,
        images_low=np.stack(lows),
        near=float(meta["near"]),
        far=float(meta["far"]),
        splits=splits,
        images_nor=np.stack(nors) if have_nor and nors else None,
        illum_gt=np.stack(illums) if have_illum and illums else None,
        names=names,
    )


# -- synthetic scenes ----------------------------------------------------------


@dataclass
class Sphere:
    center: tuple
    radius: float
    albedo: tuple


@dataclass
class Box:
    lo: tuple
    hi: tuple
    albedo: tuple


@dataclass
class IllumField:
    """Parametric illuminance transition I(x) in (0, 1]."""

    kind: str = "constant"  # constant | ramp
    value: float = 0.2
    lo: float = 0.15
    hi: float = 0.35
    axis: int = 0
    x0: float = -1.5
    x1: float = 1.5

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.full(pts.shape[:-1], self.value)
        if self.kind == "ramp":
            frac = np.clip((pts[..., self.axis] - self.x0) / (self.x1 - self.x0), 0.0, 1.0)
            return self.lo + (self.hi - self.lo) * frac
        raise DomainError(f"unknown illuminance field kind {self.kind!r}")


@dataclass
class SyntheticSpec:
    primitives: list
    illum: IllumField
    light_dir: tuple = (-0.35, 0.8, 0.5)
    ambient: float = 0.3
    noise_sigma: float = 0.0
    n_views: int = 16
    resolution: int = 64
    seed: int = 0
    cam_radius: float = 3.2
    cam_target: tuple = (0.0, -0.1, 0.0)
    cam_fov_x: float = np.deg2rad(60.0)
    arc_deg: float = 36.0  # total azimuth span of the view arc
    elev_deg: tuple = (10.0, 22.0)
    near: float = 2.0
    far: float = 6.5


def _intersect_sphere(origins, dirs, sph: Sphere):
    oc = origins - np.asarray(sph.center)
    b = np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - sph.radius**2
    disc = b * b - c
    hit = disc > 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-6, t0, t1)
    t = np.where(hit & (t > 1e-6), t, np.inf)
    pts = origins + dirs * t[:, None]
    normals = (pts - np.asarray(sph.center)) / sph.radius
    return t, normals


def _intersect_box(origins, dirs, box: Box):
    lo = np.asarray(box.lo)
    hi = np.asarray(box.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    t_enter = np.nanmax(tmin, axis=1)
    t_exit = np.nanmin(tmax, axis=1)
    hit = (t_exit >= t_enter) & (t_exit > 1e-6)
    t = np.where(t_enter > 1e-6, t_enter, t_exit)
    t = np.where(hit & (t > 1e-6), t, np.inf)
    # Normal: the axis on which t_enter was attained, facing against the ray.
    axis = np.argmax(np.where(np.isfinite(tmin), tmin, -np.inf), axis=1)
    normals = np.zeros_like(origins)
    rows = np.arange(origins.shape[0])
    normals[rows, axis] = -np.sign(dirs[rows, axis])
    return t, normals


def _inside(point, prim) -> bool:
    p = np.asarray(point)
    if isinstance(prim, Sphere):
        return bool(np.linalg.norm(p - np.asarray(prim.center)) < prim.radius)
    return bool(np.all(p > np.asarray(prim.lo)) and np.all(p < np.asarray(prim.hi)))


def trace_view(spec: SyntheticSpec, cam: Camera):
    """Analytic render of one view.

    Returns (rgb, hit_mask, hit_points) with Lambertian shading
    albedo * (ambient + (1-ambient) * max(0, n.l)).
    """
    eye = cam.c2w[:3, 3]
    for prim in spec.primitives:
        if _inside(eye, prim):
            raise DomainError(f"camera at {eye} is inside a primitive: {prim}")
    bundle = rays_for_pixels(cam, np.arange(cam.n_pixels), spec.near, spec.far)
    n_px = cam.n_pixels
    best_t = np.full(n_px, np.inf)
    rgb = np.zeros((n_px, 3))
    normals = np.zeros((n_px, 3))
    albedo = np.zeros((n_px, 3))
    for prim in spec.primitives:
        if isinstance(prim, Sphere):
            t, nrm = _intersect_sphere(bundle.origins, bundle.dirs, prim)
        else:
            t, nrm = _intersect_box(bundle.origins, bundle.dirs, prim)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        normals[closer] = nrm[closer]
        albedo[closer] = np.asarray(prim.albedo)
    hit = np.isfinite(best_t)
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lam = np.maximum(normals @ light, 0.0)
    shade = spec.ambient + (1.0 - spec.ambient) * lam
    rgb = albedo * shade[:, None]
    rgb[~hit] = 0.0
    pts = bundle.origins + bundle.dirs * np.where(hit, best_t, spec.far)[:, None]
    H, W = cam.height, cam.width
    return rgb.reshape(H, W, 3), hit.reshape(H, W), pts.reshape(H, W, 3)


def spec_cameras(spec: SyntheticSpec) -> list[Camera]:
    """Cameras on a forward-facing arc (part of a hemisphere) around the scene."""
    cams = []
    n = spec.n_views
    for vi in range(n):
        frac = vi / max(n - 1, 1)
        az = np.deg2rad(-0.5 * spec.arc_deg + spec.arc_deg * frac)
        elev = np.deg2rad(
            spec.elev_deg[0] + (spec.elev_deg[1] - spec.elev_deg[0]) * (0.5 + 0.5 * np.sin(2.5 * np.pi * frac))
        )
        eye = np.array(
            [
                spec.cam_radius * np.cos(elev) * np.sin(az),
                spec.cam_radius * np.sin(elev),
                spec.cam_radius * np.cos(elev) * np.cos(az),
            ]
        ) + np.asarray(spec.cam_target)
        c2w = look_at(eye, spec.cam_target)
        cams.append(
            Camera(
                width=spec.resolution,
                height=spec.resolution,
                camera_angle_x=spec.cam_fov_x,
                c2w=c2w,
            )
        )
    return cams


def assign_splits(n_views: int) -> list[str]:
    """3 test views spread over the arc, 1 validation view, rest training."""
    if n_views < 6:
        splits = ["train"] * n_views
        if n_views >= 3:
            splits[n_views // 2] = "test"
        return splits
    test = {round((k + 1) * n_views / 4.0) - 1 for k in range(3)}
    val = next(i for i in range(n_views) if i not in test and i != 0)
    return ["test" if i in test else "val" if i == val else "train" for i in range(n_views)]


def generate_synthetic(spec: SyntheticSpec, out_dir) -> SceneDataset:
    """Trace the scene, emit low-light observations as normal-light times
    the illuminance transition at the surface hit (plus optional noise),
    and write the dataset directory with ground truth alongside."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    cams = spec_cameras(spec)
    splits = assign_splits(spec.n_views)
    frames = []
    for vi, cam in enumerate(cams):
        nor, hit, pts = trace_view(spec, cam)
        illum = spec.illum(pts)
        illum[~hit] = 1.0  # nothing to transit where no surface is seen
        low = nor * illum[..., None]
        if spec.noise_sigma > 0:
            low = low + rng.normal(0.0, spec.noise_sigma, size=low.shape)
        low = np.clip(low, 0.0, 1.0)
        name = f"f_{vi:03d}.png"
        save_image(out_dir / "images" / "low" / name, low)
        save_image(out_dir / "images" / "nor" / name, nor)
        save_image(out_dir / "illum" / name, illum)
        frames.append(
            {
                "file_path": f"images/low/{name}",
                "transform_matrix": cam.c2w.tolist(),
                "split": splits[vi],
            }
        )
    meta = {
        "camera_angle_x": spec.cam_fov_x,
        "near": spec.near,
        "far": spec.far,
        "frames": frames,
    }
    (out_dir / "poses.json").write_text(json.dumps(meta, indent=1))
    return load_dataset(out_dir)


# -- presets -------------------------------------------------------------------

# Albedos calibrated so the mean normal-light intensity over all views sits
# near the default desired illumination level (0.45) with peak shading <= ~0.75.
_SCENE_PRIMITIVES = [
    Box(lo=(-4.5, -2.6, -1.25), hi=(4.5, 3.6, -0.95), albedo=(0.705, 0.726, 0.778)),  # back wall
    Box(lo=(-4.5, -1.35, -1.25), hi=(4.5, -1.05, 2.6), albedo=(0.547, 0.505, 0.442)),  # floor
    Sphere(center=(-0.45, -0.55, 0.30), radius=0.48, albedo=(0.74, 0.44, 0.35)),
    Sphere(center=(0.58, -0.67, 0.60), radius=0.38, albedo=(0.38, 0.56, 0.74)),
    Box(lo=(-1.35, -1.05, -0.55), hi=(-0.75, -0.35, 0.05), albedo=(0.70, 0.64, 0.40)),
]


def make_spec(
    preset: str,
    noise_sigma: float = 0.0,
    resolution: int = 64,
    n_views: int = 16,
    seed: int = 0,
) -> SyntheticSpec:
    if preset == "constant02":
        illum = IllumField(kind="constant", value=0.2)
    elif preset == "ramp":
        illum = IllumField(kind="ramp", lo=0.15, hi=0.35, axis=0, x0=-1.5, x1=1.5)
    else:
        raise DomainError(f"unknown synthetic preset {preset!r} (use constant02 or ramp)")
    return SyntheticSpec(
        primitives=list(_SCENE_PRIMITIVES),
        illum=illum,
        noise_sigma=noise_sigma,
        n_views=n_views,
        resolution=resolution,
        seed=seed,
    )
