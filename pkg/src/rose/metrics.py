"""Quantitative evaluation: PSNR, windowed SSIM, and illuminance accuracy.

``eval_scene`` renders every test view of a dataset from a trained
field pair, scores it against ground truth, and writes a JSON report
plus rendered PNGs and an illuminance heatmap.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EvalError, ShapeError
from .render import render_image
from .scene import SceneDataset, save_image

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 * log10(1 / MSE) for images in [0, 1]; inf when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Separable Gaussian correlation, valid region only."""
    win = sliding_window_view(img, (k1d.size, k1d.size))
    k2d = np.outer(k1d, k1d)
    return np.einsum("ijkl,kl->ij", win, k2d)


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=2)
    return img


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over an 11x11 Gaussian window
    (sigma 1.5, K1 0.01, K2 0.03, dynamic range 1). Color images are
    converted to grayscale by channel mean."""
    ga, gb = _to_gray(a), _to_gray(b)
    if ga.shape != gb.shape:
        raise ShapeError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if min(ga.shape) < SSIM_WINDOW:
        raise ShapeError(
            f"ssim: image {ga.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    k = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    ux = _filter_valid(ga, k)
    uy = _filter_valid(gb, k)
    uxx = _filter_valid(ga * ga, k)
    uyy = _filter_valid(gb * gb, k)
    uxy = _filter_valid(ga * gb, k)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return float(s.mean())


def illum_heatmap(illum: np.ndarray) -> np.ndarray:
    """Min-max normalized viridis rendering of an illuminance map."""
    import matplotlib

    lo, hi = float(illum.min()), float(illum.max())
    norm = (illum - lo) / (hi - lo) if hi > lo else np.zeros_like(illum)
    return np.asarray(matplotlib.colormaps["viridis"](norm))[..., :3]


def _jsonify(x):
    if isinstance(x, float):
        return "inf" if math.isinf(x) else x
    if isinstance(x, dict):
        return {k: _jsonify(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonify(v) for v in x]
    return x


def eval_scene(
    coarse,
    fine,
    dataset: SceneDataset,
    out_dir,
    n_coarse: int,
    n_fine: int,
    white_bkgd: bool = False,
    chunk: int = 4096,
    config_echo: dict | None = None,
    split: str = "test",
) -> dict:
    """Render and score every view of ``split``; write report.json and PNGs.

    Illuminance metrics are computed over high-opacity pixels
    (accumulated opacity > 0.5) when ground-truth maps are present.
    """
    idx = dataset.indices(split)
    if not idx:
        raise EvalError(f"eval_scene: dataset has no {split!r} views")
    if dataset.images_nor is None:
        raise EvalError("eval_scene: dataset carries no ground-truth normal-light images")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    views = []
    for vi in idx:
        cam = dataset.cameras[vi]
        imgs = render_image(
            coarse, fine, cam, dataset.near, dataset.far, n_coarse, n_fine,
            chunk=chunk, white_bkgd=white_bkgd,
        )
        name = dataset.names[vi] if dataset.names else f"view_{vi:03d}.png"
        stem = Path(name).stem
        nor_clip = np.clip(imgs["nor"], 0.0, 1.0)
        save_image(out_dir / f"{stem}_nor.png", nor_clip)
        save_image(out_dir / f"{stem}_low.png", np.clip(imgs["low"], 0.0, 1.0))
        save_image(out_dir / f"{stem}_illum.png", illum_heatmap(imgs["illum"]))
        gt = dataset.images_nor[vi]
        entry = {
            "name": name,
            "psnr": psnr(nor_clip, gt),
            "ssim": ssim(nor_clip, gt),
            "mean_intensity": float(imgs["nor"].mean()),
        }
        mask = imgs["acc"] > 0.5
        if dataset.illum_gt is not None and mask.any():
            entry["illum_mae"] = float(np.abs(imgs["illum"] - dataset.illum_gt[vi])[mask].mean())
            entry["mean_illum"] = float(imgs["illum"][mask].mean())
        views.append(entry)

    keys = [k for k in views[0] if k != "name"]
    report = {
        "views": views,
        "mean": {k: float(np.mean([v[k] for v in views])) for k in keys},
        "config": config_echo or {},
    }
    (out_dir / "report.json").write_text(json.dumps(_jsonify(report), indent=1))
    return report
