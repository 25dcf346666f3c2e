"""Command-line pipeline: synthesize data, train, render, evaluate, ablate.

``--threads N`` pins the BLAS thread pool; ``--threads 1`` is the
deterministic path. The flag is honored by setting the usual
environment knobs before numpy loads (and threadpoolctl when numpy is
already resident). ``ROSE_SEED`` provides a seed fallback for commands
that take ``--seed``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from pathlib import Path


def _pin_threads(argv) -> None:
    if "--threads" not in argv:
        return
    try:
        n = int(argv[argv.index("--threads") + 1])
    except (IndexError, ValueError):
        return  # argparse reports the usage error later
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    if "numpy" in sys.modules:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(limits=n)
        except ImportError:
            pass


def _seed_or_env(value) -> int:
    if value is not None:
        return int(value)
    return int(os.environ.get("ROSE_SEED", "0"))


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rose",
        description="Restore a normal-light 3D scene from low-light multiview images.",
    )
    shared = argparse.ArgumentParser(add_help=False)
    for target in (p, shared):
        target.add_argument("--threads", type=int, default=None,
                            help="BLAS thread count (1 = deterministic path)")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="write a synthetic low-light dataset",
                        parents=[shared])
    ps.add_argument("--preset", choices=["constant02", "ramp"],
                    help="built-in scene: constant transition 0.2, or a linear ramp")
    ps.add_argument("--spec", type=Path, help="JSON scene spec (overrides --preset)")
    ps.add_argument("--out", type=Path, required=True)
    ps.add_argument("--noise", type=float, default=0.0, help="per-image Gaussian sigma")
    ps.add_argument("--res", type=int, default=64)
    ps.add_argument("--views", type=int, default=16)
    ps.add_argument("--seed", type=int, default=None)

    pt = sub.add_parser("train", parents=[shared], help="train the dual-branch field on a dataset")
    pt.add_argument("--data", type=Path, required=True)
    pt.add_argument("--out", type=Path, required=True)
    pt.add_argument("--preset", choices=["desk", "paper", "micro"], default="desk")
    pt.add_argument("--config", type=Path, help="JSON file of TrainConfig overrides")
    pt.add_argument("--seed", type=int, default=None)
    pt.add_argument("--iters", type=int, default=None)
    pt.add_argument("--batch", type=int, default=None)
    pt.add_argument("--e", type=float, default=None, help="desired illumination level")
    pt.add_argument("--no-lrd", action="store_true", help="disable the low-rank module")
    pt.add_argument("--lrd-order", choices=["lrd_first", "mlp_first"], default=None)
    pt.add_argument("--tv", type=float, default=None, help="total-variation ablation weight")
    tone = pt.add_mutually_exclusive_group()
    tone.add_argument("--tone", dest="tone", action="store_true", default=None,
                      help="remap observations with the inverse tone curve (camera sRGB data)")
    tone.add_argument("--no-tone", dest="tone", action="store_false",
                      help="observations are linear radiance (synthetic datasets)")
    pt.add_argument("--resume", type=Path, help="checkpoint to continue from")

    pr = sub.add_parser("render", parents=[shared], help="render novel views from a checkpoint")
    pr.add_argument("--ckpt", type=Path, required=True)
    g = pr.add_mutually_exclusive_group(required=True)
    g.add_argument("--poses", type=Path, help="poses.json-style file of cameras")
    g.add_argument("--orbit", type=int, help="render N poses sweeping the training arc")
    pr.add_argument("--out", type=Path, required=True)
    pr.add_argument("--chunk", type=int, default=4096)

    pe = sub.add_parser("eval", parents=[shared], help="score a checkpoint against a test split")
    pe.add_argument("--ckpt", type=Path, required=True)
    pe.add_argument("--data", type=Path, required=True)
    pe.add_argument("--out", type=Path, required=True)

    pa = sub.add_parser("ablate", parents=[shared], help="train/eval a matrix of configurations")
    pa.add_argument("--data", type=Path, required=True)
    pa.add_argument("--out", type=Path, required=True)
    pa.add_argument("--axes", default="lrd",
                    help="comma list from {lrd,order,e,tv}")
    pa.add_argument("--preset", choices=["desk", "paper", "micro"], default="micro")
    pa.add_argument("--seeds", type=int, nargs="+", default=None)
    pa.add_argument("--seed", type=int, default=None)
    pa.add_argument("--tv-weight", type=float, default=0.01)
    pa.add_argument("--no-tone", action="store_true",
                    help="observations are linear radiance (synthetic datasets)")
    return p


# -- commands -------------------------------------------------------------


def _load_spec(args):
    from .scene import Box, IllumField, Sphere, SyntheticSpec, make_spec

    seed = _seed_or_env(args.seed)
    if args.spec is not None:
        raw = json.loads(Path(args.spec).read_text())
        prims = []
        for p in raw.pop("primitives"):
            kind = p.pop("kind")
            prims.append(Sphere(**p) if kind == "sphere" else Box(**p))
        illum = IllumField(**raw.pop("illum"))
        raw.setdefault("noise_sigma", args.noise)
        raw.setdefault("seed", seed)
        return SyntheticSpec(primitives=prims, illum=illum, **raw)
    if args.preset is None:
        raise UsageError("synth: provide --preset or --spec")
    return make_spec(args.preset, noise_sigma=args.noise, resolution=args.res,
                     n_views=args.views, seed=seed)


class UsageError(Exception):
    pass


def cmd_synth(args) -> int:
    import numpy as np

    from .scene import generate_synthetic

    spec = _load_spec(args)
    ds = generate_synthetic(spec, args.out)
    gt = ds.illum_gt
    print(f"wrote {ds.n_frames} views at {ds.resolution[1]}x{ds.resolution[0]} to {args.out}")
    print(
        "ground-truth illuminance transition: "
        f"mean {gt.mean():.4f}, min {gt.min():.4f}, max {gt.max():.4f}"
    )
    print(f"splits: {ds.splits.count('train')} train / "
          f"{ds.splits.count('val')} val / {ds.splits.count('test')} test")
    return 0


def _train_config(args):
    from .train import TrainConfig, preset_config

    cfg = preset_config(args.preset)
    if args.config is not None:
        overrides = json.loads(Path(args.config).read_text())
        merged = cfg.as_dict()
        loss_over = overrides.pop("loss", {})
        merged.update(overrides)
        merged["loss"].update(loss_over)
        cfg = TrainConfig.from_dict(merged)
    cfg.seed = _seed_or_env(args.seed)
    if args.iters is not None:
        cfg.n_iters = args.iters
    if args.batch is not None:
        cfg.batch_rays = args.batch
    if args.e is not None:
        cfg.loss.e_target = args.e
    if args.no_lrd:
        cfg.lrd_enabled = False
    if args.lrd_order is not None:
        cfg.lrd_order = args.lrd_order
    if args.tv is not None:
        cfg.tv_weight = args.tv
    if args.tone is not None:
        cfg.loss.tone_curve_enabled = args.tone
    return cfg


def cmd_train(args) -> int:
    from .scene import load_dataset
    from .train import load_checkpoint, train

    dataset = load_dataset(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    cfg = _train_config(args) if resume is None else resume.cfg
    print(json.dumps(cfg.as_dict(), indent=1, sort_keys=True))
    ckpt = train(dataset, cfg, args.out, resume=resume)
    print(f"finished {ckpt.iteration} iterations; checkpoint at {args.out}/ckpt_final.rose")
    return 0


def cmd_render(args) -> int:
    import numpy as np

    from .cameras import Camera
    from .render import render_image
    from .train import load_checkpoint, orbit_cameras, write_render_outputs

    ckpt = load_checkpoint(args.ckpt)
    coarse, fine = ckpt.build_fields()
    meta = ckpt.dataset_meta
    if args.orbit is not None:
        cams = orbit_cameras(meta, args.orbit)
        near, far = meta["near"], meta["far"]
    else:
        posed = json.loads(Path(args.poses).read_text())
        near = posed.get("near", meta["near"])
        far = posed.get("far", meta["far"])
        w = posed.get("width", meta["width"])
        h = posed.get("height", meta["height"])
        ang = posed.get("camera_angle_x", meta["camera_angle_x"])
        cams = [
            Camera(width=w, height=h, camera_angle_x=ang,
                   c2w=np.asarray(f["transform_matrix"], dtype=np.float64))
            for f in posed["frames"]
        ]
    cfg = ckpt.cfg
    for pi, cam in enumerate(cams):
        imgs = render_image(coarse, fine, cam, near, far, cfg.n_coarse, cfg.n_fine,
                            chunk=args.chunk, white_bkgd=cfg.white_bkgd)
        write_render_outputs(args.out, f"pose_{pi:03d}", imgs)
    print(f"rendered {len(cams)} poses to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import eval_scene
    from .scene import load_dataset
    from .train import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    coarse, fine = ckpt.build_fields()
    dataset = load_dataset(args.data)
    cfg = ckpt.cfg
    report = eval_scene(
        coarse, fine, dataset, args.out, cfg.n_coarse, cfg.n_fine,
        white_bkgd=cfg.white_bkgd, config_echo=cfg.as_dict(),
    )
    print(json.dumps(report["mean"], indent=1))
    print(f"report at {args.out}/report.json")
    return 0


_ABLATION_AXES = {
    "lrd": [("on", True), ("off", False)],
    "order": [("lrd_first", "lrd_first"), ("mlp_first", "mlp_first")],
    "e": [("e0.30", 0.3), ("e0.45", 0.45), ("e0.60", 0.6)],
    "tv": [("notv", 0.0), ("tv", None)],  # None -> --tv-weight
}


def cmd_ablate(args) -> int:
    from .metrics import eval_scene
    from .scene import load_dataset
    from .train import Trainer, preset_config

    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    unknown = [a for a in axes if a not in _ABLATION_AXES]
    if unknown:
        raise UsageError(f"ablate: unknown axes {unknown}; choose from {sorted(_ABLATION_AXES)}")
    dataset = load_dataset(args.data)
    seeds = args.seeds if args.seeds else [_seed_or_env(args.seed)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    combos = list(itertools.product(*[_ABLATION_AXES[a] for a in axes]))
    for seed in seeds:
        for combo in combos:
            cfg = preset_config(args.preset)
            cfg.seed = seed
            if args.no_tone:
                cfg.loss.tone_curve_enabled = False
            labels = []
            for axis, (label, value) in zip(axes, combo):
                labels.append(f"{axis}-{label}")
                if axis == "lrd":
                    cfg.lrd_enabled = value
                elif axis == "order":
                    cfg.lrd_order = value
                elif axis == "e":
                    cfg.loss.e_target = value
                elif axis == "tv":
                    cfg.tv_weight = args.tv_weight if value is None else value
            run_id = "_".join(labels) + f"_s{seed}"
            run_dir = out / "runs" / run_id
            print(f"[ablate] {run_id}", flush=True)
            trainer = Trainer(dataset, cfg, run_dir)
            trainer.run()
            report = eval_scene(
                trainer.coarse, trainer.fine, dataset, run_dir / "eval",
                cfg.n_coarse, cfg.n_fine, white_bkgd=cfg.white_bkgd,
                config_echo=cfg.as_dict(),
            )
            mean = report["mean"]
            rows.append(
                {
                    "run": run_id,
                    "seed": seed,
                    "lrd": cfg.lrd_enabled,
                    "order": cfg.lrd_order,
                    "e": cfg.loss.e_target,
                    "tv": cfg.tv_weight,
                    "psnr": mean["psnr"],
                    "ssim": mean["ssim"],
                    "illum_mae": mean.get("illum_mae", ""),
                    "mean_illum": mean.get("mean_illum", ""),
                    "mean_intensity": mean["mean_intensity"],
                }
            )
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(str(r[c]) for c in cols))
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(rows)} rows to {out}/summary.csv")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _pin_threads(argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    from .errors import RoseError

    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "render": cmd_render,
        "eval": cmd_eval,
        "ablate": cmd_ablate,
    }
    try:
        return handlers[args.command](args)
    except UsageError as e:
        parser.error(str(e))  # exits 2
    except RoseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
