"""Command-line pipeline: synth -> train -> extract -> eval / inspect.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric failure.
Every command writes a manifest with its resolved configuration so runs
can be reproduced.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import metrics, plots, synth, trainer
from .field import load_checkpoint
from .imaging import read_frame
from .trainer import NumericalError


def _write_manifest(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def cmd_synth(args) -> int:
    w, h = (int(v) for v in args.res.split("x"))
    scene = synth.AnalyticScene(shape=args.scene, material=args.material,
                                aop_noise_sigma=args.noise)
    rig = synth.CameraRig(n_views=args.views, width=w, height=h, fov_deg=args.fov,
                          orbit_radius=args.orbit_radius)
    synth.generate_dataset(scene, rig, args.out, seed=args.seed)
    print(f"wrote {args.views} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.config:
        cfg = trainer.config_from_text(Path(args.config).read_text())
    elif args.preset == "paper":
        cfg = trainer.paper_preset()
    else:
        cfg = trainer.desk_preset()
    cfg = trainer.TrainConfig(**{**asdict_flat(cfg), "variant": args.variant,
                                 "seed": args.seed,
                                 **({"max_iterations": args.iters} if args.iters else {})})
    frames = trainer.load_frames(args.data)
    frameset = trainer.FrameSet(frames, cfg.grid, cfg.mask_dilate)
    out = Path(args.out)
    _, telemetry = trainer.train(frameset, cfg, out)
    manifest = synth.load_manifest(args.data)
    _write_manifest(out / "run_manifest.json", {
        "command": "train", "data": str(args.data), "preset": args.preset,
        "variant": args.variant, "seed": args.seed,
        "iterations": cfg.max_iterations,
        "dataset_hash": manifest.get("content_hash"),
    })
    plots.save_loss_curves(telemetry, out / "loss_curves.png")
    print(f"trained {cfg.max_iterations} iterations; checkpoint at {out / 'ckpt_final.ckpt'}")
    return 0


def asdict_flat(cfg: trainer.TrainConfig) -> dict:
    d = asdict(cfg)
    d["schedule"] = trainer.ScheduleConfig(**d["schedule"])
    g = d["grid"]
    g["domain_min"], g["domain_max"] = tuple(g["domain_min"]), tuple(g["domain_max"])
    from .field import HashGridConfig

    d["grid"] = HashGridConfig(**g)
    d["background"] = tuple(d["background"])
    return d


def cmd_extract(args) -> int:
    import torch

    fld, _ = load_checkpoint(args.ckpt)
    grid = fld.config.grid

    def sdf_fn(pts):
        with torch.no_grad():
            s, _ = fld.sdf(torch.as_tensor(pts, dtype=torch.float32))
        return s.numpy()

    mesh = metrics.marching_cubes(sdf_fn, args.res, grid.domain_min, grid.domain_max)
    if mesh.is_empty():
        print("warning: empty iso-surface", file=sys.stderr)
    metrics.write_mesh(mesh, args.out)
    _write_manifest(Path(str(args.out) + ".manifest.json"),
                    {"command": "extract", "ckpt": args.ckpt, "res": args.res,
                     "vertices": len(mesh.vertices), "triangles": len(mesh.triangles)})
    print(f"wrote {args.out}: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles")
    return 0


def _parse_analytic_ref(spec: str) -> synth.AnalyticScene:
    parts = spec.split(":")
    if len(parts) != 3 or parts[0] != "analytic" or parts[1] != "sphere":
        raise ValueError("analytic reference must look like analytic:sphere:<radius>")
    return synth.AnalyticScene(shape="sphere", radius=float(parts[2]))


def cmd_eval(args) -> int:
    # each mesh gets its own identically seeded generator: identical inputs
    # then yield identical clouds, so CD=0/FS=100 holds exactly
    pred_mesh = metrics.read_mesh(args.pred)
    if pred_mesh.is_empty():
        raise ValueError("predicted mesh is empty")
    pred_pts = metrics.sample_surface(pred_mesh, args.samples,
                                      np.random.default_rng(args.seed))
    rng = np.random.default_rng(args.seed)

    if args.ref.startswith("analytic:"):
        scene = _parse_analytic_ref(args.ref)
        d_pr = np.abs(synth.scene_sdf(scene, pred_pts))
        ref_mesh = metrics.marching_cubes(lambda p: synth.scene_sdf(scene, p), 192,
                                          (-1.2 * scene.bounding_radius,) * 3,
                                          (1.2 * scene.bounding_radius,) * 3)
        ref_pts = metrics.sample_surface(ref_mesh, args.samples, rng)
        d_rp = metrics.nearest_distances(ref_pts, pred_pts)
        score = metrics.score_from_distances(d_pr, d_rp, args.tau)
        errors = metrics.signed_errors(pred_mesh.vertices,
                                       lambda p: synth.scene_sdf(scene, p), args.emax)
    else:
        ref_mesh = metrics.read_mesh(args.ref)
        ref_pts = metrics.sample_surface(ref_mesh, args.samples, rng)
        score = metrics.chamfer_f_score(pred_pts, ref_pts, args.tau)
        errors = np.clip(metrics.nearest_distances(pred_mesh.vertices, ref_pts),
                         -args.emax, args.emax)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as f:
        wtr = csv.writer(f)
        wtr.writerow(["chamfer_l1", "f_score", "precision", "recall", "tau"])
        wtr.writerow([score.chamfer_l1, score.f_score, score.precision,
                      score.recall, score.tau])
    (out / "report.txt").write_text(
        f"pred: {args.pred}\nref: {args.ref}\n"
        f"chamfer_l1: {score.chamfer_l1:.6g}\n"
        f"f_score@{score.tau:g}: {score.f_score:.2f}%\n"
        f"precision: {score.precision:.2f}%  recall: {score.recall:.2f}%\n")
    plots.save_error_histogram(errors, args.emax, out / "error_hist.png")
    metrics.write_mesh(pred_mesh, out / "signed_error.ply", vertex_quality=errors)
    _write_manifest(out / "eval_manifest.json", {
        "command": "eval", "pred": args.pred, "ref": args.ref, "tau": args.tau,
        "samples": args.samples, "seed": args.seed, "emax": args.emax,
        "chamfer_l1": score.chamfer_l1, "f_score": score.f_score,
    })
    print(f"CD={score.chamfer_l1:.6g}  FS@{args.tau:g}={score.f_score:.2f}%")
    return 0


def cmd_inspect(args) -> int:
    frame = read_frame(args.frame)
    plots.save_channel_image(frame, args.channel, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polsurf",
                                description="polarimetric implicit surface reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic polarization dataset")
    ps.add_argument("--scene", choices=synth.SHAPES, required=True)
    ps.add_argument("--material", choices=synth.MATERIALS, default="diffuse")
    ps.add_argument("--views", type=int, default=20)
    ps.add_argument("--res", default="64x64", help="WxH")
    ps.add_argument("--fov", type=float, default=40.0, help="horizontal FOV, degrees")
    ps.add_argument("--orbit-radius", type=float, default=1.6)
    ps.add_argument("--noise", type=float, default=0.0, help="AoP noise sigma, radians")
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--out", required=True)
    ps.set_defaults(fn=cmd_synth)

    pt = sub.add_parser("train", help="reconstruct a field from a dataset")
    pt.add_argument("--data", required=True)
    pt.add_argument("--preset", choices=["desk", "paper"], default="desk")
    pt.add_argument("--variant", choices=sorted(trainer.VARIANTS), default="pisr")
    pt.add_argument("--iters", type=int, default=0, help="override max iterations")
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--config", default="", help="config text file overriding the preset")
    pt.add_argument("--out", required=True)
    pt.set_defaults(fn=cmd_train)

    px = sub.add_parser("extract", help="marching-cubes mesh from a checkpoint")
    px.add_argument("--ckpt", required=True)
    px.add_argument("--res", type=int, default=128)
    px.add_argument("--out", required=True, help="mesh path (.obj or .ply)")
    px.set_defaults(fn=cmd_extract)

    pe = sub.add_parser("eval", help="score a mesh against a reference")
    pe.add_argument("--pred", required=True)
    pe.add_argument("--ref", required=True, help="mesh path or analytic:sphere:<r>")
    pe.add_argument("--tau", type=float, default=0.01)
    pe.add_argument("--samples", type=int, default=100000)
    pe.add_argument("--emax", type=float, default=0.02, help="signed-error truncation")
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--out", required=True, help="report directory")
    pe.set_defaults(fn=cmd_eval)

    pi = sub.add_parser("inspect", help="render a frame channel to an image")
    pi.add_argument("--frame", required=True)
    pi.add_argument("--channel", required=True, help="aop | dop | color")
    pi.add_argument("--out", required=True)
    pi.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except (FileNotFoundError, IsADirectoryError, PermissionError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
