"""Loss assembly, pixel sampling and the reconstruction loop.

The total objective is color + lambda_p * polarimetric + lambda_n *
normal-smoothness + lambda_e * eikonal, plus a small mask term that
stands in for a separate background model. Weights follow a staged
schedule: color-only warmup, a linear ramp of the polarimetric and
normal terms, a linear decay of the normal term, then refinement with
color + polarimetric until the end.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import render
from .autodiff import stop_gradient
from .field import FieldConfig, HashGridConfig, NeuralField, PAPER_GRID, save_checkpoint, set_active_levels
from .imaging import PolarizationFrame, read_frame
from .polconstraint import f_persp_masked, _h_persp_masked
from .synth import load_manifest


class NumericalError(RuntimeError):
    """Loss became non-finite; a diagnostic checkpoint was written."""


VARIANTS = {
    # variant -> (polarimetric kernel or None, normal loss on/off)
    "pisr": ("persp", True),
    "pisr-c": (None, False),
    "pisr-n": (None, True),
    "pisr-o": ("ortho", False),
    "pisr-on": ("ortho", True),
    "pisr-p": ("persp", False),
}


@dataclass
class ScheduleConfig:
    """Iteration-indexed loss weights and neighbor counts."""

    warmup: int = 2500
    ramp: int = 2500
    decay: int = 2500
    lambda_p_max: float = 2.0
    lambda_n_max: float = 1.0
    nu_max: int = 28
    lambda_e: float = 0.1

    def weights(self, iteration: int) -> tuple[float, float, int]:
        """(lambda_p, lambda_n, |N_u|) at an iteration."""
        w, r, d = self.warmup, self.ramp, self.decay
        if iteration < w:
            return 0.0, 0.0, 0
        if iteration < w + r:
            f = (iteration - w) / r
        elif iteration < w + r + d:
            g = (iteration - w - r) / d
            nu = int(self.nu_max * (1.0 - g)) // 4 * 4
            return self.lambda_p_max, self.lambda_n_max * (1.0 - g), nu
        else:
            return self.lambda_p_max, 0.0, 0
        return self.lambda_p_max * f, self.lambda_n_max * f, int(self.nu_max * f) // 4 * 4


@dataclass
class TrainConfig:
    variant: str = "pisr"
    max_iterations: int = 2400
    batch_pixels: int = 512  # |S|; the paper preset restores 4096
    m_coarse: int = 32
    importance_rounds: int = 1
    # sparse evaluation: FD normals/colors only where weights exceed this,
    # eikonal on those plus a few random samples per ray (0 = dense)
    weight_threshold: float = 1e-3
    eikonal_extra_per_ray: int = 2
    theta: float = 0.3  # DoP threshold of the segmented kernel
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(600, 600, 600))
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    level_start: int = 4
    level_interval: int = 150
    lr_grid: float = 1e-2
    lr_mlp: float = 1e-3
    mask_weight: float = 0.1
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mask_dilate: int = 8
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final only
    exclude_dop_below: float = 0.0  # drop pixels with rho below this from L_pol
    forced_delta: float | None = None  # bypass the DoP switch with a fixed offset

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")

    @property
    def pol_kernel(self) -> str | None:
        return VARIANTS[self.variant][0]

    @property
    def use_normal_loss(self) -> bool:
        return VARIANTS[self.variant][1]


def desk_preset(**overrides) -> TrainConfig:
    """CPU-scale defaults: small grid, short compressed schedule."""
    return replace(TrainConfig(), **overrides)


def paper_preset(**overrides) -> TrainConfig:
    cfg = TrainConfig(
        max_iterations=20000,
        batch_pixels=4096,
        m_coarse=64,
        schedule=ScheduleConfig(2500, 2500, 2500),
        grid=PAPER_GRID,
        level_interval=1000,
    )
    return replace(cfg, **overrides)


def config_to_text(cfg: TrainConfig) -> str:
    """Flat key = value form (nested blocks dotted)."""
    lines = []

    def emit(prefix, obj):
        for f_ in fields(obj):
            v = getattr(obj, f_.name)
            if hasattr(v, "__dataclass_fields__"):
                emit(prefix + f_.name + ".", v)
            else:
                lines.append(f"{prefix}{f_.name} = {json.dumps(v)}")

    emit("", cfg)
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> TrainConfig:
    cfg = TrainConfig()
    sched, grid = asdict(cfg.schedule), asdict(cfg.grid)
    top = {}
    for line in text.splitlines():
        line = line.split("#")[0].strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        key, val = key.strip(), json.loads(val.strip())
        if key.startswith("schedule."):
            sched[key.split(".", 1)[1]] = val
        elif key.startswith("grid."):
            grid[key.split(".", 1)[1]] = val
        else:
            top[key] = val
    for k in ("domain_min", "domain_max"):
        grid[k] = tuple(grid[k])
    if "background" in top:
        top["background"] = tuple(top["background"])
    return TrainConfig(schedule=ScheduleConfig(**sched), grid=HashGridConfig(**grid), **top)


@dataclass
class PixelSamplePlan:
    """Center pixels plus their criss-cross neighbors (frame, u, v rows)."""

    centers: np.ndarray  # (C,3) int
    neighbors: np.ndarray  # (K,3) int
    neighbor_center: np.ndarray  # (K,) index into centers


def criss_cross_offsets(n_u: int) -> np.ndarray:
    """Axis-aligned arm offsets; n_u must be divisible by 4."""
    if n_u % 4:
        raise ValueError("neighbor count must be divisible by 4")
    arm = n_u // 4
    offs = []
    for k in range(1, arm + 1):
        offs += [(k, 0), (-k, 0), (0, k), (0, -k)]
    return np.asarray(offs, dtype=np.int64).reshape(-1, 2)


def sample_plan(rng: np.random.Generator, candidates: np.ndarray,
                sizes: list[tuple[int, int]], n_centers: int, n_u: int) -> PixelSamplePlan:
    """Draw centers uniformly from candidate pixels and attach criss-cross arms.

    candidates: (P,3) int rows (frame,u,v); sizes: per-frame (width,height).
    Neighbors falling outside the image are clipped away.
    """
    idx = rng.integers(0, len(candidates), size=n_centers)
    centers = candidates[idx]
    if n_u == 0:
        return PixelSamplePlan(centers, np.zeros((0, 3), dtype=np.int64),
                               np.zeros(0, dtype=np.int64))
    offs = criss_cross_offsets(n_u)
    nb = centers[:, None, :].repeat(len(offs), axis=1).copy()
    nb[:, :, 1:] += offs[None, :, :]
    center_idx = np.repeat(np.arange(n_centers), len(offs))
    nb = nb.reshape(-1, 3)
    wh = np.asarray(sizes)[nb[:, 0]]
    inside = (nb[:, 1] >= 0) & (nb[:, 1] < wh[:, 0]) & (nb[:, 2] >= 0) & (nb[:, 2] < wh[:, 1])
    return PixelSamplePlan(centers, nb[inside], center_idx[inside])


def loss_color(rendered: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over pixels and RGB channels."""
    return (rendered - reference).abs().mean()


def loss_pol(phi: torch.Tensor, rho: torch.Tensor, v_cam: torch.Tensor,
             n_cam: torch.Tensor, theta: float, kernel: str = "persp",
             forced_delta: float | None = None,
             exclude_dop_below: float = 0.0) -> tuple[torch.Tensor, int]:
    """Mean segmented-kernel value over a pixel batch.

    Rendered normals are renormalized before the kernel; degenerate
    pixels contribute zero and are counted. forced_delta bypasses the
    DoP branch switch with a fixed disambiguation offset.
    """
    norm = n_cam.norm(dim=-1, keepdim=True)
    n_unit = n_cam / norm.clamp(min=1e-6)
    if forced_delta is not None:
        vals, valid = _h_persp_masked(phi, torch.as_tensor(forced_delta, dtype=phi.dtype),
                                      v_cam, n_unit)
    else:
        vals, valid = f_persp_masked(phi, v_cam, n_unit, rho, theta, kernel=kernel)
    keep = torch.ones_like(valid)
    if exclude_dop_below > 0.0:
        keep = rho >= exclude_dop_below
    vals = torch.where(keep, vals, torch.zeros_like(vals))
    denom = int(keep.sum()) if exclude_dop_below > 0.0 else vals.numel()
    if denom == 0:
        return vals.sum() * 0.0, int((~valid).sum())
    return vals.sum() / denom, int((~valid & keep).sum())


def loss_normal(center_normals: torch.Tensor, neighbor_normals: torch.Tensor,
                neighbor_center: torch.Tensor) -> torch.Tensor:
    """Negative mean cosine between stopped center normals and neighbors.

    Both sides renormalized; -1 at perfect smoothness. Centers with no
    surviving neighbors are skipped from the outer average.
    """
    def unit(n):
        return n / n.norm(dim=-1, keepdim=True).clamp(min=1e-6)

    if len(neighbor_normals) == 0:
        return center_normals.sum() * 0.0
    c = stop_gradient(unit(center_normals))
    nb = unit(neighbor_normals)
    dots = (c[neighbor_center] * nb).sum(-1)
    n_centers = len(center_normals)
    sums = torch.zeros(n_centers, dtype=dots.dtype).index_add(0, neighbor_center, dots)
    counts = torch.zeros(n_centers, dtype=dots.dtype).index_add(
        0, neighbor_center, torch.ones_like(dots))
    used = counts > 0
    return -(sums[used] / counts[used]).mean()


def loss_eikonal(grad_norms: torch.Tensor) -> torch.Tensor:
    """Mean squared deviation of the SDF gradient norm from 1."""
    return (grad_norms - 1.0).square().mean()


def loss_mask(weight_sum: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy between accumulated opacity and the object mask."""
    w = weight_sum.clamp(1e-4, 1.0 - 1e-4)
    return -(mask * w.log() + (1.0 - mask) * (1.0 - w).log()).mean()


class FrameSet:
    """Loaded frames plus cached per-pixel ray geometry for one domain box."""

    def __init__(self, frames: list[PolarizationFrame], grid: HashGridConfig,
                 mask_dilate: int = 8):
        if len(frames) < 2:
            raise ValueError("need at least 2 posed frames")
        self.frames = frames
        self.color, self.aop, self.dop, self.mask = [], [], [], []
        self.dirs_world, self.dirs_cam, self.origins, self.rot = [], [], [], []
        self.ray_valid, self.near, self.far = [], [], []
        self.sizes = []
        cand = []
        for fi, fr in enumerate(frames):
            h, w = fr.color.shape[:2]
            self.sizes.append((w, h))
            self.color.append(torch.from_numpy(np.ascontiguousarray(fr.color)))
            self.aop.append(torch.from_numpy(np.ascontiguousarray(fr.aop)))
            self.dop.append(torch.from_numpy(np.ascontiguousarray(fr.dop)))
            self.mask.append(torch.from_numpy(fr.mask.astype(np.float32)))
            uv = np.stack(np.meshgrid(np.arange(w), np.arange(h)), axis=-1).reshape(-1, 2)
            bundle = render.generate_rays(fr.camera, uv, grid.domain_min, grid.domain_max)
            self.dirs_world.append(torch.from_numpy(
                bundle.directions.reshape(h, w, 3).astype(np.float32)))
            d_cam = render.pixel_directions_camera(fr.camera, uv)
            self.dirs_cam.append(torch.from_numpy(d_cam.reshape(h, w, 3).astype(np.float32)))
            self.origins.append(torch.from_numpy(fr.camera.center.astype(np.float32)))
            self.rot.append(torch.from_numpy(fr.camera.rotation.astype(np.float32)))
            self.near.append(bundle.near.reshape(h, w))
            self.far.append(bundle.far.reshape(h, w))
            valid = bundle.valid.reshape(h, w)
            self.ray_valid.append(valid)
            dil = ndimage.binary_dilation(fr.mask, iterations=mask_dilate) & valid
            vv, uu = np.nonzero(dil)
            cand.append(np.stack([np.full(len(uu), fi), uu, vv], axis=-1))
        self.candidates = np.concatenate(cand)
        if sum(int(f.mask.sum()) for f in frames) == 0:
            raise ValueError("dataset has zero foreground pixels")
        self.rot_t = torch.stack(self.rot)
        self.origins_t = torch.stack(self.origins)


def load_frames(data_dir) -> list[PolarizationFrame]:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    return [read_frame(data_dir / name) for name in manifest["frames"]]


def _gather_np(maps: list[np.ndarray], pix: np.ndarray) -> np.ndarray:
    out = np.empty(len(pix))
    for fi in np.unique(pix[:, 0]):
        sel = pix[:, 0] == fi
        out[sel] = maps[fi][pix[sel, 2], pix[sel, 1]]
    return out


def _gather_maps(maps: list[torch.Tensor], pix: np.ndarray) -> torch.Tensor:
    parts = []
    for fi in np.unique(pix[:, 0]):
        sel = pix[:, 0] == fi
        parts.append((sel, maps[fi][pix[sel, 2], pix[sel, 1]]))
    first = parts[0][1]
    out = torch.empty((len(pix),) + first.shape[1:], dtype=first.dtype)
    for sel, vals in parts:
        out[torch.from_numpy(sel)] = vals
    return out


def train(frameset: FrameSet, config: TrainConfig, out_dir=None,
          log_every: int = 1):
    """Run the optimization; returns (field, telemetry rows)."""
    if "POLSURF_THREADS" in os.environ:
        torch.set_num_threads(int(os.environ["POLSURF_THREADS"]))
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    fld = NeuralField(FieldConfig(grid=config.grid))

    opt = torch.optim.Adam([
        {"params": list(fld.grid.parameters()), "lr": config.lr_grid},
        {"params": list(fld.sdf_mlp.parameters()) + list(fld.color_mlp.parameters())
         + [fld.log_sharpness], "lr": config.lr_mlp},
    ])
    base_lrs = [g["lr"] for g in opt.param_groups]
    bg = torch.tensor(config.background, dtype=torch.float32)
    sched = config.schedule
    out_path = Path(out_dir) if out_dir is not None else None
    telemetry: list[dict] = []
    csv_file = csv_writer = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "config.txt").write_text(config_to_text(config))
        csv_file = open(out_path / "telemetry.csv", "w", newline="")

    try:
        for it in range(config.max_iterations):
            lam_p, lam_n, n_u = sched.weights(it)
            if config.pol_kernel is None:
                lam_p = 0.0
            if not config.use_normal_loss:
                lam_n, n_u = 0.0, 0
            active = set_active_levels(it, config.grid.levels, config.level_start,
                                       config.level_interval)

            # cosine decay after warmup
            if it >= sched.warmup and config.max_iterations > sched.warmup:
                frac = (it - sched.warmup) / (config.max_iterations - sched.warmup)
                scale = 0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * frac))
            else:
                scale = 1.0
            for g, base in zip(opt.param_groups, base_lrs):
                g["lr"] = base * scale

            n_centers = max(1, config.batch_pixels // (1 + n_u))
            plan = sample_plan(rng, frameset.candidates, frameset.sizes, n_centers, n_u)
            all_pix = np.concatenate([plan.centers, plan.neighbors])
            uniq, inv = np.unique(all_pix, axis=0, return_inverse=True)
            center_slot = inv[:len(plan.centers)]
            neighbor_slot = inv[len(plan.centers):]

            # neighbors outside the domain-box footprint are dropped
            ray_ok = _gather_np(frameset.ray_valid, uniq) > 0.5
            if not ray_ok.all():
                keep_nb = ray_ok[neighbor_slot]
                neighbor_slot = neighbor_slot[keep_nb]
                plan = PixelSamplePlan(plan.centers, plan.neighbors[keep_nb],
                                       plan.neighbor_center[keep_nb])

            f_ids = uniq[:, 0]
            origins = frameset.origins_t[torch.from_numpy(f_ids.astype(np.int64))]
            dirs_w = _gather_maps(frameset.dirs_world, uniq)
            near = _gather_np(frameset.near, uniq)
            far = _gather_np(frameset.far, uniq)
            far = np.maximum(far, near + 1e-4)

            t = render.sample_depths(fld, origins.numpy(), dirs_w.numpy(), near, far,
                                     config.m_coarse, config.importance_rounds, rng,
                                     active)
            out = render.render_rays(fld, origins, dirs_w,
                                     torch.as_tensor(t, dtype=torch.float32),
                                     active, bg,
                                     weight_threshold=config.weight_threshold,
                                     eikonal_extra_per_ray=config.eikonal_extra_per_ray,
                                     rng=rng)

            ref_color = _gather_maps(frameset.color, uniq)
            ref_mask = _gather_maps(frameset.mask, uniq)
            l_color = loss_color(out.color, ref_color)
            l_eik = loss_eikonal(out.grad_norm)
            l_mask = loss_mask(out.weight_sum, ref_mask)

            degen = 0
            l_pol = torch.zeros(())
            if lam_p > 0.0:
                fg = ref_mask > 0.5
                if int(fg.sum()) > 0:
                    rot = frameset.rot_t[torch.from_numpy(f_ids.astype(np.int64))]
                    n_cam = torch.einsum("kij,kj->ki", rot, out.normal)
                    v_cam = _gather_maps(frameset.dirs_cam, uniq)
                    phi = _gather_maps(frameset.aop, uniq)
                    rho = _gather_maps(frameset.dop, uniq)
                    l_pol, degen = loss_pol(phi[fg], rho[fg], v_cam[fg], n_cam[fg],
                                            config.theta, config.pol_kernel,
                                            config.forced_delta, config.exclude_dop_below)

            l_norm = torch.zeros(())
            if lam_n > 0.0 and len(neighbor_slot) > 0:
                l_norm = loss_normal(out.normal[torch.from_numpy(center_slot)],
                                     out.normal[torch.from_numpy(neighbor_slot)],
                                     torch.from_numpy(plan.neighbor_center))

            total = (l_color + lam_p * l_pol + lam_n * l_norm
                     + sched.lambda_e * l_eik + config.mask_weight * l_mask)
            if not torch.isfinite(total):
                if out_path is not None:
                    save_checkpoint(fld, out_path / "diagnostic.ckpt",
                                    {"iteration": it, "reason": "non-finite loss"})
                raise NumericalError(f"non-finite loss at iteration {it}")

            opt.zero_grad()
            total.backward()
            opt.step()

            if it % log_every == 0 or it == config.max_iterations - 1:
                row = {
                    "iteration": it,
                    "loss_total": float(total.detach()),
                    "loss_color": float(l_color.detach()),
                    "loss_pol": float(l_pol.detach()),
                    "loss_normal": float(l_norm.detach()),
                    "loss_eikonal": float(l_eik.detach()),
                    "loss_mask": float(l_mask.detach()),
                    "lambda_p": lam_p,
                    "lambda_n": lam_n,
                    "n_u": n_u,
                    "active_levels": active,
                    "degenerate_pixels": degen,
                    "lr_scale": scale,
                }
                telemetry.append(row)
                if csv_file is not None:
                    if csv_writer is None:
                        csv_writer = csv.DictWriter(csv_file, fieldnames=list(row))
                        csv_writer.writeheader()
                    csv_writer.writerow(row)
                    csv_file.flush()

            if (out_path is not None and config.checkpoint_every
                    and it and it % config.checkpoint_every == 0):
                save_checkpoint(fld, out_path / f"ckpt_{it:06d}.ckpt", {"iteration": it})
    finally:
        if csv_file is not None:
            csv_file.close()

    if out_path is not None:
        save_checkpoint(fld, out_path / "ckpt_final.ckpt",
                        {"iteration": config.max_iterations, "variant": config.variant,
                         "pol_kernel": config.pol_kernel or "none"})
    return fld, telemetry


def evaluate_pol_on_gt(frames: list[PolarizationFrame], theta: float,
                       kernel: str = "persp", forced_delta: float | None = None) -> float:
    """Mean polarimetric kernel value at the ground-truth normals.

    Uses the frames' stored camera-frame normals; pixels without a valid
    ground-truth normal are skipped.
    """
    total, count = 0.0, 0
    for fr in frames:
        if fr.gtnormal is None:
            raise ValueError("frames carry no ground-truth normals")
        valid = fr.mask & (np.linalg.norm(fr.gtnormal, axis=-1) > 0.5)
        if not valid.any():
            continue
        h, w = fr.mask.shape
        uv = np.stack(np.meshgrid(np.arange(w), np.arange(h)), axis=-1).reshape(-1, 2)
        d_cam = render.pixel_directions_camera(fr.camera, uv).reshape(h, w, 3)
        phi = torch.from_numpy(fr.aop[valid].astype(np.float64))
        rho = torch.from_numpy(fr.dop[valid].astype(np.float64))
        v = torch.from_numpy(d_cam[valid])
        n = torch.from_numpy(fr.gtnormal[valid].astype(np.float64))
        val, _ = loss_pol(phi, rho, v, n, theta, kernel, forced_delta)
        total += float(val) * int(valid.sum())
        count += int(valid.sum())
    return total / max(count, 1)
