"""Ray generation, depth sampling and SDF-based volume rendering.

Rays are cast through pixel centers of a pinhole camera and clipped to
the field's domain box. SDF values along a ray are converted to blending
weights with the unbiased logistic scheme (opaque-density form): the
weight peak sits at the zero crossing regardless of incidence angle.
Pixel color and normal are the weight-blended sums over samples; the
rendered normal is deliberately left unnormalized for consumers to
decide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .imaging import CameraModel


@dataclass
class RayBundle:
    """World-frame rays with their pixel bookkeeping."""

    origins: np.ndarray  # (N,3)
    directions: np.ndarray  # (N,3) unit
    near: np.ndarray  # (N,)
    far: np.ndarray  # (N,)
    pixels: np.ndarray  # (N,2) integer (u,v)
    valid: np.ndarray  # (N,) False where the ray missed the domain box


def ray_box_intersection(o: np.ndarray, d: np.ndarray, lo, hi,
                         eps: float = 1e-9) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab test; returns (near, far, hit). near clamped to >= 0."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    inv = 1.0 / np.where(np.abs(d) > eps, d, np.where(d >= 0, eps, -eps))
    t0 = (lo - o) * inv
    t1 = (hi - o) * inv
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    near = np.maximum(tmin, 0.0)
    hit = tmax > near + 1e-12
    return near, tmax, hit


def pixel_directions_camera(camera: CameraModel, uv: np.ndarray) -> np.ndarray:
    """Unit camera-frame directions through pixel coordinates (u,v)."""
    uv = np.asarray(uv, dtype=np.float64)
    d = np.stack([(uv[:, 0] - camera.cx) / camera.fx,
                  (uv[:, 1] - camera.cy) / camera.fy,
                  np.ones(len(uv))], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_rays(camera: CameraModel, pixels: np.ndarray, domain_min,
                  domain_max) -> RayBundle:
    """World-frame rays through pixel centers, clipped to the domain box.

    Rays that miss the box are flagged invalid (near/far set to a
    degenerate 0-length interval).
    """
    pixels = np.asarray(pixels)
    d_cam = pixel_directions_camera(camera, pixels)
    d_world = d_cam @ camera.rotation  # R^T applied row-wise
    o_world = np.broadcast_to(camera.center, d_world.shape).copy()
    near, far, hit = ray_box_intersection(o_world, d_world, domain_min, domain_max)
    near = np.where(hit, near, 0.0)
    far = np.where(hit, far, 0.0)
    return RayBundle(origins=o_world, directions=d_world, near=near, far=far,
                     pixels=pixels.astype(np.int64), valid=hit)


def stratified_depths(near: np.ndarray, far: np.ndarray, m: int,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """(N, m) strictly increasing depths, one uniform draw per stratum."""
    if m < 2:
        raise ValueError("need at least 2 samples per ray")
    n = len(near)
    edges = np.linspace(0.0, 1.0, m + 1)
    u = rng.random((n, m)) if rng is not None else np.full((n, m), 0.5)
    frac = edges[:-1] + u * (1.0 / m)
    return near[:, None] + frac * (far - near)[:, None]


def importance_depths(t: np.ndarray, w: np.ndarray, m: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Resample m depths per ray proportional to weights (inverse-CDF).

    Weight-free rays fall back to uniform. Returned depths are unsorted.
    """
    w = np.asarray(w, dtype=np.float64) + 1e-6
    pdf = w / w.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(pdf, axis=-1)
    cdf = np.concatenate([np.zeros((len(t), 1)), cdf], axis=-1)
    u = rng.random((len(t), m))
    # bin edges are the midpoints between existing samples, extended to ends
    mids = 0.5 * (t[:, 1:] + t[:, :-1])
    edges = np.concatenate([t[:, :1], mids, t[:, -1:]], axis=-1)
    # batched searchsorted: shift each row into its own disjoint interval
    nrows, nbins = t.shape
    shift = 2.0 * np.arange(nrows)[:, None]
    idx = np.searchsorted((cdf + shift).ravel(), (u + shift).ravel(), side="right") - 1
    idx = idx.reshape(nrows, m) - np.arange(nrows)[:, None] * (nbins + 1)
    idx = np.clip(idx, 0, nbins - 1)
    rows = np.arange(nrows)[:, None]
    lo_c, hi_c = cdf[rows, idx], cdf[rows, idx + 1]
    frac = (u - lo_c) / np.where(hi_c > lo_c, hi_c - lo_c, 1.0)
    return edges[rows, idx] + frac * (edges[rows, idx + 1] - edges[rows, idx])


def merge_depths(t_coarse: np.ndarray, t_extra: np.ndarray) -> np.ndarray:
    """Sorted union per ray; exact duplicates are nudged apart to keep
    the sequence strictly increasing."""
    t = np.sort(np.concatenate([t_coarse, t_extra], axis=-1), axis=-1)
    d = np.diff(t, axis=-1)
    bump = np.cumsum(d <= 0, axis=-1) * 1e-9
    t[:, 1:] += bump
    return t


def neus_weights(s: torch.Tensor, sharpness: torch.Tensor) -> torch.Tensor:
    """Blending weights from per-sample SDF values (N, M) -> (N, M).

    alpha_i = max((sig(k s_i) - sig(k s_{i+1})) / sig(k s_i), 0) with the
    terminal SDF duplicated; w_i = alpha_i * prod_{j<i}(1 - alpha_j).
    """
    s_next = torch.cat([s[:, 1:], s[:, -1:]], dim=-1)
    sig = torch.sigmoid(sharpness * s)
    sig_next = torch.sigmoid(sharpness * s_next)
    alpha = ((sig - sig_next) / sig.clamp(min=1e-12)).clamp(min=0.0, max=1.0)
    trans = torch.cumprod(torch.cat(
        [torch.ones_like(alpha[:, :1]), 1.0 - alpha[:, :-1]], dim=-1), dim=-1)
    return trans * alpha


@dataclass
class RenderOutput:
    color: torch.Tensor  # (N,3) composited with background
    normal: torch.Tensor  # (N,3) weighted sum, NOT renormalized
    weight_sum: torch.Tensor  # (N,) opacity proxy in [0,1]
    sdf: torch.Tensor  # (N,M) per-sample SDF values
    grad_norm: torch.Tensor  # FD gradient norms at evaluated points (eikonal input)
    fg_color: torch.Tensor  # (N,3) weighted sum before compositing


def render_rays(field, origins: torch.Tensor, directions: torch.Tensor,
                depths: torch.Tensor, active_levels: int | None = None,
                background: torch.Tensor | None = None,
                weight_threshold: float = 0.0, eikonal_extra_per_ray: int = 0,
                rng: np.random.Generator | None = None) -> RenderOutput:
    """Render a ray batch against a neural field.

    The default evaluates FD normals and color at every sample. With
    weight_threshold > 0 they are evaluated only where the (detached)
    blending weight exceeds it -- the remaining samples contribute a
    negligible weight mass -- and the eikonal gradient set is those
    samples plus `eikonal_extra_per_ray` random ones per ray.
    """
    n, m = depths.shape
    pts = origins[:, None, :] + depths[:, :, None] * directions[:, None, :]
    flat = pts.reshape(-1, 3)
    s_flat, feat = field.sdf(flat, active_levels)
    s = s_flat.reshape(n, m)
    w = neus_weights(s, field.sharpness)
    wsum = w.sum(-1)
    if background is None:
        background = torch.zeros(3)

    if weight_threshold <= 0.0:
        sel = torch.arange(n * m)
    else:
        with torch.no_grad():
            keep = w > weight_threshold
            keep[torch.arange(n), w.argmax(dim=-1)] = True
        sel = keep.reshape(-1).nonzero(as_tuple=True)[0]

    grad = field.sdf_gradient(flat[sel], active_levels)
    gnorm = grad.norm(dim=-1)
    nrm = torch.where(gnorm[:, None] > 1e-12, grad / gnorm[:, None].clamp(min=1e-12),
                      torch.tensor([0.0, 0.0, 1.0]).expand_as(grad))
    view = directions[:, None, :].expand(n, m, 3).reshape(-1, 3)[sel]
    rgb = field.color(s_flat[sel], feat[sel], view, nrm)

    w_sel = w.reshape(-1)[sel]
    ray_of = sel // m
    fg = torch.zeros(n, 3).index_add(0, ray_of, w_sel[:, None] * rgb)
    normal = torch.zeros(n, 3).index_add(0, ray_of, w_sel[:, None] * nrm)

    if weight_threshold > 0.0 and eikonal_extra_per_ray > 0 and rng is not None:
        extra = torch.from_numpy(
            rng.integers(0, m, size=(n, eikonal_extra_per_ray))
            + (np.arange(n) * m)[:, None]).reshape(-1)
        g_extra = field.sdf_gradient(flat[extra], active_levels).norm(dim=-1)
        gnorm = torch.cat([gnorm, g_extra])

    color = fg + (1.0 - wsum[:, None]) * background
    if weight_threshold <= 0.0:
        gnorm = gnorm.reshape(n, m)
    return RenderOutput(color=color, normal=normal, weight_sum=wsum, sdf=s,
                        grad_norm=gnorm, fg_color=fg)


def sample_depths(field, origins: np.ndarray, directions: np.ndarray,
                  near: np.ndarray, far: np.ndarray, m_coarse: int,
                  importance_rounds: int, rng: np.random.Generator,
                  active_levels: int | None = None) -> np.ndarray:
    """Coarse stratified depths plus importance rounds against the field."""
    t = stratified_depths(near, far, m_coarse, rng)
    for _ in range(importance_rounds):
        with torch.no_grad():
            o = torch.as_tensor(origins, dtype=torch.float32)
            d = torch.as_tensor(directions, dtype=torch.float32)
            tt = torch.as_tensor(t, dtype=torch.float32)
            pts = (o[:, None, :] + tt[:, :, None] * d[:, None, :]).reshape(-1, 3)
            s, _ = field.sdf(pts, active_levels)
            w = neus_weights(s.reshape(t.shape[0], -1), field.sharpness)
        extra = importance_depths(t, w.numpy(), m_coarse, rng)
        t = merge_depths(t, extra)
    return t
