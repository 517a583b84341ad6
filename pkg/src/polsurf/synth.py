"""Synthetic multi-view polarization datasets from analytic SDF scenes.

Scenes have exact SDFs and exact gradients, so every emitted AoP map is
generated by the inverse of the perspective constraint and jointly zeroes
the perspective kernel with the true normals - the global minimum of the
polarimetric loss on ground truth is 0. DoP is assigned per material
(the reconstruction only thresholds it), not derived from Fresnel curves.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import polconstraint
from .imaging import CameraModel, PolarizationFrame, wrap_aop, write_frame
from .render import pixel_directions_camera

SHAPES = ("sphere", "torus", "roundedbox", "twospheres")
MATERIALS = ("diffuse", "specular", "mixed")

_LIGHT_DIR = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])


@dataclass
class AnalyticScene:
    shape: str = "sphere"
    material: str = "diffuse"
    # shape parameters: sphere/twospheres radius, torus (major, minor),
    # roundedbox (half extents, corner radius)
    radius: float = 0.35
    torus_major: float = 0.3
    torus_minor: float = 0.12
    box_extents: tuple[float, float, float] = (0.3, 0.22, 0.26)
    box_radius: float = 0.06
    spheres_offset: float = 0.22
    base_color: tuple[float, float, float] = (0.7, 0.25, 0.2)
    dop_diffuse: float = 0.15
    dop_specular: float = 0.6
    aop_noise_sigma: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; valid: {', '.join(SHAPES)}")
        if self.material not in MATERIALS:
            raise ValueError(f"unknown material {self.material!r}; valid: {', '.join(MATERIALS)}")

    @property
    def bounding_radius(self) -> float:
        if self.shape == "sphere":
            return self.radius
        if self.shape == "torus":
            return self.torus_major + self.torus_minor
        if self.shape == "roundedbox":
            return float(np.linalg.norm(self.box_extents)) + self.box_radius
        return self.spheres_offset + self.radius


def scene_sdf(scene: AnalyticScene, x: np.ndarray) -> np.ndarray:
    """Exact signed distance for (N,3) points."""
    x = np.asarray(x, dtype=np.float64)
    if scene.shape == "sphere":
        return np.linalg.norm(x, axis=-1) - scene.radius
    if scene.shape == "torus":
        a = np.hypot(x[..., 0], x[..., 1])
        return np.hypot(a - scene.torus_major, x[..., 2]) - scene.torus_minor
    if scene.shape == "roundedbox":
        q = np.abs(x) - np.asarray(scene.box_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside - scene.box_radius
    c = np.array([scene.spheres_offset, 0.0, 0.0])
    s1 = np.linalg.norm(x - c, axis=-1) - scene.radius
    s2 = np.linalg.norm(x + c, axis=-1) - scene.radius
    return np.minimum(s1, s2)


def scene_normal(scene: AnalyticScene, x: np.ndarray) -> np.ndarray:
    """Normalized exact SDF gradient for (N,3) points."""
    x = np.asarray(x, dtype=np.float64)
    if scene.shape == "sphere":
        g = x.copy()
    elif scene.shape == "torus":
        a = np.hypot(x[..., 0], x[..., 1])
        a_safe = np.where(a > 1e-12, a, 1.0)
        d = a - scene.torus_major
        g = np.stack([x[..., 0] / a_safe * d, x[..., 1] / a_safe * d, x[..., 2]], axis=-1)
    elif scene.shape == "roundedbox":
        q = np.abs(x) - np.asarray(scene.box_extents)
        qp = np.maximum(q, 0.0)
        out_norm = np.linalg.norm(qp, axis=-1, keepdims=True)
        outside = out_norm[..., 0] > 1e-12
        g_out = qp / np.where(out_norm > 1e-12, out_norm, 1.0)
        one_hot = (q == q.max(axis=-1, keepdims=True)).astype(np.float64)
        one_hot /= one_hot.sum(axis=-1, keepdims=True)
        g = np.where(outside[..., None], g_out, one_hot) * np.sign(x)
    else:
        c = np.array([scene.spheres_offset, 0.0, 0.0])
        d1 = np.linalg.norm(x - c, axis=-1)
        d2 = np.linalg.norm(x + c, axis=-1)
        g = np.where((d1 <= d2)[..., None], x - c, x + c)
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.where(norm > 1e-12, norm, 1.0)


def specular_zone(scene: AnalyticScene, x: np.ndarray) -> np.ndarray:
    """Per-point specular-dominant flag; the mixed material splits on world x."""
    if scene.material == "specular":
        return np.ones(x.shape[:-1], dtype=bool)
    if scene.material == "diffuse":
        return np.zeros(x.shape[:-1], dtype=bool)
    return x[..., 0] > 0.0


@dataclass
class CameraRig:
    n_views: int = 20
    orbit_radius: float = 1.6
    elevations_deg: tuple[float, ...] = (10.0, 35.0)
    lookat: tuple[float, float, float] = (0.0, 0.0, 0.0)
    width: int = 64
    height: int = 64
    fov_deg: float = 40.0

    def intrinsics(self) -> tuple[float, float, float, float]:
        f = (self.width / 2.0) / np.tan(np.radians(self.fov_deg) / 2.0)
        return f, f, self.width / 2.0, self.height / 2.0


def look_at_camera(position, lookat, fx, fy, cx, cy) -> CameraModel:
    """Camera at `position` looking at `lookat`; image up is world +z."""
    position = np.asarray(position, dtype=np.float64)
    z_c = np.asarray(lookat, dtype=np.float64) - position
    z_c /= np.linalg.norm(z_c)
    x_c = np.cross([0.0, 0.0, -1.0], z_c)
    if np.linalg.norm(x_c) < 1e-9:
        raise ValueError("degenerate look-at: viewing straight up/down")
    x_c /= np.linalg.norm(x_c)
    y_c = np.cross(z_c, x_c)
    r = np.stack([x_c, y_c, z_c])
    return CameraModel(fx, fy, cx, cy, r, -r @ position)


def rig_cameras(rig: CameraRig) -> list[CameraModel]:
    fx, fy, cx, cy = rig.intrinsics()
    cams = []
    for i in range(rig.n_views):
        az = 2 * np.pi * i / rig.n_views
        el = np.radians(rig.elevations_deg[i % len(rig.elevations_deg)])
        pos = np.asarray(rig.lookat) + rig.orbit_radius * np.array(
            [np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        cams.append(look_at_camera(pos, rig.lookat, fx, fy, cx, cy))
    return cams


def check_rig(rig: CameraRig, scene: AnalyticScene) -> None:
    """Every camera must see the whole bounding sphere of the object."""
    half_fov = np.radians(rig.fov_deg) / 2.0
    dist = rig.orbit_radius - np.linalg.norm(rig.lookat)
    if dist <= scene.bounding_radius:
        raise ValueError("camera orbit intersects the object")
    if np.arcsin(scene.bounding_radius / dist) >= half_fov:
        raise ValueError("object bounding sphere exceeds the field of view")


def trace(scene: AnalyticScene, origins: np.ndarray, directions: np.ndarray,
          t_start: np.ndarray | None = None, max_steps: int = 256,
          tol_scale: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Sphere tracing; returns (hit, depth). Vectorized over rays."""
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    n = len(origins)
    t = np.zeros(n) if t_start is None else np.asarray(t_start, dtype=np.float64).copy()
    tol = tol_scale * max(scene.bounding_radius, 1.0)
    t_max = 2.0 * np.linalg.norm(origins, axis=-1) + 4.0 * scene.bounding_radius
    alive = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        if not alive.any():
            break
        p = origins[alive] + t[alive, None] * directions[alive]
        s = scene_sdf(scene, p)
        converged = np.abs(s) < tol
        idx = np.flatnonzero(alive)
        hit[idx[converged]] = True
        t[idx] += s
        escaped = t[idx] > t_max[idx]
        alive[idx[converged | escaped]] = False
    return hit, t


def shade(scene: AnalyticScene, normals: np.ndarray, view: np.ndarray,
          specular: np.ndarray) -> np.ndarray:
    """Near-constant shading: ambient + Lambert plus a lobe on specular zones."""
    ndl = np.clip((normals * _LIGHT_DIR).sum(-1), 0.0, None)
    base = np.asarray(scene.base_color)
    rgb = base[None, :] * (0.25 + 0.65 * ndl[:, None])
    half = _LIGHT_DIR - view
    half /= np.linalg.norm(half, axis=-1, keepdims=True)
    lobe = np.clip((normals * half).sum(-1), 0.0, None) ** 32
    rgb = rgb + 0.25 * (lobe * specular)[:, None]
    return np.clip(rgb, 0.0, 1.0)


def render_frame(scene: AnalyticScene, camera: CameraModel, width: int,
                 height: int, rng: np.random.Generator | None = None) -> PolarizationFrame:
    """Ray-trace one view and synthesize its polarization channels.

    AoP comes from the perspective-constraint inverse with the material's
    disambiguation offset (0 diffuse, pi/2 specular); degenerate pixels
    (ray parallel to normal) get rho = 0, phi = 0.
    """
    uv = np.stack(np.meshgrid(np.arange(width), np.arange(height)), axis=-1).reshape(-1, 2)
    d_cam = pixel_directions_camera(camera, uv)
    d_world = d_cam @ camera.rotation
    o_world = np.broadcast_to(camera.center, d_world.shape)

    hit, depth = trace(scene, o_world, d_world)
    pts = o_world + depth[:, None] * d_world
    n_world = scene_normal(scene, pts)
    n_cam = n_world @ camera.rotation.T
    spec = specular_zone(scene, pts)
    delta = np.where(spec, np.pi / 2, 0.0)

    phi_t, valid_t = polconstraint.aop_from_normal_masked(
        torch.from_numpy(n_cam), torch.from_numpy(d_cam), torch.from_numpy(delta))
    phi = phi_t.numpy()
    valid = valid_t.numpy() & hit
    if scene.aop_noise_sigma > 0 and rng is not None:
        phi = wrap_aop(phi + rng.normal(0.0, scene.aop_noise_sigma, phi.shape))

    rho = np.where(spec, scene.dop_specular, scene.dop_diffuse)
    rho = np.where(valid, rho, 0.0)
    phi = np.where(valid, phi, 0.0)

    rgb = np.where(hit[:, None], shade(scene, n_world, d_world, spec.astype(np.float64)), 0.0)
    gtn = np.where((hit & valid)[:, None], n_cam, 0.0)

    sh = (height, width)
    return PolarizationFrame(
        color=rgb.reshape(*sh, 3).astype(np.float32),
        aop=phi.reshape(sh).astype(np.float32),
        dop=rho.reshape(sh).astype(np.float32),
        mask=hit.reshape(sh),
        camera=camera,
        gtnormal=gtn.reshape(*sh, 3).astype(np.float32),
        gtdepth=np.where(hit, depth, 0.0).reshape(sh).astype(np.float32),
    )


def dataset_hash(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        with open(p, "rb") as f:
            h.update(f.read())
    return h.hexdigest()


def generate_dataset(scene: AnalyticScene, rig: CameraRig, out_dir,
                     seed: int = 0) -> dict:
    """Write one frame per view plus a manifest that regenerates it bit-identically."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    check_rig(rig, scene)
    rng = np.random.default_rng(seed)
    files = []
    for i, cam in enumerate(rig_cameras(rig)):
        frame = render_frame(scene, cam, rig.width, rig.height, rng)
        path = out / f"view_{i:03d}.pframe"
        write_frame(frame, path)
        files.append(path.name)
    manifest = {
        "format": "polsurf-dataset v1",
        "scene": asdict(scene),
        "rig": asdict(rig),
        "seed": seed,
        "frames": files,
        "content_hash": dataset_hash(out / f for f in files),
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_manifest(data_dir) -> dict:
    from pathlib import Path

    with open(Path(data_dir) / "manifest.json") as f:
        return json.load(f)
