"""Mesh extraction and geometry scoring.

Marching cubes polygonizes the SDF sampled on a regular grid (vertices
in world coordinates); scores are the symmetric mean nearest-neighbor
Euclidean distance ("L1" Chamfer) and the F-score at a distance
threshold, computed on area-weighted surface samples with a k-d tree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V,3) world coordinates
    triangles: np.ndarray  # (T,3) vertex indices
    normals: np.ndarray | None = None  # (V,3), optional

    def is_empty(self) -> bool:
        return len(self.triangles) == 0


@dataclass
class GeometryScore:
    chamfer_l1: float  # length units
    f_score: float  # percent
    precision: float  # percent
    recall: float  # percent
    tau: float  # length units


class EmptyGeometryError(ValueError):
    pass


def _triangle_areas(mesh: TriangleMesh) -> np.ndarray:
    v = mesh.vertices
    t = mesh.triangles
    e1 = v[t[:, 1]] - v[t[:, 0]]
    e2 = v[t[:, 2]] - v[t[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=-1)


def clean_mesh(mesh: TriangleMesh, min_area: float = 1e-12) -> TriangleMesh:
    """Drop degenerate (near-zero-area) triangles."""
    if mesh.is_empty():
        return mesh
    keep = _triangle_areas(mesh) > min_area
    return TriangleMesh(mesh.vertices, mesh.triangles[keep], mesh.normals)


def marching_cubes(sdf_fn, resolution: int, domain_min, domain_max,
                   iso: float = 0.0, chunk: int = 262144) -> TriangleMesh:
    """Extract the iso-surface of a scalar field sampled on a regular grid.

    sdf_fn maps (N,3) world points to (N,) values. An all-positive or
    all-negative field yields an empty mesh (not an error).
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8 per axis")
    lo = np.asarray(domain_min, dtype=np.float64)
    hi = np.asarray(domain_max, dtype=np.float64)
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.concatenate([np.asarray(sdf_fn(grid[i:i + chunk]), dtype=np.float64)
                           for i in range(0, len(grid), chunk)])
    vol = vals.reshape(resolution, resolution, resolution)
    if vol.min() > iso or vol.max() < iso:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    spacing = (hi - lo) / (resolution - 1)
    verts, faces, normals, _ = measure.marching_cubes(vol, level=iso, spacing=tuple(spacing))
    return clean_mesh(TriangleMesh(verts + lo, faces.astype(np.int64), normals))


def is_watertight(mesh: TriangleMesh) -> bool:
    """Every undirected edge is shared by exactly two triangles."""
    if mesh.is_empty():
        return False
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges = np.sort(edges, axis=-1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool((counts == 2).all())


def sample_surface(mesh: TriangleMesh, n_points: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface, (n,3)."""
    if mesh.is_empty():
        raise EmptyGeometryError("cannot sample an empty mesh")
    areas = _triangle_areas(mesh)
    probs = areas / areas.sum()
    tri = rng.choice(len(probs), size=n_points, p=probs)
    u = rng.random(n_points)
    v = rng.random(n_points)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a = mesh.vertices[mesh.triangles[tri, 0]]
    b = mesh.vertices[mesh.triangles[tri, 1]]
    c = mesh.vertices[mesh.triangles[tri, 2]]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def nearest_distances(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Euclidean distance from each query point to its nearest ref point."""
    return cKDTree(ref).query(query, workers=-1)[0]


def chamfer_f_score(pred: np.ndarray, ref: np.ndarray, tau: float) -> GeometryScore:
    """Symmetric scores between two surface point sets.

    CD = (mean NN distance pred->ref + mean ref->pred)/2; precision/recall
    are the within-tau percentages in each direction.
    """
    if len(pred) == 0 or len(ref) == 0:
        raise EmptyGeometryError("point sets must be nonempty")
    d_pr = nearest_distances(pred, ref)
    d_rp = nearest_distances(ref, pred)
    return score_from_distances(d_pr, d_rp, tau)


def score_from_distances(d_pred_to_ref: np.ndarray, d_ref_to_pred: np.ndarray,
                         tau: float) -> GeometryScore:
    cd = 0.5 * (d_pred_to_ref.mean() + d_ref_to_pred.mean())
    precision = 100.0 * (d_pred_to_ref <= tau).mean()
    recall = 100.0 * (d_ref_to_pred <= tau).mean()
    fs = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return GeometryScore(chamfer_l1=float(cd), f_score=float(fs),
                         precision=float(precision), recall=float(recall), tau=tau)


def signed_errors(points: np.ndarray, ref_sdf_fn, e_max: float | None = None) -> np.ndarray:
    """Signed distance of points to a reference surface (positive = swelling),
    truncated to +-e_max when given."""
    e = np.asarray(ref_sdf_fn(points), dtype=np.float64)
    if e_max is not None:
        e = np.clip(e, -e_max, e_max)
    return e


def write_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriangleMesh(np.asarray(verts, dtype=np.float64),
                        np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def write_ply(mesh: TriangleMesh, path, vertex_quality: np.ndarray | None = None) -> None:
    """Binary little-endian PLY; optional per-vertex scalar (signed error) channel."""
    nv, nt = len(mesh.vertices), len(mesh.triangles)
    with open(path, "wb") as f:
        head = ["ply", "format binary_little_endian 1.0",
                f"element vertex {nv}",
                "property float x", "property float y", "property float z"]
        if vertex_quality is not None:
            head.append("property float quality")
        head += [f"element face {nt}", "property list uchar int vertex_indices",
                 "end_header"]
        f.write(("\n".join(head) + "\n").encode())
        if vertex_quality is not None:
            data = np.concatenate(
                [mesh.vertices, np.asarray(vertex_quality).reshape(-1, 1)], axis=-1)
        else:
            data = mesh.vertices
        f.write(data.astype("<f4").tobytes())
        if nt:
            rec = np.empty(nt, dtype=[("n", "u1"), ("idx", "<i4", 3)])
            rec["n"] = 3
            rec["idx"] = mesh.triangles
            f.write(rec.tobytes())


def read_ply(path) -> TriangleMesh:
    with open(path, "rb") as f:
        nv = nt = 0
        props = []
        while True:
            line = f.readline().decode().strip()
            if line.startswith("element vertex"):
                nv = int(line.split()[-1])
            elif line.startswith("element face"):
                nt = int(line.split()[-1])
            elif line.startswith("property float"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        vdata = np.frombuffer(f.read(nv * 4 * len(props)), dtype="<f4")
        verts = vdata.reshape(nv, len(props))[:, :3].astype(np.float64)
        rec = np.frombuffer(f.read(nt * 13), dtype=[("n", "u1"), ("idx", "<i4", 3)])
        return TriangleMesh(verts, rec["idx"].astype(np.int64).copy())


def read_mesh(path) -> TriangleMesh:
    p = str(path)
    if p.endswith(".obj"):
        return read_obj(p)
    if p.endswith(".ply"):
        return read_ply(p)
    raise ValueError(f"unsupported mesh format: {p}")


def write_mesh(mesh: TriangleMesh, path, vertex_quality: np.ndarray | None = None) -> None:
    p = str(path)
    if p.endswith(".obj"):
        write_obj(mesh, p)
    elif p.endswith(".ply"):
        write_ply(mesh, p, vertex_quality)
    else:
        raise ValueError(f"unsupported mesh format: {p}")
