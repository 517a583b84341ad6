"""Polarimetric constraints on surface normals.

The angle of polarization of a pixel pins the azimuth of the surface
normal up to the pi/2 (specular/diffuse) and pi ambiguities. Two loss
kernels are provided: the orthographic one, which ignores the ray
direction, and the perspective one, which accounts for it. The segmented
kernel switches between the diffuse-ambiguous product and the pure
specular branch on the degree of polarization. All functions are
torch-based and differentiable in the normal; python/numpy inputs are
promoted to float64 tensors, so the closure identities hold to ~1e-15.

Camera-frame convention: x right, y down, z forward (visible rays have
v_z > 0).
"""

from __future__ import annotations

import torch

DELTA_DIFFUSE = 0.0
DELTA_SPECULAR = torch.pi / 2

_DEGEN_COEFF = 1e-12  # threshold on ||a_p||^2
_DEGEN_VIEW = 1e-9  # threshold on ||v x n||


class DegenerateConstraintError(ValueError):
    """Perspective coefficient vector vanished (ray parallel to the AoP plane)."""


class DegenerateViewError(ValueError):
    """AoP undefined: viewing ray is parallel to the normal."""


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _maybe_renormalize(n: torch.Tensor) -> torch.Tensor:
    # rendered normals are weighted sums; normalize unconditionally so the
    # kernels stay smooth in n (a length-conditional branch would kink the
    # gradient right at the unit sphere where training operates)
    norm = n.norm(dim=-1, keepdim=True)
    safe = torch.where(norm > 0, norm, torch.ones_like(norm))
    return n / safe


def coeff_ortho(phi, delta) -> torch.Tensor:
    """Orthographic constraint coefficients [sin(phi+d), cos(phi+d), 0]."""
    phi, delta = _t(phi), _t(delta)
    p = phi + delta
    z = torch.zeros_like(p)
    return torch.stack([torch.sin(p), torch.cos(p), z], dim=-1)


def coeff_persp(phi, delta, v, *, strict: bool = True) -> torch.Tensor:
    """Perspective constraint coefficients for camera-frame ray v.

    a = [v_z sin p, v_z cos p, -(v_y cos p + v_x sin p)], p = phi + delta.
    With strict=True a degenerate coefficient (||a|| ~ 0) raises.
    """
    phi, delta, v = _t(phi), _t(delta), _t(v)
    p = phi + delta
    sp, cp = torch.sin(p), torch.cos(p)
    vx, vy, vz = v[..., 0], v[..., 1], v[..., 2]
    a = torch.stack([vz * sp, vz * cp, -(vy * cp + vx * sp)], dim=-1)
    if strict and bool((a.square().sum(-1) < _DEGEN_COEFF).any()):
        raise DegenerateConstraintError("perspective constraint coefficients vanished")
    return a


def h_ortho(phi, delta, n) -> torch.Tensor:
    """Squared orthographic constraint residual (a_o . n)^2."""
    n = _maybe_renormalize(_t(n))
    a = coeff_ortho(phi, delta)
    return (a * n).sum(-1).square()


def h_persp(phi, delta, v, n) -> torch.Tensor:
    """Squared, normalized perspective residual ((a_p . n)/||a_p||)^2, in [0,1]."""
    n = _maybe_renormalize(_t(n))
    a = coeff_persp(phi, delta, v)
    return ((a * n).sum(-1) / a.norm(dim=-1)).square()


def _h_persp_masked(phi, delta, v, n) -> tuple[torch.Tensor, torch.Tensor]:
    """Like h_persp but degenerate entries give (0, invalid) instead of raising."""
    n = _maybe_renormalize(_t(n))
    a = coeff_persp(phi, delta, v, strict=False)
    sq = a.square().sum(-1)
    valid = sq >= _DEGEN_COEFF
    safe = torch.where(valid, sq, torch.ones_like(sq))
    h = (a * n).sum(-1).square() / safe
    return torch.where(valid, h, torch.zeros_like(h)), valid


def f_persp(phi, v, n, rho, theta: float) -> torch.Tensor:
    """Segmented perspective kernel (DoP-adaptive pi/2 disambiguation).

    rho < theta: product of both branches (diffuse/specular ambiguous);
    rho >= theta: specular branch only.
    """
    out, valid = f_persp_masked(phi, v, n, rho, theta)
    if not bool(valid.all()):
        raise DegenerateConstraintError("degenerate pixel in segmented kernel")
    return out


def f_persp_masked(phi, v, n, rho, theta: float,
                   kernel: str = "persp") -> tuple[torch.Tensor, torch.Tensor]:
    """Segmented kernel with degenerate pixels mapped to (0, invalid).

    kernel selects the perspective ("persp") or orthographic ("ortho")
    residual; the orthographic form is the ablation variant.
    """
    rho = _t(rho)
    if kernel == "ortho":
        h_d = h_ortho(phi, DELTA_DIFFUSE, n)
        h_s = h_ortho(phi, DELTA_SPECULAR, n)
        valid = torch.ones_like(h_d, dtype=torch.bool)
    else:
        h_d, valid_d = _h_persp_masked(phi, DELTA_DIFFUSE, v, n)
        h_s, valid_s = _h_persp_masked(phi, DELTA_SPECULAR, v, n)
        valid = valid_d & valid_s
    out = torch.where(rho < theta, h_d * h_s, h_s)
    return torch.where(valid, out, torch.zeros_like(out)), valid


def aop_from_normal(n, v, delta, *, strict: bool = True) -> torch.Tensor:
    """Ground-truth AoP of a camera-frame normal seen along ray v.

    Inverts the perspective constraint: tan(phi') = (v x n)_x / (v x n)_y,
    phi = phi' - delta wrapped into [-pi/2, pi/2). Raises at normal
    incidence (v parallel to n) when strict.
    """
    n, v, delta = _t(n), _t(v), _t(delta)
    c = torch.cross(v.expand_as(n) if v.shape != n.shape else v, n, dim=-1)
    if strict and bool((c.norm(dim=-1) < _DEGEN_VIEW).any()):
        raise DegenerateViewError("viewing ray parallel to normal, AoP undefined")
    phi_p = torch.atan2(c[..., 0], c[..., 1])
    phi = phi_p - delta
    return torch.remainder(phi + torch.pi / 2, torch.pi) - torch.pi / 2


def aop_from_normal_masked(n, v, delta) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched AoP oracle; near-normal-incidence pixels give (0, invalid)."""
    n, v = _t(n), _t(v)
    c = torch.cross(v.expand_as(n) if v.shape != n.shape else v, n, dim=-1)
    valid = c.norm(dim=-1) >= _DEGEN_VIEW
    phi = aop_from_normal(n, v, delta, strict=False)
    return torch.where(valid, phi, torch.zeros_like(phi)), valid
