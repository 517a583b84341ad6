"""Neural object representation: multi-resolution hash grid + decoders.

The geometry is an SDF decoded from hash-grid features by a one-hidden-
layer MLP, with an additive analytic sphere term so the initial field is
a sphere (negative inside). Color is decoded by a two-hidden-layer MLP
from (s, feature, view, normal). Normals come from central finite
differences of the SDF, so only first-order autograd is ever needed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

CKPT_MAGIC = "PSCKPT v1"

# fixed spatial-hash primes (x is left unmultiplied)
_PRIMES = (1, 2654435761, 805459861)


@dataclass
class HashGridConfig:
    """Multi-resolution grid layout over an axis-aligned domain box."""

    levels: int = 16
    coarsest_res: int = 16
    finest_res: int = 512
    table_size: int = 2 ** 14
    features_per_level: int = 2
    domain_min: tuple[float, float, float] = (-0.75, -0.75, -0.75)
    domain_max: tuple[float, float, float] = (0.75, 0.75, 0.75)

    def __post_init__(self):
        if self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")

    @property
    def resolutions(self) -> list[int]:
        b = (self.finest_res / self.coarsest_res) ** (1.0 / max(self.levels - 1, 1))
        return [int(round(self.coarsest_res * b ** l)) for l in range(self.levels)]


# paper-scale preset kept available; the desk default above trains in minutes on CPU
PAPER_GRID = HashGridConfig(levels=16, coarsest_res=32, finest_res=2700, table_size=2 ** 19)


@dataclass
class FieldConfig:
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    geo_features: int = 15
    hidden: int = 64
    sharpness_init: float = 64.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "FieldConfig":
        d = json.loads(s)
        g = d.pop("grid")
        g["domain_min"] = tuple(g["domain_min"])
        g["domain_max"] = tuple(g["domain_max"])
        return cls(grid=HashGridConfig(**g), **d)


def set_active_levels(iteration: int, levels: int = 16, start_levels: int = 4,
                      interval: int = 1000) -> int:
    """Progressive schedule: start coarse, extend one level per interval."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return min(levels, start_levels + iteration // interval)


class HashGrid(nn.Module):
    """Per-level feature tables with trilinear interpolation.

    Levels whose dense vertex grid fits in the table are indexed directly
    (collision free); finer levels use the xor-of-primes spatial hash.
    """

    def __init__(self, config: HashGridConfig):
        super().__init__()
        self.config = config
        self.resolutions = config.resolutions
        self.tables = nn.ParameterList(
            nn.Parameter(torch.empty(config.table_size, config.features_per_level))
            for _ in range(config.levels)
        )
        for t in self.tables:
            nn.init.uniform_(t, -1e-4, 1e-4)
        lo = torch.tensor(config.domain_min, dtype=torch.float32)
        hi = torch.tensor(config.domain_max, dtype=torch.float32)
        self.register_buffer("lo", lo)
        self.register_buffer("extent", hi - lo)

    @property
    def out_features(self) -> int:
        return self.config.levels * self.config.features_per_level

    def _indices(self, coords: torch.Tensor, res: int) -> torch.Tensor:
        # coords: (..., 3) int64 vertex coordinates in [0, res]
        n_vert = res + 1
        if n_vert ** 3 <= self.config.table_size:
            return (coords[..., 0] * n_vert + coords[..., 1]) * n_vert + coords[..., 2]
        h = coords[..., 0] * _PRIMES[0]
        h = torch.bitwise_xor(h, coords[..., 1] * _PRIMES[1])
        h = torch.bitwise_xor(h, coords[..., 2] * _PRIMES[2])
        return torch.bitwise_and(h, self.config.table_size - 1)

    def _corner_indices(self, base: torch.Tensor, res: int) -> torch.Tensor:
        """(N,8) table rows for the 8 corners of the cells holding `base`.

        Per-axis terms are combined by broadcasting so the (N,8,3) corner
        tensor is never materialized.
        """
        n_vert = res + 1
        two = torch.stack([base, base + 1], dim=-1)  # (N,3,2)
        if n_vert ** 3 <= self.config.table_size:
            ax = two[:, 0] * (n_vert * n_vert)
            ay = two[:, 1] * n_vert
            az = two[:, 2]
            idx = ax[:, :, None, None] + ay[:, None, :, None] + az[:, None, None, :]
        else:
            hx = two[:, 0] * _PRIMES[0]
            hy = two[:, 1] * _PRIMES[1]
            hz = two[:, 2] * _PRIMES[2]
            idx = torch.bitwise_xor(
                torch.bitwise_xor(hx[:, :, None, None], hy[:, None, :, None]),
                hz[:, None, None, :])
            idx = torch.bitwise_and(idx, self.config.table_size - 1)
        return idx.reshape(-1, 8)

    def forward(self, x: torch.Tensor, active_levels: int | None = None) -> torch.Tensor:
        """Encode world points (N,3) -> (N, levels*F); inactive levels are zero."""
        cfg = self.config
        if active_levels is None:
            active_levels = cfg.levels
        x01 = ((x - self.lo) / self.extent).clamp(0.0, 1.0)
        n = x.shape[0]
        outs = []
        for l in range(cfg.levels):
            if l >= active_levels:
                outs.append(x.new_zeros(n, cfg.features_per_level))
                continue
            res = self.resolutions[l]
            pos = x01 * res
            base = pos.floor().long().clamp(max=res - 1)
            frac = pos - base
            idx = self._corner_indices(base, res)
            feats = self.tables[l][idx]  # (N,8,F)
            wpair = torch.stack([1.0 - frac, frac], dim=-1)  # (N,3,2)
            w = (wpair[:, 0, :, None, None] * wpair[:, 1, None, :, None]
                 * wpair[:, 2, None, None, :]).reshape(-1, 8)
            outs.append((feats * w[..., None]).sum(1))
        return torch.cat(outs, dim=-1)


class NeuralField(nn.Module):
    """Hash grid + SDF decoder + color decoder + trainable sharpness."""

    def __init__(self, config: FieldConfig | None = None):
        super().__init__()
        self.config = config or FieldConfig()
        cfg = self.config
        self.grid = HashGrid(cfg.grid)
        self.sdf_mlp = nn.Sequential(
            nn.Linear(self.grid.out_features, cfg.hidden),
            nn.ReLU(),
            nn.Linear(cfg.hidden, 1 + cfg.geo_features),
        )
        # near-zero output layer: the initial SDF is the analytic sphere term
        nn.init.normal_(self.sdf_mlp[-1].weight, std=1e-4)
        nn.init.zeros_(self.sdf_mlp[-1].bias)
        self.color_mlp = nn.Sequential(
            nn.Linear(1 + cfg.geo_features + 6, cfg.hidden),
            nn.ReLU(),
            nn.Linear(cfg.hidden, cfg.hidden),
            nn.ReLU(),
            nn.Linear(cfg.hidden, 3),
        )
        self.log_sharpness = nn.Parameter(torch.tensor(float(np.log(cfg.sharpness_init))))

        lo = np.asarray(cfg.grid.domain_min)
        hi = np.asarray(cfg.grid.domain_max)
        center = torch.tensor((lo + hi) / 2, dtype=torch.float32)
        self.register_buffer("sphere_center", center)
        self.init_radius = float(0.5 * (hi - lo).min() / 2)

    @property
    def sharpness(self) -> torch.Tensor:
        return self.log_sharpness.exp()

    def sdf(self, x: torch.Tensor, active_levels: int | None = None
            ) -> tuple[torch.Tensor, torch.Tensor]:
        """SDF value and geometry feature at world points (N,3)."""
        enc = self.grid(x, active_levels)
        out = self.sdf_mlp(enc)
        s = out[:, 0] + ((x - self.sphere_center).norm(dim=-1) - self.init_radius)
        return s, out[:, 1:]

    def fd_step(self, active_levels: int | None = None) -> float:
        """Normal/eikonal finite-difference step: half the finest active cell."""
        cfg = self.config.grid
        lvl = min(active_levels or cfg.levels, cfg.levels) - 1
        res = self.grid.resolutions[max(lvl, 0)]
        return float(self.grid.extent.min()) / res / 2

    def sdf_gradient(self, x: torch.Tensor, active_levels: int | None = None,
                     step: float | None = None) -> torch.Tensor:
        """Central finite-difference gradient of the SDF, (N,3)."""
        h = step if step is not None else self.fd_step(active_levels)
        offsets = torch.cat([torch.eye(3), -torch.eye(3)]) * h  # (6,3)
        pts = (x[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
        s, _ = self.sdf(pts, active_levels)
        s = s.reshape(-1, 6)
        return (s[:, :3] - s[:, 3:]) / (2 * h)

    def normal(self, x: torch.Tensor, active_levels: int | None = None,
               step: float | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Unit normals from the FD gradient; zero-gradient points get +z, flagged."""
        g = self.sdf_gradient(x, active_levels, step)
        norm = g.norm(dim=-1, keepdim=True)
        degenerate = norm.squeeze(-1) < 1e-12
        fallback = torch.tensor([0.0, 0.0, 1.0])
        n = torch.where(degenerate[:, None], fallback.expand_as(g),
                        g / torch.where(norm > 0, norm, torch.ones_like(norm)))
        return n, degenerate

    def color(self, s: torch.Tensor, feat: torch.Tensor, view: torch.Tensor,
              normal: torch.Tensor) -> torch.Tensor:
        """RGB in [0,1]^3 for per-sample (s, feature, view dir, normal)."""
        inp = torch.cat([s[:, None], feat, view, normal], dim=-1)
        return torch.sigmoid(self.color_mlp(inp))


def save_checkpoint(field_: NeuralField, path, extra: dict | None = None) -> None:
    """Versioned checkpoint: text header, config json, named raw float32 blobs."""
    with open(path, "wb") as f:
        f.write(f"{CKPT_MAGIC}\n".encode())
        f.write(("config " + field_.config.to_json() + "\n").encode())
        f.write(("extra " + json.dumps(extra or {}, sort_keys=True) + "\n").encode())
        for name, p in field_.state_dict().items():
            arr = p.detach().cpu().numpy().astype("<f4")
            shape = " ".join(str(d) for d in arr.shape)
            f.write(f"param {name} {shape}\n".encode())
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[NeuralField, dict]:
    with open(path, "rb") as f:
        if f.readline().decode().strip() != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        cfg_line = f.readline().decode()
        if not cfg_line.startswith("config "):
            raise ValueError("missing config block")
        config = FieldConfig.from_json(cfg_line[len("config "):])
        extra_line = f.readline().decode()
        extra = json.loads(extra_line[len("extra "):]) if extra_line.startswith("extra ") else {}
        fld = NeuralField(config)
        state = {}
        while True:
            line = f.readline()
            if not line:
                break
            parts = line.decode().split()
            if parts[0] != "param":
                raise ValueError("malformed checkpoint record")
            name, shape = parts[1], tuple(int(v) for v in parts[2:])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(n * 4)
            state[name] = torch.from_numpy(
                np.frombuffer(buf, dtype="<f4").copy().reshape(shape))
        fld.load_state_dict(state)
    return fld, extra
