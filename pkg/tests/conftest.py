import numpy as np
import torch

from polsurf.field import FieldConfig, NeuralField


class AnalyticSphereField(NeuralField):
    """NeuralField with the SDF replaced by an exact sphere (oracle field)."""

    def __init__(self, radius=0.35, center=(0.0, 0.0, 0.0), color=(1.0, 0.0, 0.0),
                 sharpness=1024.0, config: FieldConfig | None = None):
        super().__init__(config)
        self.radius = radius
        self.register_buffer("oracle_center", torch.tensor(center, dtype=torch.float32))
        self.register_buffer("oracle_color", torch.tensor(color, dtype=torch.float32))
        with torch.no_grad():
            self.log_sharpness.fill_(float(np.log(sharpness)))

    def sdf(self, x, active_levels=None):
        s = (x - self.oracle_center).norm(dim=-1) - self.radius
        return s, x.new_zeros(x.shape[0], self.config.geo_features)

    def color(self, s, feat, view, normal):
        return self.oracle_color.expand(len(s), 3)


class AnalyticPlaneField(AnalyticSphereField):
    """Half-space z > 0 occupied; normal is -z everywhere."""

    def sdf(self, x, active_levels=None):
        return x[..., 2], x.new_zeros(x.shape[0], self.config.geo_features)
