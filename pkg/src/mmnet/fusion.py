"""Fusion neck: merge the three visual stages with the global text feature
into flattened multimodal features with coordinate channels.

The stride-32 map is gated by the text feature (elementwise product of two
ReLU branches) and upsampled; the stride-16 and pooled stride-8 maps join
by concatenation.  Every learnable matrix on a spatial map acts as a 1x1
convolution (a linear map over channels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .encoders import VisualFeatures
from .layers import Linear, ParamStore, coordinate_grid


@dataclass
class FusedVisual:
    f_vt: Tensor             # (H3*W3) x C flattened multimodal features
    f_coord: np.ndarray      # H3 x W3 x 2 coordinate channels


class FusionNeck:
    def __init__(self, store: ParamStore, cfg: ModelConfig, prefix="neck"):
        c = cfg.embed_dim
        p2, p3, p4 = cfg.visual_channels
        half = c // 2
        self.cfg = cfg
        self.w_v4 = Linear(store, f"{prefix}.v4", p4, c)
        self.w_tg = Linear(store, f"{prefix}.tg", cfg.text_global_dim, c)
        self.w_m4 = Linear(store, f"{prefix}.m4", c, half)
        self.w_v3 = Linear(store, f"{prefix}.v3", p3, half)
        self.w_m3 = Linear(store, f"{prefix}.m3", c, half)
        self.w_v2 = Linear(store, f"{prefix}.v2", p2, half)
        self.agg = Linear(store, f"{prefix}.agg", 3 * c, c)
        self.out = Linear(store, f"{prefix}.out", c + 2, c)

    def __call__(self, vis: VisualFeatures, f_tg: Tensor) -> FusedVisual:
        gate = ad.relu(self.w_tg(ad.reshape(f_tg, (1, -1))))
        gate = ad.reshape(gate, (-1,))
        f_m4 = ad.upsample2x(ad.mul(ad.relu(self.w_v4(vis.f_v4)), gate))
        f_m3 = ad.concat([ad.relu(self.w_m4(f_m4)),
                          ad.relu(self.w_v3(vis.f_v3))], axis=-1)
        f_m2 = ad.concat([ad.relu(self.w_m3(f_m3)),
                          ad.relu(self.w_v2(ad.avgpool2x2(vis.f_v2)))], axis=-1)
        f_m = self.agg(ad.concat([f_m2, f_m3, f_m4], axis=-1))
        h3, w3 = f_m.shape[0], f_m.shape[1]
        coord = coordinate_grid(h3, w3, f_m.dtype)
        fused = self.out(ad.concat([f_m, ad.as_tensor(coord)], axis=-1))
        f_vt = ad.reshape(fused, (h3 * w3, self.cfg.embed_dim))
        return FusedVisual(f_vt=f_vt, f_coord=coord)
