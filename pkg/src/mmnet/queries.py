"""Multi-query generator.

Builds a text-free dense visual pipeline (same layout as the fusion neck
but without the text gate), reduces it to one flattened vector per query,
fuses the per-word text features with the global visual feature, and turns
visual-word attention weights into the generated query matrix: each query
is a projected weighted sum of word features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .encoders import VisualFeatures
from .errors import InputError
from .layers import LayerNorm, Linear, ParamStore, coordinate_grid


@dataclass
class QuerySet:
    f_q: Tensor          # N_q x C generated queries
    attn: Tensor         # N_q x L word-attention map (rows sum to 1)
    f_tv: Tensor         # L x C fused textual features
    f_vd: Tensor         # N_q x (H3*W3) dense visual vectors


class QueryGenerator:
    def __init__(self, store: ParamStore, cfg: ModelConfig):
        c = cfg.embed_dim
        p2, p3, p4 = cfg.visual_channels
        half = c // 2
        n = cfg.grid * cfg.grid
        self.cfg = cfg
        # dense visual pipeline (no text gate)
        self.w_v4 = Linear(store, "qgen.v4", p4, c)
        self.w_m4 = Linear(store, "qgen.m4", c, half)
        self.w_v3 = Linear(store, "qgen.v3", p3, half)
        self.w_m3 = Linear(store, "qgen.m3", c, half)
        self.w_v2 = Linear(store, "qgen.v2", p2, half)
        self.agg = Linear(store, "qgen.agg", 3 * c, c)
        self.coord_mix = Linear(store, "qgen.coord", c + 2, c)
        # channel reduction to one map per query
        self.red1 = Linear(store, "qgen.red1", c, half)
        self.red2 = Linear(store, "qgen.red2", half, half)
        self.red3 = Linear(store, "qgen.red3", half, cfg.num_queries)
        # text-global fusion and attention projections
        self.w_t = Linear(store, "qgen.t", c, c)
        self.w_vg = Linear(store, "qgen.vg", p4, c)
        self.w_vd = Linear(store, "qgen.vd", n, c)
        self.w_a = Linear(store, "qgen.a", c, c)
        self.w_tv = Linear(store, "qgen.tv", c, c)
        # normalization ahead of each activated projection keeps the
        # attention logits at unit scale; without it the stacked
        # ReLU-of-Xavier products shrink the word features to ~1e-3 and
        # every query degenerates to the same uniform attention row
        self.ln_vd = LayerNorm(store, "qgen.ln_vd", c)
        self.ln_a = LayerNorm(store, "qgen.ln_a", c)
        self.ln_tv = LayerNorm(store, "qgen.ln_tv", c)

    def dense_visual(self, vis: VisualFeatures) -> Tensor:
        """N_q x (H3*W3) per-query dense visual vectors (text-independent)."""
        f_m4 = ad.upsample2x(ad.relu(self.w_v4(vis.f_v4)))
        f_m3 = ad.concat([ad.relu(self.w_m4(f_m4)),
                          ad.relu(self.w_v3(vis.f_v3))], axis=-1)
        f_m2 = ad.concat([ad.relu(self.w_m3(f_m3)),
                          ad.relu(self.w_v2(ad.avgpool2x2(vis.f_v2)))], axis=-1)
        f_m = self.agg(ad.concat([f_m2, f_m3, f_m4], axis=-1))
        h3, w3 = f_m.shape[0], f_m.shape[1]
        coord = ad.as_tensor(coordinate_grid(h3, w3, f_m.dtype))
        f_v = self.coord_mix(ad.concat([f_m, coord], axis=-1))
        maps = self.red3(ad.relu(self.red2(ad.relu(self.red1(f_v)))))
        return ad.transpose(ad.reshape(maps, (h3 * w3, self.cfg.num_queries)))

    def fuse_text_global(self, f_t: Tensor, f_vg: Tensor) -> Tensor:
        """L x C fused textual features; the visual gate is skipped when the
        ``use_fvg`` ablation switch is off."""
        text = ad.relu(self.w_t(f_t))
        if not self.cfg.use_fvg:
            return text
        gate = ad.relu(self.w_vg(ad.reshape(f_vg, (1, -1))))
        return ad.mul(text, ad.reshape(gate, (-1,)))

    def generate(self, f_vd: Tensor, f_tv: Tensor,
                 token_mask: np.ndarray) -> QuerySet:
        token_mask = np.asarray(token_mask, dtype=bool)
        if not token_mask.any():
            raise InputError("all token positions are masked")
        vd = ad.relu(self.ln_vd(self.w_vd(f_vd)))     # N_q x C
        tv = ad.relu(self.ln_a(self.w_a(f_tv)))       # L x C
        logits = ad.matmul(vd, ad.transpose(tv))
        if self.cfg.scale_query_attn:
            logits = ad.mul(logits, 1.0 / math.sqrt(self.cfg.embed_dim))
        attn = ad.masked_softmax(logits, token_mask[None, :], axis=-1)
        f_q = ad.matmul(attn, ad.relu(self.ln_tv(self.w_tv(f_tv))))
        return QuerySet(f_q=f_q, attn=attn, f_tv=f_tv, f_vd=f_vd)

    def __call__(self, vis: VisualFeatures, f_t: Tensor,
                 token_mask: np.ndarray) -> QuerySet:
        f_vd = self.dense_visual(vis)
        f_tv = self.fuse_text_global(f_t, vis.f_vg)
        return self.generate(f_vd, f_tv, token_mask)
