"""Mask decoder: per-query dynamic-convolution mask projection, per-query
scoring, and score-weighted aggregation.

Each query vector is linearly mapped to 9*C_p + 1 values; the first 9*C_p
become a 3x3 single-output convolution kernel over the shared mask feature
map, the last one its bias.  Scores come from one self-attention layer over
the queries followed by a linear layer and a softmax.  Masks are logits;
aggregation is an elementwise convex combination in logit space (optionally
in probability space via ``aggregate_probs``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ShapeError
from .layers import Conv2d, Linear, MultiHeadAttention, ParamStore


@dataclass
class MaskBundle:
    masks: Tensor        # N_q x 4H3 x 4W3 per-query mask logits
    scores: Tensor       # (N_q,) softmax scores
    y: Tensor            # 4H3 x 4W3 aggregated prediction logits
    f_p: Tensor          # 4H3 x 4W3 x C_p shared mask feature


class MaskProjector:
    """Dynamic-convolution mask head (one mask per query)."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        c = cfg.embed_dim
        self.cfg = cfg
        self.c_p = c // 2
        self.feat_conv = Conv2d(store, "mmp.feat", 3, c, self.c_p, padding=1)
        self.w_p = Linear(store, "mmp.kernel", c, 9 * self.c_p + 1)

    def mask_feature(self, f_s: Tensor) -> Tensor:
        """4H3 x 4W3 x C_p shared feature: Up2x(Conv3x3(Up2x(reshape(F_s))))."""
        n, c = f_s.shape
        grid = int(round(np.sqrt(n)))
        if grid * grid != n:
            raise ShapeError(f"f_s rows ({n}) do not form a square grid")
        fm = ad.reshape(f_s, (grid, grid, c))
        return ad.upsample2x(self.feat_conv(ad.upsample2x(fm)))

    def project(self, f_s: Tensor, f_q: Tensor):
        """Return (masks: N_q x 4H3 x 4W3 logits, f_p)."""
        f_p = self.mask_feature(f_s)
        h, w, _ = f_p.shape
        params = self.w_p(f_q)                       # N_q x (9*C_p + 1)
        if self.cfg.relu_kernel_params:
            params = ad.relu(params)
        n_q = f_q.shape[0]
        masks = []
        for i in range(n_q):
            row = params[i]
            kernel = ad.reshape(row[:9 * self.c_p], (3, 3, self.c_p, 1))
            bias = row[9 * self.c_p:]
            m = ad.conv2d(f_p, kernel, bias, stride=1, padding=1)
            masks.append(ad.reshape(m, (1, h, w)))
        return ad.concat(masks, axis=0), f_p


class QueryEstimator:
    """Score each query: softmax(linear(MHSA(F_q))) over the N_q entries."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        c = cfg.embed_dim
        self.attn = MultiHeadAttention(store, "mqe.attn", c, cfg.decoder_heads)
        self.w_s = Linear(store, "mqe.score", c, 1)

    def __call__(self, f_q: Tensor) -> Tensor:
        x = self.attn(f_q, f_q, f_q)
        logits = ad.reshape(self.w_s(x), (-1,))
        return ad.softmax(logits, axis=-1)


def aggregate(masks: Tensor, scores: Tensor | None) -> Tensor:
    """Convex combination of the per-query masks.

    ``scores=None`` (the MQE-off ablation) takes the plain unweighted mean,
    which equals aggregation with uniform scores.
    """
    if scores is None:
        return ad.tmean(masks, axis=0)
    if scores.shape[0] != masks.shape[0]:
        raise ShapeError(
            f"{scores.shape[0]} scores for {masks.shape[0]} masks")
    weighted = ad.mul(masks, ad.reshape(scores, (-1, 1, 1)))
    return ad.tsum(weighted, axis=0)
