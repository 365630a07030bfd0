"""Full model: encoders -> fusion neck -> query generator -> decoder ->
mask decoder, with the three ablation switches wired in.

Ablation semantics:
  * ``use_fvg=False``  - the query generator skips the global-visual gate.
  * ``use_mqe=False``  - masks are averaged uniformly instead of
    score-weighted (scores reported as the uniform vector).
  * ``use_mmp=False``  - scores weight the queries themselves; the single
    aggregated query produces exactly one mask, which is the prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .decoder import VLDecoder
from .encoders import ImageEncoder, TextEncoder, TextFeatures, VisualFeatures
from .fusion import FusionNeck
from .layers import ParamStore, sine_encoding_1d
from .maskdec import MaskBundle, MaskProjector, QueryEstimator, aggregate
from .queries import QueryGenerator, QuerySet


@dataclass
class ModelOutput:
    text: TextFeatures
    visual: VisualFeatures
    queries: QuerySet
    f_s: Tensor
    bundle: MaskBundle

    @property
    def y(self) -> Tensor:
        return self.bundle.y


class MMNet:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        dtype = np.float32 if cfg.dtype == "float32" else np.float64
        self.store = ParamStore(np.random.default_rng(seed), dtype=dtype)
        self.text_encoder = TextEncoder(self.store, cfg)
        self.image_encoder = ImageEncoder(self.store, cfg)
        self.neck = FusionNeck(self.store, cfg)
        self.query_gen = QueryGenerator(self.store, cfg)
        self.decoder = VLDecoder(self.store, cfg)
        self.projector = MaskProjector(self.store, cfg)
        self.estimator = QueryEstimator(self.store, cfg)
        self.query_pos = sine_encoding_1d(cfg.num_queries, cfg.embed_dim, dtype)

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    def forward(self, image, tokens) -> ModelOutput:
        cfg = self.cfg
        text = self.text_encoder(tokens)
        visual = self.image_encoder(image)
        fused = self.neck(visual, text.f_tg)
        qs = self.query_gen(visual, text.f_t, text.token_mask)
        # every consumer of the queries (decoder, mask projector, score
        # estimator) sees the same per-query positional identity; without
        # it the queries of an unambiguous phrase are near-duplicates and
        # the per-query kernels cannot specialize
        f_q_pos = ad.add(qs.f_q, self.query_pos)
        state = self.decoder(fused.f_vt, f_q_pos)

        n_q = cfg.num_queries
        if cfg.use_mmp:
            masks, f_p = self.projector.project(state.f_s, f_q_pos)
            if cfg.use_mqe:
                scores = self.estimator(f_q_pos)
                y = self._aggregate(masks, scores)
            else:
                scores = ad.as_tensor(
                    np.full(n_q, 1.0 / n_q, dtype=self.store.dtype))
                y = self._aggregate(masks, None)
        else:
            if cfg.use_mqe:
                scores = self.estimator(f_q_pos)
            else:
                scores = ad.as_tensor(
                    np.full(n_q, 1.0 / n_q, dtype=self.store.dtype))
            q_agg = ad.matmul(ad.reshape(scores, (1, -1)), f_q_pos)
            masks, f_p = self.projector.project(state.f_s, q_agg)
            y = ad.reshape(masks, masks.shape[1:])
            if cfg.aggregate_probs:
                y = ad.sigmoid(y)

        bundle = MaskBundle(masks=masks, scores=scores, y=y, f_p=f_p)
        return ModelOutput(text=text, visual=visual, queries=qs,
                           f_s=state.f_s, bundle=bundle)

    def _aggregate(self, masks, scores):
        if self.cfg.aggregate_probs:
            return aggregate(ad.sigmoid(masks), scores)
        return aggregate(masks, scores)

    def prediction_prob(self, out: ModelOutput) -> np.ndarray:
        """Probability map at mask resolution for the aggregated prediction."""
        if self.cfg.aggregate_probs:
            return out.y.data
        return ad._sigmoid(out.y.data)
