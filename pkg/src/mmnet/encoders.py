"""Text and image encoders.

The text side is a small bidirectional transformer over word-level token
ids; the global text feature is a linear projection of the final-layer
activation at the EOS position.  The image side is a 4-stage strided
convolutional backbone (strides 4/8/16/32) topped by a CLIP-style
attention-pooling layer that yields a spatial feature map and a global
visual feature from the same pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import InputError, ShapeError
from .layers import (Conv2d, LayerNorm, Linear, MLP, MultiHeadAttention,
                     ParamStore, sine_encoding_1d)
from .vocab import EOS_ID, SOS_ID, PAD_ID, vocab_size


@dataclass
class TextFeatures:
    f_t: Tensor          # L x C per-token features
    f_tg: Tensor         # global text feature, (C',)
    token_mask: np.ndarray   # bool, True at valid (non-pad) positions


@dataclass
class VisualFeatures:
    f_v2: Tensor         # H/8  x W/8  x C2
    f_v3: Tensor         # H/16 x W/16 x C3
    f_v4: Tensor         # H/32 x W/32 x C4
    f_vg: Tensor         # (C4,)


class TextEncoder:
    def __init__(self, store: ParamStore, cfg: ModelConfig):
        c = cfg.embed_dim
        self.cfg = cfg
        self.embed = store.xavier("text.embed", (vocab_size(), c))
        self.pos = sine_encoding_1d(cfg.max_len, c, store.dtype)
        self.blocks = []
        for i in range(cfg.text_layers):
            self.blocks.append({
                "ln1": LayerNorm(store, f"text.{i}.ln1", c),
                "attn": MultiHeadAttention(store, f"text.{i}.attn", c,
                                           cfg.text_heads),
                "ln2": LayerNorm(store, f"text.{i}.ln2", c),
                "mlp": MLP(store, f"text.{i}.mlp", c, cfg.text_ffn),
            })
        self.ln_f = LayerNorm(store, "text.lnf", c)
        self.proj = Linear(store, "text.proj", c, cfg.text_global_dim)

    def __call__(self, tokens: np.ndarray) -> TextFeatures:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.shape[0] != self.cfg.max_len:
            raise InputError(
                f"token sequence must have length {self.cfg.max_len}, "
                f"got shape {tokens.shape}")
        if tokens[0] != SOS_ID:
            raise InputError("token sequence must begin with SOS")
        eos_positions = np.flatnonzero(tokens == EOS_ID)
        if len(eos_positions) != 1:
            raise InputError(
                f"token sequence must contain exactly one EOS, "
                f"found {len(eos_positions)}")
        eos = int(eos_positions[0])
        # positions after EOS are padding; their content must not leak into
        # valid rows, so they are only excluded via the attention mask
        mask = np.arange(len(tokens)) <= eos

        x = ad.add(self.embed[tokens], self.pos)
        for blk in self.blocks:
            xn = blk["ln1"](x)
            x = ad.add(x, blk["attn"](xn, xn, xn, key_mask=mask,
                                      causal=self.cfg.causal_text))
            x = ad.add(x, blk["mlp"](blk["ln2"](x)))
        f_t = self.ln_f(x)
        f_tg = ad.reshape(self.proj(f_t[eos:eos + 1]), (-1,))
        return TextFeatures(f_t=f_t, f_tg=f_tg, token_mask=mask)


class ImageEncoder:
    """4-stage conv backbone with attention pooling.

    Stage 1 is a stride-4 stem; stages 2-4 each halve the resolution, so
    stage outputs sit at strides 8/16/32.  Attention pooling prepends the
    spatial mean of the last stage as an extra token, runs one multi-head
    self-attention layer, and splits the result into a global feature
    (first token) and a spatial map (the rest).
    """

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        c1, c2, c3, c4 = cfg.backbone_channels
        p2, p3, p4 = cfg.visual_channels
        self.cfg = cfg
        # each stage downsamples by an exact 2x average pool after its convs
        # (a 3x3 stride-2 conv has no integral output size under symmetric
        # padding, so pooling provides the stride)
        self.stem = [
            Conv2d(store, "img.s1a", 3, 3, c1, stride=1, padding=1),
            Conv2d(store, "img.s1b", 3, c1, c1, stride=1, padding=1),
        ]
        self.stages = []
        chans = [c1, c2, c3, c4]
        for i in range(1, 4):
            self.stages.append([
                Conv2d(store, f"img.s{i+1}a", 3, chans[i - 1], chans[i],
                       stride=1, padding=1),
                Conv2d(store, f"img.s{i+1}b", 3, chans[i], chans[i],
                       stride=1, padding=1),
            ])
        self.pool_attn = MultiHeadAttention(store, "img.pool", c4,
                                            cfg.attnpool_heads)
        self.proj_z = Linear(store, "img.proj_z", c4, p4)
        self.proj_zbar = Linear(store, "img.proj_zbar", c4, p4)
        self.proj_x2 = Linear(store, "img.proj_x2", c2, p2)
        self.proj_x3 = Linear(store, "img.proj_x3", c3, p3)

    def __call__(self, image: Tensor) -> VisualFeatures:
        image = ad.as_tensor(image)
        h, w = image.shape[0], image.shape[1]
        if h % 32 or w % 32:
            raise ShapeError(f"image dims {h}x{w} not divisible by 32")
        x = image
        for conv in self.stem:
            x = ad.avgpool2x2(ad.relu(conv(x)))
        feats = []
        for stage in self.stages:
            for conv in stage:
                x = ad.relu(conv(x))
            x = ad.avgpool2x2(x)
            feats.append(x)
        x2, x3, x4 = feats

        h4, w4, c4 = x4.shape
        flat = ad.reshape(x4, (h4 * w4, c4))
        mean_tok = ad.reshape(ad.tmean(flat, axis=0), (1, c4))
        tokens = ad.concat([mean_tok, flat], axis=0)
        pooled = self.pool_attn(tokens, tokens, tokens)
        zbar, z = pooled[0:1], pooled[1:]

        return VisualFeatures(
            f_v2=self.proj_x2(x2),
            f_v3=self.proj_x3(x3),
            f_v4=ad.reshape(self.proj_z(z), (h4, w4, -1)),
            f_vg=ad.reshape(self.proj_zbar(zbar), (-1,)),
        )
