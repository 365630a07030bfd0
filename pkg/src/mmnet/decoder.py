"""Vision-language decoder: pre-norm transformer layers whose
cross-attention reads the generated queries into the multimodal features.

2D sine positional encodings for the visual tokens enter only the
query/key paths of the attention layers (never the residual stream), so a
decoder with zero-initialized output projections is exactly the identity.
The 1D query encodings are added by the caller (the full-model pipeline),
keeping the decoder itself permutation-invariant over the key/value rows
it receives.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ShapeError
from .layers import LayerNorm, MLP, MultiHeadAttention, ParamStore, \
    sine_encoding_2d


@dataclass
class DecoderState:
    f_s: Tensor                  # N x C evolved multimodal features
    self_attns: list             # per layer, per head self-attention rows
    cross_attns: list            # per layer, per head cross-attention rows


class VLDecoder:
    def __init__(self, store: ParamStore, cfg: ModelConfig):
        c = cfg.embed_dim
        self.cfg = cfg
        self.layers = []
        for i in range(cfg.decoder_layers):
            self.layers.append({
                "ln_sa": LayerNorm(store, f"dec.{i}.ln_sa", c),
                "sa": MultiHeadAttention(store, f"dec.{i}.sa", c,
                                         cfg.decoder_heads, zero_init_out=True),
                "ln_ca": LayerNorm(store, f"dec.{i}.ln_ca", c),
                "ca": MultiHeadAttention(store, f"dec.{i}.ca", c,
                                         cfg.decoder_heads, zero_init_out=True),
                "ln_mlp": LayerNorm(store, f"dec.{i}.ln_mlp", c),
                "mlp": MLP(store, f"dec.{i}.mlp", c, cfg.decoder_ffn,
                           zero_init_out=True),
            })

    def __call__(self, f_vt: Tensor, f_q: Tensor) -> DecoderState:
        n, c = f_vt.shape
        grid = self.cfg.grid
        if n != grid * grid:
            raise ShapeError(
                f"f_vt has {n} rows, expected {grid * grid} for a "
                f"{grid}x{grid} grid")
        pos = sine_encoding_2d(grid, grid, c, f_vt.dtype)
        x = f_vt
        self_attns, cross_attns = [], []
        for layer in self.layers:
            xn = layer["ln_sa"](x)
            sa, attn_s = layer["sa"](xn, xn, xn, return_attn=True,
                                     q_pos=pos, k_pos=pos)
            x = ad.add(x, sa)
            ca, attn_c = layer["ca"](layer["ln_ca"](x), f_q, f_q,
                                     return_attn=True, q_pos=pos)
            x = ad.add(x, ca)
            x = ad.add(x, layer["mlp"](layer["ln_mlp"](x)))
            self_attns.append(attn_s)
            cross_attns.append(attn_c)
        return DecoderState(f_s=x, self_attns=self_attns,
                            cross_attns=cross_attns)
