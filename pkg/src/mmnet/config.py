"""Model and training configuration.

Configs are plain dataclasses, loadable from a single JSON document of the
form ``{"model": {...}, "train": {...}}``.  Unknown keys are rejected so
typos in ablation sweeps fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class ModelConfig:
    image_size: int = 96
    backbone_channels: tuple = (16, 32, 64, 64)
    visual_channels: tuple = (32, 64, 64)   # projected F_v2 / F_v3 / F_v4 dims
    text_global_dim: int = 64               # dim of the global text feature
    embed_dim: int = 64                     # shared width C
    max_len: int = 12
    text_layers: int = 2
    text_heads: int = 4
    text_ffn: int = 256
    causal_text: bool = False
    attnpool_heads: int = 4
    num_queries: int = 8
    decoder_layers: int = 2
    decoder_heads: int = 4
    decoder_ffn: int = 256
    scale_query_attn: bool = False
    relu_kernel_params: bool = False
    aggregate_probs: bool = False
    use_fvg: bool = True
    use_mmp: bool = True
    use_mqe: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_size % 32:
            raise ConfigError(f"image_size {self.image_size} not divisible by 32")
        if self.num_queries < 1:
            raise ConfigError(f"num_queries must be >= 1, got {self.num_queries}")
        if self.embed_dim % self.decoder_heads or self.embed_dim % self.text_heads:
            raise ConfigError("embed_dim must be divisible by head counts")
        if self.embed_dim % 4:
            raise ConfigError("embed_dim must be divisible by 4 (2D sine encoding)")
        if self.embed_dim % 2:
            raise ConfigError("embed_dim must be even (C_p = C/2)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.backbone_channels = tuple(self.backbone_channels)
        self.visual_channels = tuple(self.visual_channels)

    @property
    def grid(self) -> int:
        """Side length of the stride-16 feature grid (H3 == W3)."""
        return self.image_size // 16

    @property
    def mask_size(self) -> int:
        """Side length of the predicted mask (4 * H3 == image_size / 4)."""
        return self.image_size // 4


@dataclass
class TrainConfig:
    epochs: int = 4
    steps_per_epoch: int = 0        # 0 = one pass over the training set
    batch_size: int = 8
    lr: float = 1e-3
    poly_power: float = 0.9
    seed: int = 0
    train_size: int = 2000
    val_size: int = 200
    max_distractors: int = 2
    iou_agg: str = "mean"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.iou_agg not in ("mean", "overall"):
            raise ConfigError(f"iou_agg must be mean or overall, got {self.iou_agg!r}")
        if isinstance(self.model, dict):
            self.model = _from_dict(ModelConfig, self.model)


def _from_dict(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def config_from_dict(doc: dict) -> TrainConfig:
    """Build a TrainConfig from a {"model": ..., "train": ...} document."""
    unknown = set(doc) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    train = dict(doc.get("train", {}))
    if "model" in train:
        raise ConfigError("model config belongs under the top-level 'model' key")
    cfg = _from_dict(TrainConfig, train)
    cfg.model = _from_dict(ModelConfig, doc.get("model", {}))
    return cfg


def config_to_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    model = d.pop("model")
    model["backbone_channels"] = list(model["backbone_channels"])
    model["visual_channels"] = list(model["visual_channels"])
    return {"model": model, "train": d}


def load_config(path) -> TrainConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def published_dims(cfg: TrainConfig | None = None) -> TrainConfig:
    """Preset mirroring the published training scale (480px, 512-wide, 8 heads).

    Provided for users with hardware; the desk-scale defaults are what the
    test suite runs.
    """
    cfg = cfg or TrainConfig()
    cfg.model = dataclasses.replace(
        cfg.model, image_size=480, embed_dim=512, text_heads=8,
        decoder_heads=8, attnpool_heads=8, text_ffn=2048, decoder_ffn=2048,
        max_len=17, num_queries=24)
    cfg.epochs = 100
    cfg.lr = 1e-5
    cfg.batch_size = 64
    return cfg


PRESETS = {"desk": lambda: TrainConfig(), "published-dims": published_dims}
