"""Architecture configs, presets and model assembly."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class StageConfig:
    expected_spatial: tuple
    num_blocks: int
    num_heads: int
    channels: int

    def __post_init__(self):
        object.__setattr__(self, "expected_spatial", tuple(self.expected_spatial))
        if self.channels % self.num_heads:
            raise ConfigError(f"channels {self.channels} not divisible by {self.num_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads


@dataclass(frozen=True)
class ArchConfig:
    family: str
    image_size: int
    patch_size: int
    stride: int
    stages: tuple
    mlp_ratio: int = 4
    num_classes: int = 1000
    n_cls: int = 1
    in_chans: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages))
        if self.family not in ("vit", "pit"):
            raise ConfigError(f"unknown family {self.family!r}; expected 'vit' or 'pit'")
        if not self.stages:
            raise ConfigError("config needs at least one stage")
        if self.family == "vit" and len(self.stages) != 1:
            raise ConfigError(f"vit configs have exactly one stage, got {len(self.stages)}")
        for i in range(1, len(self.stages)):
            prev, cur = self.stages[i - 1], self.stages[i]
            if cur.channels != 2 * prev.channels or cur.num_heads != 2 * prev.num_heads:
                raise ConfigError(f"stage {i + 1}: pooling doubles channels and heads "
                                  f"({prev.channels}/{prev.num_heads} -> {cur.channels}/{cur.num_heads})")

    def spatial_sizes(self, image_size: Optional[int] = None) -> list:
        """Token grid of each stage at ``image_size`` (default: the config's)."""
        n = T.conv_out_size(image_size or self.image_size, self.patch_size, self.stride)
        sizes = [n]
        for _ in self.stages[1:]:
            n = L.pooled_size(n)
            sizes.append(n)
        return [(s, s) for s in sizes]

    def to_dict(self) -> dict:
        d = asdict(self)
        for s in d["stages"]:
            s["expected_spatial"] = list(s["expected_spatial"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad config document: {e}") from e

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ArchConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e


def _stages(rows):
    return tuple(StageConfig((hw, hw), b, h, c) for hw, b, h, c in rows)


# (spatial, blocks, heads, channels) per stage at 224x224
PRESETS = {
    "vit_ti": ArchConfig("vit", 224, 16, 16, _stages([(14, 12, 3, 192)])),
    "vit_s": ArchConfig("vit", 224, 16, 16, _stages([(14, 12, 6, 384)])),
    "vit_b": ArchConfig("vit", 224, 16, 16, _stages([(14, 12, 12, 768)])),
    "pit_ti": ArchConfig("pit", 224, 16, 8, _stages([(27, 2, 2, 64), (14, 6, 4, 128), (7, 4, 8, 256)])),
    "pit_xs": ArchConfig("pit", 224, 16, 8, _stages([(27, 2, 2, 96), (14, 6, 4, 192), (7, 4, 8, 384)])),
    "pit_s": ArchConfig("pit", 224, 16, 8, _stages([(27, 2, 3, 144), (14, 6, 6, 288), (7, 4, 12, 576)])),
    # patch 14 / stride 7 is the geometry that yields the 31 -> 16 -> 8 grids
    "pit_b": ArchConfig("pit", 224, 14, 7, _stages([(31, 3, 4, 256), (16, 6, 8, 512), (8, 4, 16, 1024)])),
}


def preset(name: str) -> ArchConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


# Desk-scale base geometry: 32x32 input, patch 4.
TOY_PIT = ((1, 2, 32), (2, 4, 64), (1, 8, 128))  # (blocks, heads, channels)
TOY_VIT = (4, 4, 64)


def toy_config(width_scale: float = 1.0, depth_scale: float = 1.0, image_size: int = 32,
               family: str = "pit", num_classes: int = 10) -> ArchConfig:
    """Scaled-down PiT (stride 2) or ViT (stride 4) with patch 4.

    ``width_scale`` multiplies every channel count; heads stay fixed.
    """
    patch = 4
    if family == "pit":
        rows, stride = TOY_PIT, 2
    elif family == "vit":
        rows, stride = (TOY_VIT,), 4
    else:
        raise ConfigError(f"unknown family {family!r}; expected 'vit' or 'pit'")
    n = T.conv_out_size(image_size, patch, stride)
    if n < 1:
        raise ConfigError(f"image size {image_size} smaller than patch {patch}")
    stages = []
    for i, (blocks, heads, chans) in enumerate(rows):
        c = chans * width_scale
        if c != int(c) or int(c) % heads or c < heads:
            raise ConfigError(f"width scale {width_scale} gives {c} channels, "
                              f"not divisible by {heads} heads")
        if i:
            n = L.pooled_size(n)
        stages.append(StageConfig((n, n), max(1, round(blocks * depth_scale)), heads, int(c)))
    return ArchConfig(family, image_size, patch, stride, tuple(stages), num_classes=num_classes)


def toy_pair(width_scale: float = 1.0, depth_scale: float = 1.0, image_size: int = 32,
             num_classes: int = 10):
    """Matched (vit, pit) toy configs and their FLOPs ratio pit/vit."""
    from .analysis import count_flops

    vit = toy_config(width_scale, depth_scale, image_size, "vit", num_classes)
    pit = toy_config(width_scale, depth_scale, image_size, "pit", num_classes)
    return vit, pit, count_flops(pit).total_macs / count_flops(vit).total_macs


def validate(config: ArchConfig) -> None:
    for i, (stage, got) in enumerate(zip(config.stages, config.spatial_sizes())):
        if got[0] < 1:
            raise ConfigError(f"stage {i + 1}: image {config.image_size} too small for patch {config.patch_size}")
        if i < len(config.stages) - 1 and min(got) < 2:
            raise ConfigError(f"stage {i + 1}: computed {got[0]}x{got[1]} grid is too small to pool")
        if tuple(stage.expected_spatial) != tuple(got):
            raise ConfigError(f"stage {i + 1}: computed {got[0]}×{got[1]}, "
                              f"config expects {stage.expected_spatial[0]}×{stage.expected_spatial[1]}")


@dataclass
class Model:
    config: ArchConfig
    params: dict = field(repr=False)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, images, capture_attention: bool = False):
        return forward(self, images, capture_attention)


def param_shapes(config: ArchConfig) -> dict:
    """Name -> shape for every learnable tensor, in canonical order."""
    c0 = config.stages[0].channels
    grid = config.spatial_sizes()[0]
    p = config.patch_size
    shapes = {
        "embed.kernel": (c0, config.in_chans, p, p),
        "embed.bias": (c0,),
        "embed.pos": (config.n_cls + grid[0] * grid[1], c0),
        "embed.cls": (config.n_cls, c0),
    }
    for i, st in enumerate(config.stages):
        c, hid = st.channels, st.channels * config.mlp_ratio
        for j in range(st.num_blocks):
            pre = f"stage{i}.block{j}."
            for n in "qkvo":
                shapes[pre + f"attn.w{n}"] = (c, c)
                shapes[pre + f"attn.b{n}"] = (c,)
            shapes[pre + "mlp.w1"] = (c, hid)
            shapes[pre + "mlp.b1"] = (hid,)
            shapes[pre + "mlp.w2"] = (hid, c)
            shapes[pre + "mlp.b2"] = (c,)
            for ln in ("ln1", "ln2"):
                shapes[pre + f"{ln}.g"] = (c,)
                shapes[pre + f"{ln}.b"] = (c,)
        if i < len(config.stages) - 1:
            shapes[f"pool{i}.dw_kernel"] = (2 * c, 1, 3, 3)
            shapes[f"pool{i}.dw_bias"] = (2 * c,)
            shapes[f"pool{i}.cls_w"] = (c, 2 * c)
            shapes[f"pool{i}.cls_b"] = (2 * c,)
    cl = config.stages[-1].channels
    shapes.update({"head.ln_g": (cl,), "head.ln_b": (cl,),
                   "head.w": (cl, config.num_classes), "head.b": (config.num_classes,)})
    return shapes


def build(config: ArchConfig, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> Model:
    """Instantiate parameters deterministically from ``seed``."""
    validate(config)
    if config.n_cls != 1:
        raise ConfigError(f"only one class token is supported, got n_cls={config.n_cls}")
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    grid = config.spatial_sizes()[0]
    c0 = config.stages[0].channels
    params = {}

    def put(prefix, group):
        for k, v in group.items():
            params[prefix + k] = v

    put("embed.", L.init_embed(rng, config.in_chans, c0, config.patch_size, 1 + grid[0] * grid[1], dtype))
    for i, st in enumerate(config.stages):
        for j in range(st.num_blocks):
            put(f"stage{i}.block{j}.", L.init_block(rng, st.channels, config.mlp_ratio, dtype))
        if i < len(config.stages) - 1:
            put(f"pool{i}.", L.init_pool(rng, st.channels, dtype))
    put("head.", L.init_head(rng, config.stages[-1].channels, config.num_classes, dtype))

    expected = param_shapes(config)
    assert list(expected) == list(params) and all(
        expected[k] == params[k].shape for k in params), "parameter layout drifted from param_shapes"
    return Model(config, params)


def forward(model: Model, images, capture_attention: bool = False):
    """Run the network; returns ``(logits, records)``."""
    cfg = model.config
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=model.dtype))
    elif images.dtype != model.dtype:
        images = Tensor(images.data.astype(model.dtype))
    want = (cfg.in_chans, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != want:
        raise DimensionError(f"images must be [B, {want[0]}, {want[1]}, {want[2]}], got {images.shape}")
    params = model.params
    x = L.patch_embed(images, L.sub_params(params, "embed."), cfg.stride)
    records = []
    for i, st in enumerate(cfg.stages):
        for j in range(st.num_blocks):
            x, attn = L.transformer_block(x, L.sub_params(params, f"stage{i}.block{j}."),
                                          st.num_heads, capture_attention)
            if capture_attention:
                records.append(L.AttentionRecord(i, j, attn, x.n_cls, x.height, x.width))
        if i < len(cfg.stages) - 1:
            x = L.token_pooling(x, L.sub_params(params, f"pool{i}."))
    return L.classifier_head(x, L.sub_params(params, "head.")), records


def with_classes(config: ArchConfig, num_classes: int) -> ArchConfig:
    return replace(config, num_classes=num_classes)
