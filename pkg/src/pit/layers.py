"""Transformer building blocks and the token pooling layer.

Layer functions take a flat ``params`` mapping with short names (``"attn.wq"``,
``"ln1.g"``, ...). Model code hands each layer a prefix-stripped view of the
full parameter dictionary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass
class TokenBatch:
    """Tokens ``[B, n_cls + H*W, C]``; class tokens first, then row-major spatial tokens."""

    tokens: Tensor
    n_cls: int
    height: int
    width: int

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != self.n_cls + self.height * self.width:
            raise ConfigError(f"token tensor {self.tokens.shape} does not hold "
                              f"{self.n_cls} + {self.height}x{self.width} tokens")

    @property
    def channels(self) -> int:
        return self.tokens.shape[2]

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    def with_tokens(self, tokens: Tensor) -> "TokenBatch":
        return TokenBatch(tokens, self.n_cls, self.height, self.width)


@dataclass
class AttentionRecord:
    """Post-softmax attention ``[B, heads, T, T]`` captured at one block."""

    stage_index: int
    block_index: int
    attn: np.ndarray
    n_cls: int
    height: int
    width: int

    @property
    def tokens(self) -> int:
        return self.attn.shape[-1]

    @property
    def heads(self) -> int:
        return self.attn.shape[1]


# ---------------------------------------------------------------------------
# Initialization


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=T.DEFAULT_DTYPE):
    """Normal(0, std) truncated to two standard deviations by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def init_embed(rng, in_chans: int, channels: int, patch: int, num_tokens: int, dtype) -> dict:
    return {
        "kernel": _param(trunc_normal(rng, (channels, in_chans, patch, patch), dtype=dtype)),
        "bias": _param(np.zeros(channels, dtype)),
        "pos": _param(trunc_normal(rng, (num_tokens, channels), dtype=dtype)),
        "cls": _param(trunc_normal(rng, (1, channels), dtype=dtype)),
    }


def init_block(rng, channels: int, mlp_ratio: int, dtype) -> dict:
    c, hidden = channels, channels * mlp_ratio
    p = {}
    for name in ("q", "k", "v", "o"):
        p[f"attn.w{name}"] = _param(trunc_normal(rng, (c, c), dtype=dtype))
        p[f"attn.b{name}"] = _param(np.zeros(c, dtype))
    p["mlp.w1"] = _param(trunc_normal(rng, (c, hidden), dtype=dtype))
    p["mlp.b1"] = _param(np.zeros(hidden, dtype))
    p["mlp.w2"] = _param(trunc_normal(rng, (hidden, c), dtype=dtype))
    p["mlp.b2"] = _param(np.zeros(c, dtype))
    for ln in ("ln1", "ln2"):
        p[f"{ln}.g"] = _param(np.ones(c, dtype))
        p[f"{ln}.b"] = _param(np.zeros(c, dtype))
    return p


def init_pool(rng, channels: int, dtype) -> dict:
    return {
        "dw_kernel": _param(trunc_normal(rng, (2 * channels, 1, 3, 3), dtype=dtype)),
        "dw_bias": _param(np.zeros(2 * channels, dtype)),
        "cls_w": _param(trunc_normal(rng, (channels, 2 * channels), dtype=dtype)),
        "cls_b": _param(np.zeros(2 * channels, dtype)),
    }


def init_head(rng, channels: int, num_classes: int, dtype) -> dict:
    return {
        "ln_g": _param(np.ones(channels, dtype)),
        "ln_b": _param(np.zeros(channels, dtype)),
        "w": _param(trunc_normal(rng, (channels, num_classes), dtype=dtype)),
        "b": _param(np.zeros(num_classes, dtype)),
    }


# ---------------------------------------------------------------------------
# Layers


def patch_embed(images: Tensor, params: Mapping[str, Tensor], stride: int) -> TokenBatch:
    """Strided patch convolution, class token prepend and positional embedding."""
    kernel = params["kernel"]
    patch = kernel.shape[-1]
    if images.ndim != 4 or images.shape[2] < patch or images.shape[3] < patch:
        raise ConfigError(f"image {images.shape[2:]} smaller than patch {patch}")
    feat = T.conv2d(images, kernel, params["bias"], stride=stride)
    b, c, h, w = feat.shape
    spatial = T.transpose(T.reshape(feat, (b, c, h * w)), (0, 2, 1))
    cls = T.expand(T.reshape(params["cls"], (1, 1, c)), (b, 1, c))
    tokens = T.concat([cls, spatial], axis=1)
    pos = params["pos"]
    if pos.shape != (1 + h * w, c):
        raise ConfigError(f"positional table {pos.shape} does not match {1 + h * w} tokens of width {c}")
    return TokenBatch(T.add(tokens, pos), 1, h, w)


def multi_head_self_attention(x: TokenBatch, params: Mapping[str, Tensor], num_heads: int,
                              capture: bool = False):
    """Scaled dot-product self-attention over all tokens.

    Returns ``(TokenBatch, attn)`` where ``attn`` is the detached post-softmax
    array when ``capture`` is set, else ``None``.
    """
    b, t, c = x.tokens.shape
    if c % num_heads:
        raise ConfigError(f"channels {c} not divisible by {num_heads} heads")
    d = c // num_heads

    def heads(w, bias):
        y = T.linear(x.tokens, params[w], params[bias])
        return T.transpose(T.reshape(y, (b, t, num_heads, d)), (0, 2, 1, 3))

    q, k, v = heads("attn.wq", "attn.bq"), heads("attn.wk", "attn.bk"), heads("attn.wv", "attn.bv")
    # scaling q is cheaper than scaling the T x T scores
    scores = T.matmul(T.scale(q, 1.0 / math.sqrt(d)), T.swap_last(k))
    attn = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, t, c))
    out = T.linear(ctx, params["attn.wo"], params["attn.bo"])
    captured = attn.data.copy() if capture else None
    return x.with_tokens(out), captured


def mlp(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    h = T.gelu(T.linear(x, params["mlp.w1"], params["mlp.b1"]))
    return T.linear(h, params["mlp.w2"], params["mlp.b2"])


def transformer_block(x: TokenBatch, params: Mapping[str, Tensor], num_heads: int,
                      capture: bool = False):
    """Pre-norm block: ``x + MSA(LN(x))`` followed by ``+ MLP(LN(.))``."""
    normed = x.with_tokens(T.layer_norm(x.tokens, params["ln1.g"], params["ln1.b"], LN_EPS))
    att, captured = multi_head_self_attention(normed, params, num_heads, capture)
    h = T.add(x.tokens, att.tokens)
    h = T.add(h, mlp(T.layer_norm(h, params["ln2.g"], params["ln2.b"], LN_EPS), params))
    return x.with_tokens(h), captured


def token_pooling(x: TokenBatch, params: Mapping[str, Tensor]) -> TokenBatch:
    """Halve the spatial grid and double the channels.

    Spatial tokens go through a 3x3 stride-2 depth-wise convolution with
    channel multiplier 2; class tokens through an affine map C -> 2C.
    """
    if x.height < 2 or x.width < 2:
        raise ConfigError(f"token pooling needs a grid of at least 2x2, got {x.height}x{x.width}")
    b, _, c = x.tokens.shape
    n, h, w = x.n_cls, x.height, x.width
    if params["dw_kernel"].shape != (2 * c, 1, 3, 3):
        raise ConfigError(f"pooling kernel {params['dw_kernel'].shape} does not match channels {c}")
    spatial = T.slice_axis(x.tokens, 1, n, n + h * w)
    grid = T.transpose(T.reshape(spatial, (b, h, w, c)), (0, 3, 1, 2))
    pooled = T.depthwise_conv2d(grid, params["dw_kernel"], params["dw_bias"], stride=2, padding=1)
    _, c2, h2, w2 = pooled.shape
    spatial_out = T.transpose(T.reshape(pooled, (b, c2, h2 * w2)), (0, 2, 1))
    parts = [spatial_out]
    if n:
        cls = T.linear(T.slice_axis(x.tokens, 1, 0, n), params["cls_w"], params["cls_b"])
        parts.insert(0, cls)
    tokens = T.concat(parts, axis=1) if len(parts) > 1 else spatial_out
    return TokenBatch(tokens, n, h2, w2)


def classifier_head(x: TokenBatch, params: Mapping[str, Tensor]) -> Tensor:
    if x.n_cls < 1:
        raise ConfigError("classifier head needs a class token (n_cls >= 1)")
    cls = T.reshape(T.slice_axis(x.tokens, 1, 0, 1), (x.batch, x.channels))
    return T.linear(T.layer_norm(cls, params["ln_g"], params["ln_b"], LN_EPS), params["w"], params["b"])


def pooled_size(n: int) -> int:
    return T.conv_out_size(n, 3, 2, 1)


def sub_params(params: Mapping[str, Tensor], prefix: str) -> dict:
    """View of ``params`` restricted to ``prefix`` with the prefix stripped."""
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
