"""Central-difference gradient verification and the built-in check suites."""

from __future__ import annotations

from typing import Callable, Iterable, NamedTuple

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ContractError
from .tensor import Tape, Tensor

TOLERANCE = 1e-4
# Softmax is invariant to the key bias, so its gradient is identically zero and
# only an absolute bound is meaningful.
ZERO_GRAD_SUFFIXES = ("attn.bk",)
ZERO_GRAD_TOLERANCE = 1e-8


class Check(NamedTuple):
    error: float
    limit: float
    kind: str  # "rel" or "abs"

    @property
    def ok(self) -> bool:
        return self.error < self.limit


def gradient_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape and central-difference gradients of ``fn`` w.r.t. ``x``.

    ``fn`` receives ``x`` and must return a scalar tensor. Relative error per
    element is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    a, n = gradients(fn, x, eps)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradients(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5):
    """Flat ``(tape, central-difference)`` gradient arrays; ``x`` is perturbed in place."""
    if x.dtype != np.float64:
        raise ContractError(f"gradient_check needs float64 tensors, got {x.dtype}")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            loss = fn(x)
        if loss.dtype != np.float64:
            raise ContractError(f"gradient_check needs a float64 loss, got {loss.dtype}")
        if loss.node_id is None:
            analytic = np.zeros_like(x.data)
        else:
            tape.backward(loss)
            analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(x).item()
            flat[i] = orig - eps
            fm = fn(x).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
    finally:
        x.requires_grad = was
        x.grad = None
    return analytic.reshape(-1).copy(), numeric


def check_all(fn: Callable[[], Tensor], tensors: dict, eps: float = 1e-5) -> dict:
    """Gradient checks for every named tensor; ``fn`` takes no arguments."""
    out = {}
    for name, t in tensors.items():
        if name.endswith(ZERO_GRAD_SUFFIXES):
            a, n = gradients(lambda _x: fn(), t, eps)
            out[name] = Check(float(max(np.abs(a).max(), np.abs(n).max())), ZERO_GRAD_TOLERANCE, "abs")
        else:
            out[name] = Check(gradient_check(lambda _x: fn(), t, eps), TOLERANCE, "rel")
    return out


def _single(fn, x) -> Check:
    return Check(gradient_check(fn, x), TOLERANCE, "rel")


def _weighted(out: Tensor, rng) -> Tensor:
    # random projection keeps every gradient entry generically nonzero
    w = Tensor(rng.standard_normal(out.shape))
    return T.sum_(T.mul(out, w))


def _rand(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale)


def _params64(group: dict, rng, jitter: float = 0.3) -> dict:
    """Fresh float64 parameters shaped like ``group``.

    Matrices get fan-in scaled normals so attention logits are O(1); vectors
    are the layer's init plus ``jitter`` noise so biases and gains matter.
    """
    out = {}
    for k, p in group.items():
        if p.ndim >= 2:
            fan_in = int(np.prod(p.shape[1:])) if p.ndim == 4 else p.shape[0]
            arr = rng.standard_normal(p.shape) / np.sqrt(fan_in)
        else:
            arr = p.data.astype(np.float64) + jitter * rng.standard_normal(p.shape)
        out[k] = Tensor(arr, requires_grad=True)
    return out


# ---------------------------------------------------------------------------
# Suites: each case returns {item: Check}


def ops_cases(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    res = {}

    a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
    f = lambda: _weighted(T.matmul(a, b), np.random.default_rng(1))
    res.update({f"matmul.{k}": v for k, v in check_all(f, {"a": a, "b": b}).items()})

    x = _rand(rng, 3, 7, scale=2.0)
    res["softmax"] = _single(lambda t: _weighted(T.softmax(t, -1), np.random.default_rng(2)), x)

    x, k, bias = _rand(rng, 2, 2, 5, 5), _rand(rng, 4, 1, 3, 3), _rand(rng, 4)
    f = lambda: _weighted(T.depthwise_conv2d(x, k, bias, stride=2, padding=1), np.random.default_rng(3))
    res.update({f"depthwise_conv2d.{n}": v for n, v in check_all(f, {"x": x, "kernel": k, "bias": bias}).items()})

    x, k, bias = _rand(rng, 2, 3, 8, 8), _rand(rng, 4, 3, 4, 4), _rand(rng, 4)
    f = lambda: _weighted(T.conv2d(x, k, bias, stride=2), np.random.default_rng(4))
    res.update({f"conv2d.{n}": v for n, v in check_all(f, {"x": x, "kernel": k, "bias": bias}).items()})

    x, g, bb = _rand(rng, 3, 4, 6), _rand(rng, 6), _rand(rng, 6)
    f = lambda: _weighted(T.layer_norm(x, g, bb), np.random.default_rng(5))
    res.update({f"layer_norm.{n}": v for n, v in check_all(f, {"x": x, "gamma": g, "beta": bb}).items()})

    a, b = _rand(rng, 2, 3, 4), _rand(rng, 4)
    f = lambda: _weighted(T.add(a, b), np.random.default_rng(6))
    res.update({f"add.{n}": v for n, v in check_all(f, {"a": a, "b": b}).items()})
    f = lambda: _weighted(T.mul(a, b), np.random.default_rng(7))
    res.update({f"mul.{n}": v for n, v in check_all(f, {"a": a, "b": b}).items()})

    x = _rand(rng, 4, 5, scale=2.0)
    res["gelu"] = _single(lambda t: _weighted(T.gelu(t), np.random.default_rng(8)), x)
    res["scale"] = _single(lambda t: _weighted(T.scale(t, -1.7), np.random.default_rng(9)), x)
    res["reshape"] = _single(lambda t: _weighted(T.reshape(t, (2, 10)), np.random.default_rng(10)), x)
    res["transpose"] = _single(lambda t: _weighted(T.transpose(t, (1, 0)), np.random.default_rng(11)), x)
    res["slice"] = _single(lambda t: _weighted(T.slice_axis(t, 1, 1, 4), np.random.default_rng(12)), x)
    res["mean"] = _single(lambda t: _weighted(T.mean(t, axis=0), np.random.default_rng(13)), x)
    res["sum"] = _single(lambda t: _weighted(T.sum_(t, axis=1, keepdims=True), np.random.default_rng(14)), x)
    y = _rand(rng, 1, 1, 5)
    res["expand"] = _single(lambda t: _weighted(T.expand(t, (3, 2, 5)), np.random.default_rng(15)), y)

    a, b = _rand(rng, 2, 1, 3), _rand(rng, 2, 4, 3)
    f = lambda: _weighted(T.concat([a, b], axis=1), np.random.default_rng(16))
    res.update({f"concat.{n}": v for n, v in check_all(f, {"a": a, "b": b}).items()})

    logits = _rand(rng, 5, 4, scale=2.0)
    labels = rng.integers(0, 4, size=5)
    res["cross_entropy"] = _single(lambda t: T.cross_entropy(t, labels), logits)
    return res


def _tokens(rng, b, n_cls, h, w, c) -> L.TokenBatch:
    return L.TokenBatch(_rand(rng, b, n_cls + h * w, c), n_cls, h, w)


def block_cases(seed: int) -> dict:
    """Transformer block on 8 tokens (class token + 1x7 grid), C=16, 2 heads."""
    rng = np.random.default_rng(seed)
    x = _tokens(rng, 2, 1, 1, 7, 16)
    p = _params64(L.init_block(rng, 16, 4, np.float64), rng)
    f = lambda: _weighted(L.transformer_block(x, p, 2)[0].tokens, np.random.default_rng(20))
    return {f"block.{k}": v for k, v in check_all(f, {"x": x.tokens, **p}).items()}


def pool_cases(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    x = _tokens(rng, 2, 1, 5, 5, 3)
    p = _params64(L.init_pool(rng, 3, np.float64), rng, jitter=3.0)
    f = lambda: _weighted(L.token_pooling(x, p).tokens, np.random.default_rng(21))
    return {f"pool.{k}": v for k, v in check_all(f, {"x": x.tokens, **p}).items()}


def layer_cases(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    res = {}
    x = _tokens(rng, 2, 1, 2, 2, 8)
    p = _params64(L.init_block(rng, 8, 4, np.float64), rng)
    f = lambda: _weighted(L.multi_head_self_attention(x, p, 2)[0].tokens, np.random.default_rng(22))
    attn_keys = {k: v for k, v in p.items() if k.startswith("attn.")}
    res.update({f"msa.{k}": v for k, v in check_all(f, {"x": x.tokens, **attn_keys}).items()})

    img = _rand(rng, 2, 3, 8, 8)
    p = _params64(L.init_embed(rng, 3, 4, 4, 1 + 3 * 3, np.float64), rng)
    f = lambda: _weighted(L.patch_embed(img, p, 2).tokens, np.random.default_rng(23))
    res.update({f"patch_embed.{k}": v for k, v in check_all(f, {"images": img, **p}).items()})

    x = _tokens(rng, 3, 1, 2, 2, 6)
    p = _params64(L.init_head(rng, 6, 5, np.float64), rng, jitter=3.0)
    f = lambda: _weighted(L.classifier_head(x, p), np.random.default_rng(24))
    res.update({f"head.{k}": v for k, v in check_all(f, {"x": x.tokens, **p}).items()})

    logits = _rand(rng, 4, 6)
    labels = rng.integers(0, 6, size=4)
    res["cross_entropy"] = _single(lambda t: T.cross_entropy(t, labels), logits)
    return res


SUITES = {"ops": ops_cases, "layers": layer_cases, "block": block_cases, "pool": pool_cases}


def run_suite(scope: str, seeds: Iterable[int] = (0,)) -> dict:
    """Worst :class:`Check` per item across ``seeds``."""
    worst: dict = {}
    for s in seeds:
        for k, v in SUITES[scope](s).items():
            if k not in worst or v.error > worst[k].error:
                worst[k] = v
    return worst
