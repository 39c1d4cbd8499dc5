"""Instance-level routers producing logits over the routed-encoder pool.

Every router accepts either a single instance (``shared`` of shape
``(N_S, D_S)``) or a batch (``(B, N_S, D_S)``) and returns logits of shape
``(K,)`` or ``(B, K)``.  None of them use positional information, so the
logits are invariant to permuting token rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from moenc import autodiff as ad
from moenc.autodiff import Tensor
from moenc.errors import ConfigurationError

VARIANTS = ("cross_attention", "self_attention", "mlp")
VARIANT_ALIASES = {"ca": "cross_attention", "sa": "self_attention", "mlp": "mlp"}


@dataclass(frozen=True)
class RouterConfig:
    K: int = 4
    d_router: int = 256
    variant: str = "cross_attention"
    num_heads: int = 4
    d_shared: int = 32
    d_text: int = 32

    def __post_init__(self):
        if self.K < 2:
            raise ConfigurationError(f"router needs K >= 2 routed encoders, got {self.K}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown router variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_heads < 1 or self.d_router % self.num_heads:
            raise ConfigurationError(
                f"d_router={self.d_router} must be divisible by num_heads={self.num_heads}"
            )


@dataclass
class RouterInput:
    shared_features: np.ndarray | Tensor
    text_embedding: np.ndarray | Tensor | None = None


def _dense(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


def init_router_params(cfg: RouterConfig, rng: np.random.Generator, zero_output: bool = True) -> dict[str, Tensor]:
    """Fresh router weights; the output layer starts at zero so routing starts uniform."""
    d = cfg.d_router
    shapes: dict[str, np.ndarray] = {}
    if cfg.variant == "mlp":
        shapes["router.hidden.weight"] = _dense(cfg.d_shared, d, rng)
        shapes["router.hidden.bias"] = np.zeros(d)
    else:
        q_in = cfg.d_text if cfg.variant == "cross_attention" else cfg.d_shared
        shapes["router.query.weight"] = _dense(q_in, d, rng)
        shapes["router.query.bias"] = np.zeros(d)
        shapes["router.key.weight"] = _dense(cfg.d_shared, d, rng)
        shapes["router.key.bias"] = np.zeros(d)
        shapes["router.value.weight"] = _dense(cfg.d_shared, d, rng)
        shapes["router.value.bias"] = np.zeros(d)
    out = np.zeros((d, cfg.K)) if zero_output else _dense(d, cfg.K, rng)
    shapes["router.out.weight"] = out
    shapes["router.out.bias"] = np.zeros(cfg.K)
    return {name: Tensor(value, requires_grad=True, name=name) for name, value in shapes.items()}


def _linear(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return ad.add(ad.matmul(x, params[prefix + ".weight"]), params[prefix + ".bias"])


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Scaled dot-product attention over the last two axes, heads split on features."""
    d = q.shape[-1]
    dh = d // num_heads
    heads = []
    for h in range(num_heads):
        cols = (Ellipsis, slice(h * dh, (h + 1) * dh))
        scores = ad.scale(ad.matmul(q[cols], ad.transpose(k[cols])), 1.0 / math.sqrt(dh))
        heads.append(ad.matmul(ad.softmax(scores, axis=-1), v[cols]))
    return heads[0] if num_heads == 1 else ad.concat(heads, axis=-1)


def _readout(tokens: Tensor, params: dict[str, Tensor]) -> Tensor:
    pooled = ad.mean(tokens, axis=-2, keepdims=True)
    z = _linear(pooled, params, "router.out")
    return ad.reshape(z, z.shape[:-2] + z.shape[-1:])


def route_cross_attention(inp: RouterInput, params: dict[str, Tensor], num_heads: int = 4) -> Tensor:
    if inp.text_embedding is None:
        raise ConfigurationError("cross-attention router needs a text embedding")
    text = ad.as_tensor(inp.text_embedding)
    shared = ad.as_tensor(inp.shared_features)
    q = _linear(text, params, "router.query")
    k = _linear(shared, params, "router.key")
    v = _linear(shared, params, "router.value")
    return _readout(multi_head_attention(q, k, v, num_heads), params)


def route_self_attention(inp: RouterInput, params: dict[str, Tensor], num_heads: int = 4) -> Tensor:
    shared = ad.as_tensor(inp.shared_features)
    q = _linear(shared, params, "router.query")
    k = _linear(shared, params, "router.key")
    v = _linear(shared, params, "router.value")
    return _readout(multi_head_attention(q, k, v, num_heads), params)


def route_mlp(inp: RouterInput, params: dict[str, Tensor], num_heads: int = 4) -> Tensor:
    shared = ad.as_tensor(inp.shared_features)
    pooled = ad.mean(shared, axis=-2, keepdims=True)
    hidden = ad.tanh(_linear(pooled, params, "router.hidden"))
    z = _linear(hidden, params, "router.out")
    return ad.reshape(z, z.shape[:-2] + z.shape[-1:])


_ROUTE_FNS = {
    "cross_attention": route_cross_attention,
    "self_attention": route_self_attention,
    "mlp": route_mlp,
}


class Router:
    def __init__(self, cfg: RouterConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: RouterConfig, rng: np.random.Generator) -> Router:
        return cls(cfg, init_router_params(cfg, rng))

    def __call__(self, shared, text=None) -> Tensor:
        return _ROUTE_FNS[self.cfg.variant](RouterInput(shared, text), self.params, self.cfg.num_heads)


def instance_distribution(z: Tensor) -> Tensor:
    return ad.softmax(z, axis=-1)
