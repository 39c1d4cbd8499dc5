"""Top-1 encoder selection with a straight-through mixture, per-expert connectors, concat fusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from moenc import autodiff as ad
from moenc.autodiff import Tensor
from moenc.errors import ConfigurationError, ContractError, DimensionError


def select_top1(q) -> int | np.ndarray:
    """Argmax over the last axis, lowest index on ties.  Batched input gives an index array."""
    data = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64)
    if data.size == 0 or data.shape[-1] == 0:
        raise ContractError("cannot select from an empty score vector")
    idx = np.argmax(data, axis=-1)
    return int(idx) if data.ndim == 1 else idx


def soft_mixture(weights: Tensor, outputs: Sequence[Tensor]) -> Tensor:
    """sum_i w_i V_i; ``weights`` is ``(K,)`` or ``(B, K)``."""
    mixed = None
    for i, v in enumerate(outputs):
        w_i = weights[..., i]
        w_i = ad.reshape(w_i, w_i.shape + (1,) * (v.ndim - w_i.ndim))
        term = ad.mul(w_i, v)
        mixed = term if mixed is None else ad.add(mixed, term)
    return mixed


def ste_mix(weights: Tensor, outputs: Sequence[Tensor], k) -> Tensor:
    """Hard value ``w_k V_k`` forward, soft-mixture gradient backward."""
    outputs = [ad.as_tensor(v) for v in outputs]
    if len(outputs) != weights.shape[-1]:
        raise ConfigurationError(f"{len(outputs)} expert outputs for {weights.shape[-1]} weights")
    shapes = {v.shape for v in outputs}
    if len(shapes) != 1:
        raise ConfigurationError(
            f"expert outputs disagree in shape {sorted(shapes)}; the straight-through mixture "
            "needs a common N_r x D_r, add per-expert shape adapters before mixing"
        )
    k = np.asarray(k)
    w = weights.data
    if w.ndim == 1:
        hard = w[int(k)] * outputs[int(k)].data
    else:
        rows = np.arange(w.shape[0])
        stacked = np.stack([v.data for v in outputs])
        hard = w[rows, k].reshape((-1,) + (1,) * (stacked.ndim - 2)) * stacked[k, rows]
    return ad.straight_through(Tensor(hard), soft_mixture(weights, outputs))


@dataclass
class Connector:
    weight: Tensor
    bias: Tensor

    @property
    def out_dim(self) -> int:
        return self.weight.shape[-1]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


def init_connector_params(K: int, d_routed: int, d_shared: int, rng: np.random.Generator) -> dict[str, Tensor]:
    w = rng.normal(0.0, 1.0 / np.sqrt(d_routed), size=(K, d_routed, d_shared))
    return {
        "connector.weight": Tensor(w, requires_grad=True, name="connector.weight"),
        "connector.bias": Tensor(np.zeros((K, d_shared)), requires_grad=True, name="connector.bias"),
    }


def connector(params: dict[str, Tensor], i: int) -> Connector:
    return Connector(params["connector.weight"][i], params["connector.bias"][i])


def apply_selected_connectors(params: dict[str, Tensor], x: Tensor, k: np.ndarray) -> Tensor:
    """Per-instance connector ``C_{k_b}`` applied to ``x[b]`` for a batch ``(B, N_r, D_r)``."""
    weight = params["connector.weight"][k]
    bias = params["connector.bias"][k]
    return ad.add(ad.matmul(x, weight), ad.reshape(bias, (bias.shape[0], 1, bias.shape[1])))


@dataclass
class FusedRepresentation:
    values: Tensor
    selected_index: int | np.ndarray


def fuse(V_s, routed: Tensor, connector_k: Connector, k=None) -> FusedRepresentation:
    V_s = ad.as_tensor(V_s)
    aligned = connector_k(routed)
    if aligned.shape[-1] != V_s.shape[-1]:
        raise DimensionError(
            f"connector output dim {aligned.shape[-1]} != shared feature dim {V_s.shape[-1]}"
        )
    return FusedRepresentation(ad.concat([V_s, aligned], axis=-2), k)


def fuse_batch(V_s, routed: Tensor, params: dict[str, Tensor], k: np.ndarray) -> FusedRepresentation:
    V_s = ad.as_tensor(V_s)
    aligned = apply_selected_connectors(params, routed, k)
    if aligned.shape[-1] != V_s.shape[-1]:
        raise DimensionError(
            f"connector output dim {aligned.shape[-1]} != shared feature dim {V_s.shape[-1]}"
        )
    return FusedRepresentation(ad.concat([V_s, aligned], axis=-2), k)


def routing_weights(z: Tensor, weighting: str = "softmax") -> Tensor:
    if weighting == "softmax":
        return ad.softmax(z, axis=-1)
    if weighting == "logits":
        return z
    raise ConfigurationError(f"unknown weighting {weighting!r}; expected 'softmax' or 'logits'")


def forward_train(
    shared: np.ndarray,
    text: np.ndarray | None,
    image: np.ndarray,
    router: Callable,
    routed_encoders: Sequence[Callable],
    connector_params: dict[str, Tensor],
    weighting: str = "softmax",
) -> tuple[FusedRepresentation, Tensor]:
    """Batched training forward: every expert runs, the mixture is straight-through.

    Returns the fused representation and the ``(B, K)`` logits.
    """
    z = router(shared, text)
    w = routing_weights(z, weighting)
    k = select_top1(z)
    outputs = [Tensor(enc(image)) for enc in routed_encoders]
    mixed = ste_mix(w, outputs, k)
    return fuse_batch(shared, mixed, connector_params, k), z


def forward_inference(
    shared: np.ndarray,
    text: np.ndarray | None,
    image: np.ndarray,
    router: Callable,
    routed_encoders: Sequence[Callable],
    connector_params: dict[str, Tensor],
    weighting: str = "softmax",
) -> tuple[FusedRepresentation, Tensor]:
    """Single-instance inference: only the selected routed encoder is evaluated."""
    z = router(shared, text)
    k = select_top1(z)
    w = routing_weights(z, weighting)
    routed = ad.mul(w[k], Tensor(routed_encoders[k](image)))
    return fuse(shared, routed, connector(connector_params, k), k), z
