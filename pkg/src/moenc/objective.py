"""Dual-entropy / dual-auxiliary routing objective.

All losses take the logit matrix ``Z`` with shape ``(K, B)``: row ``i`` holds
encoder ``i``'s logits over the batch, column ``j`` holds instance ``j``'s
logits over encoders.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from moenc import autodiff as ad
from moenc.autodiff import Tensor
from moenc.errors import ContractError, DimensionError


@dataclass(frozen=True)
class LossWeights:
    ba: float = 0.2
    be: float = 0.2
    ie: float = 0.6
    ia: float = 0.6

    def __post_init__(self):
        for key, value in asdict(self).items():
            if not value >= 0:
                raise ContractError(f"loss weight {key} must be nonnegative, got {value}")

    @classmethod
    def zeros(cls) -> LossWeights:
        return cls(0.0, 0.0, 0.0, 0.0)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


DEFAULT_WEIGHTS = LossWeights()


@dataclass
class LossBreakdown:
    l_lm: Tensor
    l_ba: Tensor
    l_be: Tensor
    l_ie: Tensor
    l_ia: Tensor
    total: Tensor

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("l_lm", "l_ba", "l_be", "l_ie", "l_ia", "total")}


def _check_logits(Z: Tensor) -> tuple[int, int]:
    if Z.ndim != 2:
        raise DimensionError(f"logit matrix must be K x B, got shape {Z.shape}")
    K, B = Z.shape
    if K < 2 or B < 1:
        raise ContractError(f"logit matrix needs K >= 2 and B >= 1, got {K} x {B}")
    return K, B


def entropy(p: Tensor, axis: int) -> Tensor:
    """-sum p log p along ``axis`` with 0 log 0 = 0."""
    return ad.scale(ad.sum(ad.mul(p, ad.log(p)), axis=axis), -1.0)


def batch_probabilities(Z: Tensor) -> Tensor:
    return ad.softmax(Z, axis=1)


def instance_probabilities(Z: Tensor) -> Tensor:
    return ad.softmax(Z, axis=0)


def batch_entropy_loss(Z: Tensor) -> Tensor:
    K, B = _check_logits(Z)
    if B < 2:
        raise ContractError(
            "batch entropy is undefined for B = 1; tile the instance into a pseudo-batch "
            "(workload.tile_pseudo_batch) so the batch axis has at least 2 entries"
        )
    h = ad.mean(entropy(batch_probabilities(Z), axis=1))
    return ad.scale(h, -1.0 / math.log(B))


def batch_aux_loss(Z: Tensor) -> Tensor:
    _check_logits(Z)
    top, _ = ad.max_with_index(batch_probabilities(Z), axis=1)
    return ad.sum(top)


def instance_entropy_loss(Z: Tensor) -> Tensor:
    K, _ = _check_logits(Z)
    h = ad.mean(entropy(instance_probabilities(Z), axis=0))
    return ad.scale(h, 1.0 / math.log(K))


def instance_aux_loss(Z: Tensor) -> Tensor:
    _check_logits(Z)
    top, _ = ad.max_with_index(instance_probabilities(Z), axis=0)
    return ad.scale(ad.sum(top), -1.0)


def total_loss(l_lm, Z: Tensor, w: LossWeights = DEFAULT_WEIGHTS) -> LossBreakdown:
    """Task loss plus the four weighted routing terms.

    With ``B == 1`` the batch-entropy term is only allowed when its weight is
    zero (it is then reported as 0).
    """
    l_lm = ad.as_tensor(l_lm)
    _, B = _check_logits(Z)
    l_ba = batch_aux_loss(Z)
    l_be = batch_entropy_loss(Z) if (B >= 2 or w.be > 0) else Tensor(0.0)
    l_ie = instance_entropy_loss(Z)
    l_ia = instance_aux_loss(Z)
    total = l_lm
    for weight, term in ((w.ba, l_ba), (w.be, l_be), (w.ie, l_ie), (w.ia, l_ia)):
        total = ad.add(total, ad.scale(term, weight))
    return LossBreakdown(l_lm, l_ba, l_be, l_ie, l_ia, total)
