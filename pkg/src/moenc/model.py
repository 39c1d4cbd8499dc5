"""Shared encoder + router + straight-through routed stream + surrogate head."""
from __future__ import annotations

import numpy as np

from moenc import autodiff as ad
from moenc.autodiff import Tensor
from moenc.fusion import forward_inference, forward_train, init_connector_params
from moenc.router import Router, RouterConfig, init_router_params
from moenc.workload import Batch, SyntheticInstance, SyntheticWorkload, head_logits, init_head_params


class MixtureOfEncoders:
    def __init__(self, workload: SyntheticWorkload, router_cfg: RouterConfig,
                 params: dict[str, Tensor], weighting: str = "softmax"):
        self.workload = workload
        self.router_cfg = router_cfg
        self.params = params
        self.weighting = weighting
        self.router = Router(router_cfg, params)

    @classmethod
    def init(cls, workload: SyntheticWorkload, router_cfg: RouterConfig, seed: int,
             weighting: str = "softmax", zero_init_router: bool = True) -> MixtureOfEncoders:
        c = workload.cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1417]))
        params = init_router_params(router_cfg, rng, zero_output=zero_init_router)
        params.update(init_connector_params(c.K, c.d_routed, c.d_shared, rng))
        params.update(init_head_params(c.d_shared, c.C, rng))
        return cls(workload, router_cfg, params, weighting)

    @property
    def uses_text(self) -> bool:
        return self.router_cfg.variant == "cross_attention"

    def train_forward(self, batch: Batch) -> tuple[Tensor, Tensor, np.ndarray]:
        """Class logits ``(B, C)``, routing logits ``Z`` as ``(K, B)``, and selections."""
        wl = self.workload
        shared = wl.shared_encoder(batch.images)
        fused, z = forward_train(
            shared, batch.prompts if self.uses_text else None, batch.images,
            self.router, wl.routed_encoders, self.params, self.weighting,
        )
        return head_logits(fused.values, self.params), ad.transpose(z), fused.selected_index

    def infer(self, instance: SyntheticInstance) -> tuple[np.ndarray, int, np.ndarray]:
        """Inference-mode pass: class logits, selected expert, routing logits."""
        wl = self.workload
        shared = wl.shared_encoder(instance.image_features)
        fused, z = forward_inference(
            shared, instance.prompt_embedding if self.uses_text else None, instance.image_features,
            self.router, wl.routed_encoders, self.params, self.weighting,
        )
        logits = head_logits(fused.values, self.params)
        return logits.data[0], int(fused.selected_index), z.data

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        out.update(self.workload.encoder_arrays())
        return out

    def clone_params(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy trainable parameters and frozen encoder projections from ``arrays`` (shapes pre-checked)."""
        for name, t in self.params.items():
            t.data = np.array(arrays[name], dtype=np.float64)
        wl = self.workload
        wl.shared_encoder.projection = np.array(arrays["encoder.shared.projection"])
        for i, enc in enumerate(wl.routed_encoders):
            enc.projection = np.array(arrays[f"encoder.routed.{i}.projection"])
