"""Synthetic routing workload with planted expert specialisations.

Image feature columns are cut into ``K`` label blocks plus one family block.
For an instance planted on expert ``e`` the block ``e`` carries the class
prototype of the true label; every other label block carries the prototype of
an independently drawn decoy label.  Routed encoder ``i`` reads only block
``i``, so it is label-informative exactly for its own family and at chance
elsewhere.  The shared encoder reads only the family block (label free), and
the prompt is a bag of family words mixed with filler words.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from moenc import autodiff as ad
from moenc.autodiff import Tensor
from moenc.errors import ContractError


@dataclass
class SyntheticInstance:
    image_features: np.ndarray
    prompt_embedding: np.ndarray
    label: int
    planted_expert: int

    def to_record(self) -> dict:
        return {
            "label": self.label,
            "planted_expert": self.planted_expert,
            "image_features": self.image_features.tolist(),
            "prompt_embedding": self.prompt_embedding.tolist(),
        }


@dataclass
class Batch:
    images: np.ndarray
    prompts: np.ndarray
    labels: np.ndarray
    planted: np.ndarray

    def __len__(self):
        return len(self.labels)


def stack_instances(instances: list[SyntheticInstance]) -> Batch:
    return Batch(
        images=np.stack([x.image_features for x in instances]),
        prompts=np.stack([x.prompt_embedding for x in instances]),
        labels=np.array([x.label for x in instances], dtype=np.int64),
        planted=np.array([x.planted_expert for x in instances], dtype=np.int64),
    )


def pool_rows(x: np.ndarray, n_tokens: int) -> np.ndarray:
    """Average contiguous row groups of ``x[..., R, D]`` down to ``min(n_tokens, R)`` tokens."""
    rows = x.shape[-2]
    n = min(n_tokens, rows)
    groups = np.array_split(np.arange(rows), n)
    return np.stack([x[..., g, :].mean(axis=-2) for g in groups], axis=-2)


class ToyEncoder:
    """Frozen per-row linear read of a column block, then row pooling to tokens."""

    def __init__(self, kind: str, columns: slice, projection: np.ndarray, n_tokens: int):
        self.kind = kind
        self.columns = columns
        self.projection = projection
        self.n_tokens = n_tokens
        self.calls = 0

    @property
    def out_dim(self) -> int:
        return self.projection.shape[1]

    def __call__(self, image_features: np.ndarray) -> np.ndarray:
        self.calls += 1
        return pool_rows(image_features[..., self.columns] @ self.projection, self.n_tokens)


@dataclass(frozen=True)
class WorkloadConfig:
    K: int = 4
    C: int = 8
    n_img: int = 64
    d_img: int = 32
    n_shared: int = 16
    d_shared: int = 32
    n_routed: int = 16
    d_routed: int = 32
    n_text: int = 8
    d_text: int = 32
    words_per_family: int = 4
    filler_words: int = 8
    family_word_rate: float = 0.5
    shared_codebook: bool = True
    signal_scale: float = 4.0
    world_seed: int = 0

    def __post_init__(self):
        if self.K < 2 or self.C < 2:
            raise ContractError(f"workload needs K >= 2 and C >= 2, got K={self.K}, C={self.C}")
        if self.d_img // (self.K + 1) < 2:
            raise ContractError(f"d_img={self.d_img} too small for {self.K} label blocks plus a family block")
        for name in ("n_img", "n_shared", "n_routed", "n_text", "d_shared", "d_routed", "d_text"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")


@dataclass
class SyntheticWorkload:
    cfg: WorkloadConfig = field(default_factory=WorkloadConfig)

    def __post_init__(self):
        c = self.cfg
        rng = np.random.default_rng(np.random.SeedSequence([c.world_seed, 0x5C0BE]))
        self.block = c.d_img // (c.K + 1)
        self.family_cols = slice(c.K * self.block, c.d_img)
        fam_dim = c.d_img - c.K * self.block

        protos = rng.normal(size=(c.K, c.C, self.block))
        if c.shared_codebook:
            protos[:] = protos[0]
        self.prototypes = c.signal_scale * protos / np.linalg.norm(protos, axis=-1, keepdims=True)
        sigs = rng.normal(size=(c.K, fam_dim))
        self.family_signatures = c.signal_scale * sigs / np.linalg.norm(sigs, axis=-1, keepdims=True)
        self.family_words = rng.normal(size=(c.K, c.words_per_family, c.d_text)) / np.sqrt(c.d_text)
        self.filler = rng.normal(size=(c.filler_words, c.d_text)) / np.sqrt(c.d_text)

        self.shared_encoder = ToyEncoder(
            "shared", self.family_cols, rng.normal(size=(fam_dim, c.d_shared)) / np.sqrt(fam_dim), c.n_shared
        )
        readouts = rng.normal(size=(c.K, self.block, c.d_routed)) / np.sqrt(self.block)
        if c.shared_codebook:
            readouts[:] = readouts[0]
        self.routed_encoders = [
            ToyEncoder(f"routed({i})", self.label_cols(i), readouts[i], c.n_routed) for i in range(c.K)
        ]

    def label_cols(self, i: int) -> slice:
        return slice(i * self.block, (i + 1) * self.block)

    def encoder_arrays(self) -> dict[str, np.ndarray]:
        out = {"encoder.shared.projection": self.shared_encoder.projection}
        for i, enc in enumerate(self.routed_encoders):
            out[f"encoder.routed.{i}.projection"] = enc.projection
        return out

    def reset_counters(self) -> None:
        for enc in [self.shared_encoder, *self.routed_encoders]:
            enc.calls = 0

    def _instance(self, rng: np.random.Generator, noise_level: float) -> SyntheticInstance:
        c = self.cfg
        e = int(rng.integers(c.K))
        label = int(rng.integers(c.C))
        decoys = rng.integers(c.C, size=c.K)
        base = np.empty(c.d_img)
        for i in range(c.K):
            base[self.label_cols(i)] = self.prototypes[i, label if i == e else decoys[i]]
        base[self.family_cols] = self.family_signatures[e]
        image = np.tile(base, (c.n_img, 1))
        image += noise_level * c.signal_scale * rng.normal(size=image.shape) / np.sqrt(self.block)

        family = rng.random(c.n_text) < c.family_word_rate
        family[rng.integers(c.n_text)] = True
        prompt = np.where(
            family[:, None],
            self.family_words[e, rng.integers(c.words_per_family, size=c.n_text)],
            self.filler[rng.integers(c.filler_words, size=c.n_text)],
        )
        prompt = prompt + noise_level * rng.normal(size=prompt.shape) / np.sqrt(c.d_text)
        return SyntheticInstance(image, prompt, label, e)

    def generate_batch(self, seed, B: int, noise_level: float = 0.0) -> list[SyntheticInstance]:
        if B < 1:
            raise ContractError(f"batch size must be >= 1, got {B}")
        if noise_level < 0:
            raise ContractError(f"noise_level must be >= 0, got {noise_level}")
        entropy = list(seed) if isinstance(seed, (tuple, list)) else [seed]
        rng = np.random.default_rng(np.random.SeedSequence(entropy))
        return [self._instance(rng, noise_level) for _ in range(B)]


def generate_batch(seed, B: int, K: int = 4, C: int = 8, noise_level: float = 0.0, world_seed: int = 0):
    return SyntheticWorkload(WorkloadConfig(K=K, C=C, world_seed=world_seed)).generate_batch(seed, B, noise_level)


def export_jsonl(instances: list[SyntheticInstance], path: str | Path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record(), sort_keys=True) + "\n")


def load_jsonl(path: str | Path) -> list[SyntheticInstance]:
    out = []
    with open(path) as fh:
        for line in fh:
            r = json.loads(line)
            out.append(SyntheticInstance(
                np.array(r["image_features"]), np.array(r["prompt_embedding"]),
                int(r["label"]), int(r["planted_expert"]),
            ))
    return out


def tile_pseudo_batch(instance: SyntheticInstance, tile_count: int) -> list[SyntheticInstance]:
    """Split the image rows into ``tile_count`` equal tiles sharing prompt and label.

    Tiles hold ``ceil(N / tile_count)`` rows; when the rows do not divide evenly the
    tail is padded by repeating the image's final row.
    """
    if tile_count < 1:
        raise ContractError(f"tile_count must be >= 1, got {tile_count}")
    if tile_count == 1:
        return [instance]
    rows = instance.image_features
    if rows.shape[0] < tile_count:
        raise ContractError(f"cannot cut {rows.shape[0]} rows into {tile_count} tiles")
    size = -(-rows.shape[0] // tile_count)
    tiles = []
    for t in range(tile_count):
        chunk = rows[t * size:(t + 1) * size]
        if len(chunk) < size:
            chunk = np.concatenate([chunk, np.repeat(rows[-1:], size - len(chunk), axis=0)])
        tiles.append(SyntheticInstance(chunk.copy(), instance.prompt_embedding, instance.label, instance.planted_expert))
    return tiles


def init_head_params(d_shared: int, C: int, rng: np.random.Generator) -> dict[str, Tensor]:
    return {
        "head.weight": Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_shared), size=(d_shared, C)), requires_grad=True, name="head.weight"),
        "head.bias": Tensor(np.zeros(C), requires_grad=True, name="head.bias"),
    }


def head_logits(V_final: Tensor, head: dict[str, Tensor]) -> Tensor:
    pooled = ad.mean(V_final, axis=-2)
    return ad.add(ad.matmul(ad.reshape(pooled, (-1, pooled.shape[-1])), head["head.weight"]), head["head.bias"])


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.atleast_1d(np.asarray(labels))
    C = logits.shape[-1]
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= C):
        raise ContractError(f"labels {labels.tolist()} out of range [0, {C})")
    logp = ad.log_softmax(logits, axis=-1)
    return ad.scale(ad.mean(logp[np.arange(len(labels)), labels]), -1.0)


def surrogate_task_loss(V_final, head: dict[str, Tensor], labels) -> Tensor:
    """Cross-entropy of the head's class logits; stands in for the language-model loss."""
    values = V_final.values if hasattr(V_final, "values") else V_final
    return cross_entropy(head_logits(values, head), labels)
