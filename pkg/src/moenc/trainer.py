"""Training loop, routing statistics and the loss-weight sweep."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from moenc import autodiff as ad
from moenc.errors import ConfigurationError, ContractError, DivergenceError
from moenc.model import MixtureOfEncoders
from moenc.objective import DEFAULT_WEIGHTS, LossWeights, total_loss
from moenc.optim import AdamW, cosine_lr
from moenc.router import VARIANT_ALIASES, VARIANTS, RouterConfig
from moenc.workload import (
    SyntheticInstance, SyntheticWorkload, WorkloadConfig, cross_entropy, stack_instances, tile_pseudo_batch,
)

log = logging.getLogger(__name__)

EVAL_STREAM = 0xE7A1


@dataclass
class TrainConfig:
    steps: int = 600
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.999
    weight_decay: float = 1e-6
    eps: float = 1e-8
    schedule: str = "cosine"
    min_lr_ratio: float = 0.1
    weights: LossWeights = DEFAULT_WEIGHTS
    router: str = "cross_attention"
    d_router: int = 256
    num_heads: int = 4
    weighting: str = "softmax"
    zero_init_router: bool = True
    router_warmup: int = 200
    seed: int = 0
    noise_level: float = 0.0
    tile_count: int = 1
    eval_size: int = 1000
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.workload, dict):
            self.workload = WorkloadConfig(**self.workload)
        self.router = VARIANT_ALIASES.get(self.router, self.router)
        if self.router not in VARIANTS:
            raise ConfigurationError(f"unknown router {self.router!r}; expected ca, sa, mlp or one of {VARIANTS}")
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.router_warmup < 0:
            raise ConfigurationError(f"router_warmup must be >= 0, got {self.router_warmup}")
        if self.batch_size < 1 or self.tile_count < 1 or self.eval_size < 1:
            raise ConfigurationError("batch_size, tile_count and eval_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.batch_size * self.tile_count < 2 and self.weights.be > 0:
            raise ConfigurationError(
                "batch entropy needs at least 2 routed items per step; raise batch_size or set tile_count >= 2"
            )

    @property
    def router_config(self) -> RouterConfig:
        w = self.workload
        return RouterConfig(w.K, self.d_router, self.router, self.num_heads, w.d_shared, w.d_text)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RoutingStats:
    selection_counts: list[int]
    frequencies: list[float]
    range_gap: float
    expert_recovery_accuracy: float
    task_accuracy: float = float("nan")
    history: list[dict] = field(default_factory=list)

    @classmethod
    def from_selections(cls, selected, planted, K: int, correct=None, history=None) -> RoutingStats:
        selected = np.asarray(selected)
        if selected.size == 0:
            raise ContractError("routing statistics need at least one routed instance")
        counts = np.bincount(selected, minlength=K)
        freqs = counts / counts.sum()
        return cls(
            selection_counts=[int(c) for c in counts],
            frequencies=[float(f) for f in freqs],
            range_gap=float(100.0 * (freqs.max() - freqs.min())),
            expert_recovery_accuracy=float(np.mean(selected == np.asarray(planted))),
            task_accuracy=float(np.mean(correct)) if correct is not None else float("nan"),
            history=list(history or []),
        )

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("history")
        return d


@dataclass
class TrainResult:
    model: MixtureOfEncoders
    stats: RoutingStats
    steps_done: int


def _expand_tiles(instances: list[SyntheticInstance], tile_count: int) -> list[SyntheticInstance]:
    if tile_count == 1:
        return instances
    return [tile for inst in instances for tile in tile_pseudo_batch(inst, tile_count)]


def eval_set(config: TrainConfig, workload: SyntheticWorkload) -> list[SyntheticInstance]:
    instances = workload.generate_batch((config.seed, EVAL_STREAM), config.eval_size, config.noise_level)
    return _expand_tiles(instances, config.tile_count)


def build_model(config: TrainConfig) -> MixtureOfEncoders:
    return MixtureOfEncoders.init(SyntheticWorkload(config.workload), config.router_config, config.seed,
                                  config.weighting, config.zero_init_router)


def train(config: TrainConfig, on_step: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Optimise router, connectors and head on freshly generated batches.

    Deterministic given ``config``.  Raises :class:`DivergenceError` on a
    non-finite total loss.
    """
    model = build_model(config)
    opt = AdamW(model.params, config.learning_rate, (config.beta1, config.beta2), config.eps, config.weight_decay)
    history: list[dict] = []
    last_finite = None
    router_names = frozenset(n for n in model.params if n.startswith("router."))
    for step in range(config.steps):
        instances = model.workload.generate_batch((config.seed, step), config.batch_size, config.noise_level)
        batch = stack_instances(_expand_tiles(instances, config.tile_count))
        logits, Z, selected = model.train_forward(batch)
        l_lm = cross_entropy(logits, batch.labels)
        breakdown = total_loss(l_lm, Z, config.weights)
        record = breakdown.as_dict()
        if not all(math.isfinite(v) for v in record.values()):
            raise DivergenceError(step, last_finite)
        last_finite = record
        opt.zero_grad()
        ad.backward(breakdown.total)
        lr = cosine_lr(step, config.steps, config.learning_rate, config.min_lr_ratio) \
            if config.schedule == "cosine" else config.learning_rate
        opt.step(lr, frozen=router_names if step < config.router_warmup else ())
        record = {"step": step, "lr": lr, **record,
                  "selection_counts": np.bincount(selected, minlength=config.workload.K).tolist()}
        history.append(record)
        if on_step is not None:
            on_step(step, record)
    stats = evaluate_routing(model, eval_set(config, model.workload))
    stats.history = history
    return TrainResult(model, stats, config.steps)


def evaluate_routing(model: MixtureOfEncoders, instances: list[SyntheticInstance]) -> RoutingStats:
    """Inference-mode routing over ``instances``: only the chosen expert runs per instance."""
    if not instances:
        raise ContractError("evaluation set is empty")
    selected, planted, correct = [], [], []
    for inst in instances:
        logits, k, _ = model.infer(inst)
        selected.append(k)
        planted.append(inst.planted_expert)
        correct.append(int(np.argmax(logits)) == inst.label)
    return RoutingStats.from_selections(selected, planted, model.workload.cfg.K, correct)


@dataclass
class SweepRow:
    weights: LossWeights
    task_accuracy: float
    range_gap: float
    expert_recovery_accuracy: float

    def as_dict(self) -> dict:
        return {**{f"lambda_{k}": v for k, v in self.weights.as_dict().items()},
                "task_accuracy": self.task_accuracy, "range_gap": self.range_gap,
                "expert_recovery_accuracy": self.expert_recovery_accuracy}


def sweep_lambdas(grid: list[LossWeights], base: TrainConfig) -> list[SweepRow]:
    if not grid:
        raise ContractError("loss-weight grid is empty")
    rows = []
    for w in grid:
        result = train(replace(base, weights=w))
        s = result.stats
        log.info("sweep %s -> acc=%.3f range=%.1f", w, s.task_accuracy, s.range_gap)
        rows.append(SweepRow(w, s.task_accuracy, s.range_gap, s.expert_recovery_accuracy))
    return rows


# Published loss-weight ablation rows, listed as (be, ie, ba, ia); index 3 is the default.
ABLATION_GRID = [
    LossWeights(ba=ba, be=be, ie=ie, ia=ia)
    for be, ie, ba, ia in [
        (0.3, 0.9, 0.3, 0.9), (0.2, 0.2, 0.2, 0.2), (0.2, 0.4, 0.2, 0.4),
        (0.2, 0.6, 0.2, 0.6), (0.1, 0.3, 0.1, 0.3), (0.5, 0.5, 0.5, 0.5),
        (0.2, 0.0, 0.2, 0.0), (0.0, 0.6, 0.0, 0.6), (0.0, 0.0, 0.0, 0.0),
    ]
]
