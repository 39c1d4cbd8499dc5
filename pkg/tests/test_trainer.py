import math

import numpy as np
import pytest

import moenc.trainer as trainer_mod
from moenc.autodiff import Tensor
from moenc.errors import ConfigurationError, ContractError, DivergenceError
from moenc.objective import LossWeights
from moenc.trainer import (
    ABLATION_GRID, RoutingStats, TrainConfig, build_model, evaluate_routing, sweep_lambdas, train,
)

SMALL = dict(steps=20, batch_size=8, d_router=16, router_warmup=5, eval_size=40)


def test_determinism():
    a = train(TrainConfig(**SMALL))
    b = train(TrainConfig(**SMALL))
    assert a.stats.history == b.stats.history
    assert a.stats.summary() == b.stats.summary()
    for name, t in a.model.params.items():
        assert np.array_equal(t.data, b.model.params[name].data)


def test_zero_steps_leaves_parameters_untouched():
    cfg = TrainConfig(**{**SMALL, "steps": 0})
    result = train(cfg)
    fresh = build_model(cfg)
    for name, t in result.model.params.items():
        assert t.data.tobytes() == fresh.params[name].data.tobytes()
    assert result.stats.history == []


def test_warmup_freezes_router_only():
    cfg = TrainConfig(**{**SMALL, "steps": 5, "router_warmup": 5})
    result, fresh = train(cfg), build_model(cfg)
    for name, t in result.model.params.items():
        same = np.array_equal(t.data, fresh.params[name].data)
        assert same == name.startswith("router.")


@pytest.fixture(scope="module")
def default_run():
    return train(TrainConfig())


def test_default_run_reduces_total_loss(default_run):
    totals = [h["total"] for h in default_run.stats.history]
    assert np.mean(totals[-10:]) < np.mean(totals[:10])


def test_counts_are_conserved(default_run):
    s = default_run.stats
    assert sum(s.selection_counts) == TrainConfig().eval_size
    assert s.range_gap == pytest.approx(100 * (max(s.frequencies) - min(s.frequencies)))


def test_history_records_every_term(default_run):
    rec = default_run.stats.history[0]
    assert {"l_lm", "l_ba", "l_be", "l_ie", "l_ia", "total", "lr", "step", "selection_counts"} <= set(rec)
    assert all(math.isfinite(h["total"]) for h in default_run.stats.history)


def test_range_gap_extremes():
    planted = np.arange(400) % 4
    assert RoutingStats.from_selections(np.zeros(400, int), planted, 4).range_gap == 100.0
    assert RoutingStats.from_selections(planted, planted, 4).range_gap == 0.0


def test_random_router_recovers_at_chance(rng):
    n, K = 4000, 4
    planted = rng.integers(K, size=n)
    stats = RoutingStats.from_selections(rng.integers(K, size=n), planted, K)
    sigma = math.sqrt((1 / K) * (1 - 1 / K) / n)
    assert abs(stats.expert_recovery_accuracy - 1 / K) <= 3 * sigma


def test_empty_evaluation_is_a_contract_error():
    with pytest.raises(ContractError):
        evaluate_routing(build_model(TrainConfig(**SMALL)), [])
    with pytest.raises(ContractError):
        RoutingStats.from_selections([], [], 4)


def test_divergence_reports_step_and_last_breakdown(monkeypatch):
    real = trainer_mod.cross_entropy
    calls = {"n": 0}

    def flaky(logits, labels):
        calls["n"] += 1
        return Tensor(np.array(np.nan)) if calls["n"] == 4 else real(logits, labels)

    monkeypatch.setattr(trainer_mod, "cross_entropy", flaky)
    with pytest.raises(DivergenceError) as info:
        train(TrainConfig(**SMALL))
    assert info.value.step == 3
    assert math.isfinite(info.value.last_finite["total"])


def test_batch_of_one_needs_tiles_for_batch_entropy():
    with pytest.raises(ConfigurationError, match="tile_count"):
        TrainConfig(batch_size=1)
    result = train(TrainConfig(**{**SMALL, "batch_size": 1, "tile_count": 4}))
    assert all(math.isfinite(h[k]) for h in result.stats.history for k in ("l_ba", "l_be", "l_ie", "l_ia"))


@pytest.mark.parametrize("kw", [dict(steps=-1), dict(learning_rate=0.0), dict(schedule="linear"),
                                dict(router="rnn"), dict(router_warmup=-2), dict(eval_size=0)])
def test_bad_train_config(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


def test_router_aliases():
    assert TrainConfig(router="sa").router == "self_attention"
    assert TrainConfig(router="mlp").router_config.variant == "mlp"


def test_sweep_rows_are_deterministic():
    w = LossWeights(0.1, 0.1, 0.3, 0.3)
    rows = sweep_lambdas([w, w], TrainConfig(**SMALL))
    assert len(rows) == 2 and rows[0] == rows[1]
    assert sweep_lambdas([w], TrainConfig(**SMALL))[0] == rows[0]
    with pytest.raises(ContractError):
        sweep_lambdas([], TrainConfig(**SMALL))


def test_ablation_grid_shape():
    assert len(ABLATION_GRID) == 9
    assert ABLATION_GRID[3] == LossWeights()
    assert ABLATION_GRID[-1] == LossWeights.zeros()


# Both invariants below assume the balance terms prevent collapse.  On this workload the
# opposite happens: the router learns the planted experts without them (balanced, range ~6),
# and with them the instance-sharpening term locks every instance onto the tie-broken expert.
COLLAPSE_REASON = ("batch-axis terms are invariant to per-expert logit shifts, so a fully collapsed "
                   "router already minimises all four routing terms; see notes/decisions.md")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason=COLLAPSE_REASON)
def test_zero_lambda_range_exceeds_default(default_run):
    zero = train(TrainConfig(weights=LossWeights.zeros()))
    assert zero.stats.range_gap > default_run.stats.range_gap


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason=COLLAPSE_REASON)
def test_all_zero_row_is_worst_in_ablation_sweep():
    rows = sweep_lambdas(ABLATION_GRID, TrainConfig())
    zero = [r for r in rows if r.weights == LossWeights.zeros()][0]
    assert zero.range_gap == max(r.range_gap for r in rows)
    assert all(r.range_gap < zero.range_gap for r in rows if r is not zero)
