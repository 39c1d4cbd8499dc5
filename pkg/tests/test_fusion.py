import numpy as np
import pytest

from moenc import autodiff as ad
from moenc.autodiff import Tensor
from moenc.errors import ConfigurationError, ContractError, DimensionError
from moenc.fusion import (
    Connector, fuse, routing_weights, select_top1, soft_mixture, ste_mix,
)
from moenc.model import MixtureOfEncoders
from moenc.router import RouterConfig
from moenc.workload import SyntheticWorkload, WorkloadConfig, stack_instances

K, N_R, D_R = 4, 16, 32


def _mix_grads(mix, seed):
    r = np.random.default_rng(seed)
    z = Tensor(r.normal(size=K), requires_grad=True)
    V = [Tensor(r.normal(size=(N_R, D_R)), requires_grad=True) for _ in range(K)]
    G = r.normal(size=(N_R, D_R))
    q = ad.softmax(z, axis=0)
    k = select_top1(q)
    out = mix(q, V, k)
    ad.backward(ad.sum(ad.mul(out, Tensor(G))))
    return out.data, q.data, V, k, [z.grad] + [v.grad for v in V]


@pytest.mark.parametrize("seed", range(100))
def test_ste_forward_is_hard_path_and_backward_is_soft(seed):
    out, q, V, k, g_ste = _mix_grads(ste_mix, seed)
    hard = q[k] * V[k].data
    assert np.array_equal(out, hard)
    _, _, _, _, g_soft = _mix_grads(lambda q, V, k: soft_mixture(q, V), seed)
    for a, b in zip(g_ste, g_soft):
        assert np.max(np.abs(a - b)) <= 1e-12


def test_ste_batched_matches_single(rng):
    q = ad.softmax(Tensor(rng.normal(size=(3, K))), axis=-1)
    V = [Tensor(rng.normal(size=(3, 5, 2))) for _ in range(K)]
    k = select_top1(q)
    out = ste_mix(q, V, k).data
    for b in range(3):
        np.testing.assert_array_equal(out[b], q.data[b, k[b]] * V[k[b]].data[b])


def test_select_top1_ties_and_empty():
    assert select_top1(np.array([0.3, 0.3, 0.1])) == 0
    np.testing.assert_array_equal(select_top1(np.array([[0, 1.0], [2.0, 1.0]])), [1, 0])
    with pytest.raises(ContractError):
        select_top1(np.array([]))


def test_mismatched_expert_shapes_point_to_adapters():
    q = Tensor(np.full(2, 0.5))
    with pytest.raises(ConfigurationError, match="adapter"):
        ste_mix(q, [Tensor(np.ones((4, 3))), Tensor(np.ones((5, 3)))], 0)


def test_fuse_concatenates_along_tokens(rng):
    conn = Connector(Tensor(rng.normal(size=(3, 6))), Tensor(np.zeros(6)))
    out = fuse(rng.normal(size=(5, 6)), Tensor(rng.normal(size=(2, 3))), conn, 1)
    assert out.values.shape == (7, 6) and out.selected_index == 1
    bad = Connector(Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(4)))
    with pytest.raises(DimensionError):
        fuse(rng.normal(size=(5, 6)), Tensor(rng.normal(size=(2, 3))), bad)


def test_routing_weights_modes(rng):
    z = Tensor(rng.normal(size=K))
    np.testing.assert_allclose(routing_weights(z).data.sum(), 1.0)
    assert routing_weights(z, "logits") is z
    with pytest.raises(ConfigurationError):
        routing_weights(z, "sparsemax")


@pytest.fixture(scope="module")
def model():
    wl = SyntheticWorkload(WorkloadConfig())
    cfg = RouterConfig(K=4, d_router=32, variant="cross_attention", num_heads=4)
    return MixtureOfEncoders.init(wl, cfg, seed=3, zero_init_router=False)


def test_inference_matches_training_forward(model):
    instances = model.workload.generate_batch(11, 50)
    logits, Z, selected = model.train_forward(stack_instances(instances))
    for b, inst in enumerate(instances):
        lg, k, z = model.infer(inst)
        assert k == selected[b]
        np.testing.assert_allclose(lg, logits.data[b], rtol=0, atol=1e-12)
        np.testing.assert_allclose(z, Z.data[:, b], rtol=0, atol=1e-12)


def test_inference_runs_only_the_selected_encoder(model):
    wl = model.workload
    inst = wl.generate_batch(5, 1)[0]
    wl.reset_counters()
    _, k, _ = model.infer(inst)
    calls = [e.calls for e in wl.routed_encoders]
    assert calls[k] == 1 and sum(calls) == 1
    assert wl.shared_encoder.calls == 1

    wl.reset_counters()
    model.train_forward(stack_instances(wl.generate_batch(5, 4)))
    assert [e.calls for e in wl.routed_encoders] == [1] * 4
