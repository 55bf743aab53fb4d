import math

import numpy as np
import pytest

from moeprune import autograd as ag
from moeprune.autograd import Tape, Tensor, grad_check
from moeprune.errors import ConfigError, DimensionError, InvariantError
from moeprune.model import (FFN, GateResult, MoEEncoder, MoELayer, ModelConfig, balance_loss, collapse_model,
                            collapse_to_dense, gate, init_parameters, moe_forward)
from moeprune.tasks import TaskSpec, batch_rng, gen_pretrain_batch
from moeprune.config import OptimConfig
from moeprune.training import Adam


def make_layer(rng, hidden=6, inner=10, E=4, scale=1.0):
    router = Tensor(rng.normal(size=(hidden, E)) * scale, requires_grad=True)
    experts = [FFN(*(Tensor(rng.normal(size=s) * 0.5, requires_grad=True)
                     for s in ((hidden, inner), (inner,), (inner, hidden), (hidden,)))) for _ in range(E)]
    return MoELayer(router, experts)


def ffn_oracle(ffn, x):
    # independent forward in plain numpy
    z = x @ ffn.w1.data + ffn.b1.data
    h = 0.5 * z * (1 + np.tanh(math.sqrt(2 / math.pi) * (z + 0.044715 * z**3)))
    return h @ ffn.w2.data + ffn.b2.data


# -- gate ------------------------------------------------------------------------------


def test_gate_equal_logits_uniform():
    layer = make_layer(np.random.default_rng(0), hidden=3)
    layer.router.data[:] = 0.0
    g = gate(Tensor(np.ones((5, 3))), layer)
    assert np.array_equal(g.alphas.data, np.full((5, 4), 0.25))


def test_gate_single_active_expert_has_alpha_one():
    layer = make_layer(np.random.default_rng(1))
    layer.set_survivors([2])
    g = gate(Tensor(np.random.default_rng(2).normal(size=(7, 6))), layer)
    assert np.array_equal(g.alphas.data[:, 2], np.ones(7))
    assert np.array_equal(np.delete(g.alphas.data, 2, axis=1), np.zeros((7, 3)))
    assert set(g.top1) == {2}


def test_gate_masked_hand_softmax():
    # hidden size 1 and x = 1, so the logits are the router row itself
    router = Tensor([[math.log(2.0), 0.0, 50.0, 60.0]])
    experts = [FFN(Tensor(np.ones((1, 1))), Tensor(np.zeros(1)), Tensor(np.ones((1, 1))), Tensor(np.zeros(1)))
               for _ in range(4)]
    layer = MoELayer(router, experts, np.array([True, True, False, False]))
    g = gate(Tensor([[1.0]]), layer)
    assert np.allclose(g.alphas.data, [[2 / 3, 1 / 3, 0.0, 0.0]], atol=1e-15)
    assert g.top1.tolist() == [0]


def test_gate_all_masked_is_invariant_error():
    layer = make_layer(np.random.default_rng(3))
    layer.active_mask[:] = False
    with pytest.raises(InvariantError):
        gate(Tensor(np.ones((2, 6))), layer)
    with pytest.raises(InvariantError):
        layer.set_survivors([])


def test_gating_conservation_random_masks():
    rng = np.random.default_rng(4)
    for trial in range(20):
        layer = make_layer(rng, scale=3.0)
        layer.active_mask = rng.random(4) < 0.6
        if not layer.active_mask.any():
            layer.active_mask[rng.integers(4)] = True
        g = gate(Tensor(rng.normal(size=(50, 6))), layer)
        a = g.alphas.data
        assert np.max(np.abs(a[:, layer.active_mask].sum(axis=1) - 1.0)) < 1e-9
        assert np.all(a[:, ~layer.active_mask] == 0.0)
        assert np.array_equal(g.top1, np.argmax(a, axis=1))
        assert np.all(layer.active_mask[g.top1])


# -- moe_forward ---------------------------------------------------------------------------


def test_single_survivor_equals_plain_ffn():
    rng = np.random.default_rng(5)
    layer = make_layer(rng)
    layer.set_survivors([1])
    x = rng.normal(size=(9, 6))
    y, _ = moe_forward(Tensor(x), layer)
    assert np.max(np.abs(y.data - layer.experts[1](Tensor(x)).data)) < 1e-12


def test_forced_split_matches_per_token_oracle():
    rng = np.random.default_rng(6)
    layer = make_layer(rng, E=2)
    # router reads feature 0: positive tokens go to expert 0, negative to expert 1
    layer.router.data[:] = 0.0
    layer.router.data[0] = [2.0, -2.0]
    x = rng.normal(size=(12, 6))
    x[:6, 0], x[6:, 0] = np.abs(x[:6, 0]) + 0.1, -np.abs(x[6:, 0]) - 0.1
    y, g = moe_forward(Tensor(x), layer)
    assert g.top1.tolist() == [0] * 6 + [1] * 6
    for t in range(12):
        logits = x[t] @ layer.router.data
        alpha = np.exp(logits - logits.max())
        alpha /= alpha.sum()
        j = int(np.argmax(alpha))
        ref = alpha[j] * ffn_oracle(layer.experts[j], x[t:t + 1])[0]
        assert np.max(np.abs(y.data[t] - ref)) < 1e-12


def test_routing_sparsity_zero_gradient_for_unused_experts():
    rng = np.random.default_rng(7)
    layer = make_layer(rng, E=3)
    layer.router.data[:] = 0.0
    layer.router.data[0] = [5.0, 0.0, -5.0]
    x = np.abs(rng.normal(size=(8, 6))) + 0.5  # every token prefers expert 0
    with Tape() as tape:
        y, g = moe_forward(Tensor(x), layer)
        loss = ag.total(ag.mul(y, y))
    tape.backward(loss)
    assert set(g.top1) == {0}
    for j in (1, 2):
        for p in layer.experts[j].parameters():
            assert p.grad is None or np.all(p.grad == 0.0)
    assert np.any(layer.experts[0].w1.grad != 0)
    assert np.any(layer.router.grad != 0)  # gradient reaches alpha


def test_mask_monotonicity():
    rng = np.random.default_rng(8)
    layer = make_layer(rng, E=4)
    layer.router.data[:] = 0.0
    layer.router.data[0] = [8.0, 0.0, 0.0, -8.0]
    x = rng.normal(size=(10, 6))
    x[:, 0] = np.abs(x[:, 0]) + 1.0  # expert 0 strictly dominant
    before, g0 = moe_forward(Tensor(x), layer)
    layer.set_survivors([0, 1, 2])
    after, g1 = moe_forward(Tensor(x), layer)
    assert set(g0.top1) == set(g1.top1) == {0}
    # renormalisation changes alpha, but only through expert 3's (tiny) share
    a0 = g0.alphas.data[:, 0]
    a1 = g1.alphas.data[:, 0]
    ratio = a1 / a0
    assert np.allclose(after.data, before.data * ratio[:, None], atol=1e-12)


def test_moe_forward_shape_error():
    layer = make_layer(np.random.default_rng(9))
    with pytest.raises(DimensionError):
        moe_forward(Tensor(np.ones((3, 5))), layer)


def test_router_gradient_check():
    rng = np.random.default_rng(10)
    layer = make_layer(rng)
    x = Tensor(rng.normal(size=(16, 6)))

    def f():
        y, g = moe_forward(x, layer)
        return ag.add(ag.total(ag.mul(y, y)), g.balance_loss)

    assert grad_check(f, [layer.router], samples=None) < 1e-4


# -- balance loss --------------------------------------------------------------------------


def _gate_from_alphas(alphas, mask=None):
    a = Tensor(np.asarray(alphas, dtype=float))
    mask = np.ones(a.shape[1], dtype=bool) if mask is None else mask
    return GateResult(a, np.argmax(a.data, axis=1), None, mask)


def test_balance_loss_examples():
    Z = 4
    uniform_top1 = _gate_from_alphas(np.full((8, Z), 1 / Z))
    uniform_top1.top1 = np.arange(8) % Z
    assert abs(balance_loss(uniform_top1, Z).item() - 1.0) < 1e-15
    one = _gate_from_alphas(np.tile([1.0, 0, 0, 0], (5, 1)))
    assert balance_loss(one, Z).item() == Z
    single = _gate_from_alphas(np.ones((3, 1)))
    assert balance_loss(single, 1).item() == 1.0


def test_balance_loss_gradient_only_through_p():
    a = Tensor(np.array([[0.7, 0.3], [0.4, 0.6], [0.9, 0.1]]), requires_grad=True)
    g = GateResult(a, np.array([0, 1, 0]), None, np.ones(2, bool))
    with Tape() as tape:
        loss = balance_loss(g, 2)
    tape.backward(loss)
    f = np.array([2 / 3, 1 / 3])
    # d/dalpha_ti of Z * sum_i f_i * mean_t alpha_ti = Z * f_i / n
    assert np.allclose(a.grad, np.tile(2 * f / 3, (3, 1)), atol=1e-15)


# -- collapse ----------------------------------------------------------------------------------


def test_collapse_equivalence_100_inputs():
    rng = np.random.default_rng(11)
    layer = make_layer(rng, E=5)
    layer.set_survivors([3])
    dense = collapse_to_dense(layer)
    worst = 0.0
    for _ in range(100):
        x = Tensor(rng.normal(size=(rng.integers(1, 20), 6)))
        worst = max(worst, np.max(np.abs(dense(x).data - moe_forward(x, layer)[0].data)))
    assert worst < 1e-12
    assert dense.num_parameters() == layer.experts[3].num_parameters()


def test_collapse_rejects_multiple_survivors():
    layer = make_layer(np.random.default_rng(12))
    layer.set_survivors([0, 1])
    with pytest.raises(InvariantError):
        collapse_to_dense(layer)


def test_collapse_model_matches_masked_model():
    cfg = ModelConfig(hidden_size=8, ffn_inner=12, num_experts=4, feature_dim=5)
    m = MoEEncoder.initialize(cfg, 3)
    for b, layer in m.moe_layers.items():
        layer.set_survivors([b % 4])
    dense = collapse_model(m)
    assert dense.config.moe_block_indices == ()
    assert dense.num_parameters() < m.num_parameters()
    x = np.random.default_rng(0).normal(size=(6, 4, 5))
    assert np.max(np.abs(dense(x).logits.data - m(x).logits.data)) < 1e-12


# -- encoder -------------------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(moe_block_indices=(4,))
    with pytest.raises(ConfigError):
        ModelConfig(num_experts=0)
    with pytest.raises(ConfigError):
        ModelConfig(hidden_size=10, num_heads=3)


def test_e1_model_equals_dense_counterpart():
    cfg = ModelConfig(hidden_size=8, ffn_inner=12, num_experts=1, feature_dim=5, num_heads=2)
    m = MoEEncoder.initialize(cfg, 4)
    params = {}
    for name in init_parameters(cfg.dense(), np.random.default_rng(0)):
        parts = name.split(".")
        if parts[0] == "blocks" and parts[2] == "ffn" and int(parts[1]) in cfg.moe_block_indices:
            params[name] = m.params[f"blocks.{parts[1]}.moe.experts.0.{parts[3]}"].data
        else:
            params[name] = m.params[name].data
    dense = MoEEncoder(cfg.dense(), params)
    x = np.random.default_rng(1).normal(size=(3, 4, 5))
    assert np.max(np.abs(m(x).logits.data - dense(x).logits.data)) < 1e-12


def test_param_validation():
    cfg = ModelConfig(hidden_size=8, ffn_inner=12, num_experts=2, feature_dim=5)
    params = init_parameters(cfg, np.random.default_rng(0))
    params["head.w"] = np.zeros((3, 3))
    with pytest.raises(ConfigError):
        MoEEncoder(cfg, params)


def test_forward_shape_checks():
    m = MoEEncoder.initialize(ModelConfig(hidden_size=8, ffn_inner=12, num_experts=2, feature_dim=5), 0)
    with pytest.raises(DimensionError):
        m(np.zeros((2, 3, 4)))


@pytest.mark.parametrize("mixer,heads", [("attention", 1), ("attention", 2), ("mean", 1)])
def test_full_tiny_model_gradient(mixer, heads):
    cfg = ModelConfig(num_blocks=2, hidden_size=8, ffn_inner=8, num_experts=4, moe_block_indices=(1,),
                      feature_dim=4, num_heads=heads, mixer=mixer)
    m = MoEEncoder.initialize(cfg, 0)
    spec = TaskSpec(feature_dim=4, num_subtasks=2, center_scale=5.0)
    batch = gen_pretrain_batch(spec, 4, batch_rng(0, 1))

    def f():
        out = m(batch.features)
        return ag.add(ag.cross_entropy(out.logits, batch.labels), out.aux_loss)

    assert grad_check(f, list(m.params.values()), samples=None) < 1e-4


def _one_step_loss(weight: float, use_aux: bool, steps=3):
    cfg = ModelConfig(num_blocks=2, hidden_size=8, ffn_inner=8, num_experts=4, moe_block_indices=(1,),
                      feature_dim=4, balance_loss_weight=weight)
    m = MoEEncoder.initialize(cfg, 0)
    spec = TaskSpec(feature_dim=4, num_subtasks=2, center_scale=5.0)
    opt = Adam(m.params, OptimConfig(lr=1e-2, warmup_steps=0), steps)
    losses = []
    for s in range(steps):
        batch = gen_pretrain_batch(spec, 8, batch_rng(0, s))
        for p in m.params.values():
            p.grad = None
        with Tape() as tape:
            out = m(batch.features)
            loss = ag.cross_entropy(out.logits, batch.labels)
            if use_aux:
                loss = ag.add(loss, out.aux_loss)
        tape.backward(loss)
        opt.step()
        losses.append(loss.item())
    return losses, m.state()


def test_zero_balance_weight_matches_ignoring_aux():
    a, sa = _one_step_loss(0.0, True)
    b, sb = _one_step_loss(0.0, False)
    assert a == b
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


# Loss before and after one update, recorded once from this implementation
# after the gradient checks above passed.
GOLDEN_LOSSES = [1.1782440444738986, 0.5524361065113178]


def test_golden_two_step_loss():
    losses, _ = _one_step_loss(1e-2, True, steps=2)
    assert losses == pytest.approx(GOLDEN_LOSSES, rel=1e-12, abs=0)
