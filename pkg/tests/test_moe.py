import numpy as np
import pytest

from src.errors import CoverageError, ConfigError, DimensionError, InputError
from src.models import ModelConfig, RoutingUnit
from src.moe import ExpertKey, MoEModel, gating_group_id, moe_forward, moe_layer, predict, top_k_route
from src.tensor import Tensor


def _fixed_gate_model(gates, expert_outputs, k):
    """One-layer model whose gates and expert outputs ignore the input."""
    s = len(gates)
    cfg = ModelConfig(num_layers=1, experts_per_layer=s, top_k=k, input_dim=2, hidden_dim=2,
                      expert_dim=3, output_dim=2)
    model = MoEModel.initialize(cfg, np.random.default_rng(0))
    state = {gating_group_id(0): [np.zeros((2, s)), np.log(np.asarray(gates, dtype=float))]}
    for i, out in enumerate(expert_outputs):
        state[ExpertKey(0, i).group_id] = [np.zeros((2, 3)), np.zeros(3), np.zeros((3, 2)), np.asarray(out, float)]
    model.load_state(state)
    return model


def _dense_oracle(model, x, allowed=None):
    """Evaluate every expert and keep only the selected contributions."""
    cfg = model.config
    act = np.tanh if cfg.activation == "tanh" else (lambda v: np.maximum(v, 0.0))
    w, b = model.group("embed").arrays()
    h = act(x @ w + b)
    for layer in range(cfg.num_layers):
        wg, bg = model.gating(layer).arrays()
        logits = h @ wg + bg
        g = np.exp(logits - logits.max(axis=1, keepdims=True))
        g /= g.sum(axis=1, keepdims=True)
        k = cfg.top_k
        if allowed is not None:
            g = g * allowed[layer]
            g /= g.sum(axis=1, keepdims=True)
            k = min(k, int(allowed[layer].sum()))
        mixed = np.zeros_like(h)
        for u in range(h.shape[0]):
            row = np.where(allowed[layer], g[u], -np.inf) if allowed is not None else g[u]
            chosen = sorted(range(cfg.experts_per_layer), key=lambda s: (-row[s], s))[:k]
            for s in range(cfg.experts_per_layer):
                w1, b1, w2, b2 = model.expert(ExpertKey(layer, s)).arrays()
                out = act(h[u] @ w1 + b1) @ w2 + b2
                mixed[u] += (g[u, s] if s in chosen else 0.0) * out
        h = h + mixed if cfg.residual else mixed
    wh, bh = model.group("head").arrays()
    return h @ wh + bh


def test_top_k_route_examples():
    """Argmax, tie-break by lower index, and a full-sort oracle."""
    assert top_k_route([0.1, 0.7, 0.2], 1) == (1,)
    assert top_k_route([0.5, 0.5], 1) == (0,)
    rng = np.random.default_rng(0)
    for _ in range(50):
        row = rng.random(6)
        assert top_k_route(row, 2) == tuple(sorted(range(6), key=lambda i: (-row[i], i))[:2])


@pytest.mark.parametrize("k", [0, 4])
def test_top_k_route_invalid_k(k):
    """k outside [1, S] raises ConfigError."""
    with pytest.raises(ConfigError):
        top_k_route([0.2, 0.3, 0.5], k)


def test_model_config_rejects_k_above_s():
    """top_k > experts_per_layer is a config error."""
    with pytest.raises(ValueError):
        ModelConfig(experts_per_layer=2, top_k=3)


def test_two_experts_weighted_sum():
    """Gates (0.7, 0.3) over outputs [1,0] and [0,1] with k=2 give [0.7, 0.3]."""
    model = _fixed_gate_model([0.7, 0.3], [[1.0, 0.0], [0.0, 1.0]], k=2)
    mixed, scores, selected = moe_layer(Tensor(np.zeros((1, 2))), model, 0)
    np.testing.assert_allclose(mixed.data, [[0.7, 0.3]], atol=1e-12)
    np.testing.assert_allclose(scores, [[0.7, 0.3]], atol=1e-12)
    assert selected.tolist() == [[0, 1]]


def test_top_one_scales_single_expert():
    """k=1 with gates (0.9, 0.1) outputs expert 0 scaled by 0.9."""
    model = _fixed_gate_model([0.9, 0.1], [[2.0, -1.0], [5.0, 5.0]], k=1)
    mixed, _, selected = moe_layer(Tensor(np.zeros((3, 2))), model, 0)
    np.testing.assert_allclose(mixed.data, np.tile([1.8, -0.9], (3, 1)), atol=1e-12)
    assert selected.tolist() == [[0], [0], [0]]


@pytest.mark.parametrize("seed,k,activation", [(0, 1, "tanh"), (1, 2, "tanh"), (2, 2, "relu"), (3, 4, "tanh")])
def test_forward_matches_dense_oracle(seed, k, activation):
    """Sparse evaluation equals the dense all-experts oracle."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(num_layers=2, experts_per_layer=4, top_k=k, input_dim=3, hidden_dim=5,
                      expert_dim=4, output_dim=3, activation=activation)
    model = MoEModel.initialize(cfg, rng)
    x = rng.normal(size=(4, 3))
    logits, record = moe_forward(x, model)
    np.testing.assert_allclose(logits.data, _dense_oracle(model, x), atol=1e-12)
    np.testing.assert_allclose(record.scores.sum(axis=2), 1.0, atol=1e-10)
    assert all(sel.shape == (4, k) for sel in record.selected)


def test_override_restricts_routing_and_keeps_scores():
    """With an override only allowed experts are used; the record keeps unrestricted scores."""
    rng = np.random.default_rng(7)
    cfg = ModelConfig(num_layers=2, experts_per_layer=4, top_k=2, input_dim=3, hidden_dim=5,
                      expert_dim=4, output_dim=3)
    model = MoEModel.initialize(cfg, rng)
    x = rng.normal(size=(4, 3))
    override = {ExpertKey(0, 1), ExpertKey(0, 3), ExpertKey(1, 2)}
    allowed = np.zeros((2, 4), dtype=bool)
    for e in override:
        allowed[e.layer, e.index] = True

    logits, record = moe_forward(x, model, active_override=override)
    _, free_record = moe_forward(x, model)
    np.testing.assert_allclose(logits.data, _dense_oracle(model, x, allowed), atol=1e-12)
    np.testing.assert_allclose(record.scores[0], free_record.scores[0], atol=0)
    for layer, sel in enumerate(record.selected):
        assert set(np.unique(sel)) <= {e.index for e in override if e.layer == layer}
    assert record.selected[1].shape == (4, 1)


def test_override_missing_layer_is_coverage_error():
    """An override with no expert in some layer raises CoverageError."""
    model = MoEModel.initialize(ModelConfig(), np.random.default_rng(0))
    with pytest.raises(CoverageError):
        moe_forward(np.zeros((2, 16)), model, active_override={ExpertKey(0, 0)})


def test_per_token_routing():
    """Per-token batches route every token and pool to one output per sample."""
    cfg = ModelConfig(num_layers=1, experts_per_layer=3, input_dim=4, hidden_dim=6, expert_dim=5,
                      output_dim=2, routing_unit=RoutingUnit.PER_TOKEN)
    model = MoEModel.initialize(cfg, np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(3, 5, 4))
    logits, record = moe_forward(x, model)
    assert logits.shape == (3, 2)
    assert record.num_units == 15
    assert predict(model, x).shape == (3,)


def test_forward_input_errors():
    """Wrong widths raise DimensionError; empty batches raise InputError."""
    model = MoEModel.initialize(ModelConfig(), np.random.default_rng(0))
    with pytest.raises(DimensionError):
        moe_forward(np.zeros((2, 5)), model)
    with pytest.raises(InputError):
        moe_forward(np.zeros((0, 16)), model)


def test_clone_is_independent():
    """Mutating a clone leaves the original untouched."""
    model = MoEModel.initialize(ModelConfig(), np.random.default_rng(0))
    twin = model.clone()
    twin.group("head").tensors[0].data += 1.0
    assert not np.array_equal(model.group("head").arrays()[0], twin.group("head").arrays()[0])


def test_load_state_shape_mismatch():
    """Loading a tensor of the wrong shape raises DimensionError."""
    model = MoEModel.initialize(ModelConfig(), np.random.default_rng(0))
    with pytest.raises(DimensionError):
        model.load_state({"head": [np.zeros((2, 2)), np.zeros(4)]})
