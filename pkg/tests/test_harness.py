import csv
import json

import numpy as np
import pytest

from src.errors import ConfigError, InfeasibleClientError, InputError
from src.harness import (
    METRICS_COLUMNS,
    REFERENCE_MODE,
    apply_override,
    compare,
    convergence_round,
    evaluate,
    initial_model,
    resolve_budgets,
    robustness_summary,
    run_experiment,
    sweep,
    unconstrained_config,
)
from src.models import (
    AggregationMode,
    BudgetSpec,
    ExperimentConfig,
    MemorySampling,
    ModelConfig,
    SyntheticTaskSpec,
)
from src.moe import MoEModel
from src.wire import load_checkpoint

BASE = dict(
    model=ModelConfig(num_layers=2, experts_per_layer=4, input_dim=6, hidden_dim=8, expert_dim=8, output_dim=3),
    clients=3,
    rounds=2,
    batch_size=8,
    lr=0.05,
    data=SyntheticTaskSpec(num_classes=3, input_dim=6, samples_per_client=60, global_test_samples=60,
                           label_skew=0.5),
    seed=0,
)


def _config(**overrides):
    return ExperimentConfig(**{**BASE, **overrides})


def _rows(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def test_evaluate_constant_predictor():
    """A model that always predicts class 0 scores 0.25 on a balanced 4-class set."""
    model = MoEModel.initialize(ModelConfig(), np.random.default_rng(0))
    model.load_state({"head": [np.zeros((32, 4)), np.array([1.0, 0.0, 0.0, 0.0])]})
    x = np.random.default_rng(1).normal(size=(8, 16))
    assert evaluate(model, x, np.arange(8) % 4) == 0.25


def test_evaluate_empty_test_set():
    """Evaluation needs at least one sample."""
    model = MoEModel.initialize(ModelConfig(), np.random.default_rng(0))
    with pytest.raises(InputError):
        evaluate(model, np.zeros((0, 16)), np.zeros(0, dtype=int))


def test_zero_rounds_returns_initial_model(tmp_path):
    """With T=0 the checkpoint equals the initialisation."""
    cfg = _config(rounds=0)
    result = run_experiment(cfg, tmp_path)
    loaded, round_index = load_checkpoint(tmp_path / "checkpoint.json")
    assert round_index == 0
    for group in initial_model(cfg).groups:
        for a, b in zip(group.arrays(), loaded.group(group.id).arrays()):
            assert np.array_equal(a, b)
    assert [r["round"] for r in _rows(tmp_path / "metrics.csv")] == ["0"]
    assert result.accuracy_by_round[0][0] == 0


def test_metrics_schema_and_order(tmp_path):
    """Metrics rows follow (round, client) order with a global row per round."""
    run_experiment(_config(), tmp_path)
    with open(tmp_path / "metrics.csv", encoding="utf-8") as handle:
        assert handle.readline().strip() == ",".join(METRICS_COLUMNS)
    rows = _rows(tmp_path / "metrics.csv")
    assert [(r["round"], r["client"]) for r in rows] == [
        ("0", "global"),
        ("1", "0"), ("1", "1"), ("1", "2"), ("1", "global"),
        ("2", "0"), ("2", "1"), ("2", "2"), ("2", "global"),
    ]
    assert all(0.0 <= float(r["experts_activated_fraction"]) <= 1.0 for r in rows)
    assert all(float(r["wall_time_ms"]) == 0.0 for r in rows)
    for name in ("selection.csv", "importance.csv", "activation.csv", "checkpoint.json", "rounds.json"):
        assert (tmp_path / name).exists()
    assert len(_rows(tmp_path / "activation.csv")) == 2 * 3 * 2 * 4


def test_same_seed_gives_identical_outputs(tmp_path):
    """Two runs with one seed write byte-identical metrics and checkpoints, threads or not."""
    run_experiment(_config(), tmp_path / "a")
    run_experiment(_config(workers=3), tmp_path / "b")
    for name in ("metrics.csv", "selection.csv", "checkpoint.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_budget_audit_over_sampled_memory(tmp_path):
    """Every logged batch keeps its active experts within the client's budget."""
    cfg = _config(clients=4, rounds=3, memory_sampling=MemorySampling(low_gb=10.5, high_gb=16.0))
    budgets = resolve_budgets(cfg)
    run_experiment(cfg, tmp_path)
    rows = _rows(tmp_path / "selection.csv")
    assert rows
    for row in rows:
        assert int(row["active_size"]) <= int(row["budget"])
        assert int(row["budget"]) == budgets[int(row["client"])].max_active_experts


def test_budget_audit_over_full_run(tmp_path):
    """Over 30 rounds with half the clients constrained, no batch ever exceeds its budget."""
    cfg = _config(
        clients=4,
        rounds=30,
        eval_every=10,
        budgets=[BudgetSpec(max_active_experts=2), BudgetSpec(memory_gb=11.5), BudgetSpec(), BudgetSpec()],
    )
    budgets = resolve_budgets(cfg)
    assert [b.max_active_experts for b in budgets.values()] == [2, 3, 8, 8]
    result = run_experiment(cfg, tmp_path)
    rows = _rows(tmp_path / "selection.csv")
    assert {int(r["round"]) for r in rows} == set(range(1, 31))
    assert all(int(r["active_size"]) <= int(r["budget"]) for r in rows)
    assert result.failure_events == 0
    constrained = [r for r in rows if int(r["client"]) < 2]
    assert any(int(r["active_size"]) < int(r["union_size"]) for r in constrained)


def test_constrained_run_uses_less_compute(tmp_path):
    """Budget-limited selection uses at most 90% of the compute of unconstrained FedAvg."""
    limited = run_experiment(_config(budgets=[BudgetSpec(max_active_experts=2)] * 3), tmp_path / "limited")
    fedavg = _config()
    fedavg = apply_override(fedavg, "policy.mode", "fedavg")
    full = run_experiment(fedavg, tmp_path / "fedavg")
    assert limited.failure_events == 0
    assert full.failure_events == 0
    assert limited.compute_proxy <= 0.9 * full.compute_proxy


def test_training_improves_global_accuracy(tmp_path):
    """A few rounds of FedAvg on an IID task beat the untrained model."""
    cfg = _config(rounds=3, lr=0.1, data=BASE["data"].model_copy(update={
        "label_skew": 0.0, "samples_per_client": 200, "cluster_spread": 3.0, "noise_std": 1.0,
    }))
    cfg = apply_override(cfg, "policy.mode", "fedavg")
    result = run_experiment(cfg, tmp_path)
    assert result.final_accuracy > result.accuracy_by_round[0][1]


def test_resolve_budgets_sources():
    """Budgets come from counts, from memory, or default to every expert."""
    cfg = _config(budgets=[BudgetSpec(max_active_experts=3), BudgetSpec(memory_gb=11.0), BudgetSpec()])
    budgets = resolve_budgets(cfg)
    assert [b.max_active_experts for b in budgets.values()] == [3, 2, 8]
    assert budgets[1].memory_gb == 11.0


def test_resolve_budgets_names_infeasible_client():
    """A client without enough memory stops the run and is named."""
    cfg = _config(budgets=[BudgetSpec(), BudgetSpec(memory_gb=9.0), BudgetSpec()])
    with pytest.raises(InfeasibleClientError, match="client 1"):
        resolve_budgets(cfg)
    cfg = _config(budgets=[BudgetSpec(max_active_experts=1), BudgetSpec(), BudgetSpec()])
    with pytest.raises(InfeasibleClientError, match="client 0"):
        resolve_budgets(cfg)


def test_convergence_round():
    """First round reaching the given share of the final accuracy."""
    history = [(0, 0.25), (1, 0.5), (2, 0.8), (3, 0.82), (4, 0.84)]
    assert convergence_round(history, 0.95) == 2
    assert convergence_round(history, 1.0) == 4


def test_apply_override():
    """Dotted keys update nested sections and unknown keys are rejected."""
    cfg = apply_override(_config(), "importance.lambda", 0.8)
    assert cfg.importance.lambda_ == 0.8
    assert apply_override(cfg, "policy.mode", "random_drop").policy.mode == AggregationMode.RANDOM_DROP
    with pytest.raises(ConfigError):
        apply_override(cfg, "importance.gamma", 1.0)
    with pytest.raises(ValueError):
        apply_override(cfg, "importance.lambda", 2.0)


def test_sweep_writes_one_row_per_value(tmp_path):
    """A sweep runs every value and summarises it in sweep.csv."""
    rows = sweep(_config(rounds=1), "policy.tau", [0.0, 0.3], tmp_path)
    assert [r[1] for r in rows] == [0.0, 0.3]
    table = _rows(tmp_path / "sweep.csv")
    assert [r["value"] for r in table] == ["0.0", "0.3"]
    assert (tmp_path / "policy.tau=0.3" / "metrics.csv").exists()


def test_compare_writes_mode_seed_grid(tmp_path):
    """compare runs the unconstrained reference and then each (mode, seed) pair."""
    compare(_config(rounds=1), ["hfedmoe", "random_drop"], [0, 1], tmp_path)
    table = _rows(tmp_path / "compare.csv")
    assert [(r["mode"], r["seed"]) for r in table] == [
        (REFERENCE_MODE, "0"), (REFERENCE_MODE, "1"),
        ("hfedmoe", "0"), ("hfedmoe", "1"), ("random_drop", "0"), ("random_drop", "1"),
    ]
    assert all(float(r["accuracy_vs_reference"]) == 1.0 for r in table[:2])
    assert all(float(r["compute_vs_reference"]) == 1.0 for r in table[:2])


def test_compare_reference_is_unconstrained(tmp_path):
    """The reference arm drops every budget and runs plain FedAvg."""
    cfg = _config(rounds=1, budgets=[BudgetSpec(max_active_experts=2)] * 3)
    rows = compare(cfg, ["hfedmoe"], [0], tmp_path)
    written = json.loads((tmp_path / REFERENCE_MODE / "seed_0" / "config.json").read_text(encoding="utf-8"))
    assert written["budgets"] == [] and written["memory_sampling"] is None
    assert written["policy"]["mode"] == "fedavg"
    reference, limited = rows
    assert limited[7] == pytest.approx(limited[3] / reference[3])
    assert limited[7] <= 0.9


def test_unconstrained_config_keeps_the_task():
    """Only budgets and the aggregation mode change."""
    cfg = _config(memory_sampling=MemorySampling(low_gb=10.5, high_gb=16.0), seed=4)
    reference = unconstrained_config(cfg)
    assert reference.memory_sampling is None and reference.budgets == []
    assert reference.policy.mode == AggregationMode.FEDAVG
    assert reference.data == cfg.data and reference.model == cfg.model and reference.seed == 4


def test_robustness_summary():
    """Seed-averaged ratios against the reference, and seeds where the baseline is strictly lower."""
    rows = [
        [REFERENCE_MODE, 0, 0.80, 100, 0, 5, 1.0, 1.0],
        [REFERENCE_MODE, 1, 0.60, 100, 0, 5, 1.0, 1.0],
        ["hfedmoe", 0, 0.76, 80, 0, 5, 0.95, 0.8],
        ["hfedmoe", 1, 0.54, 90, 0, 5, 0.9, 0.9],
        ["random_drop", 0, 0.70, 80, 0, 5, 0.875, 0.8],
        ["random_drop", 1, 0.54, 80, 0, 5, 0.9, 0.8],
    ]
    summary = robustness_summary(rows)
    assert summary["accuracy_vs_reference"] == pytest.approx(0.65 / 0.70)
    assert summary["compute_vs_reference"] == pytest.approx(0.85)
    assert summary["baseline_lower_seeds"] == 1
    with pytest.raises(InputError):
        robustness_summary(rows[2:])
