from pathlib import Path

import numpy as np
import pytest

from src.config import load_experiment_config
from src.data import _centres, generate_test_set
from src.harness import compare, robustness_summary

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.json"


def test_desk_task_is_learnable_but_not_separable():
    """Even the true cluster centres misclassify a good share of the held-out set."""
    cfg = load_experiment_config(DESK)
    centres = _centres(cfg.data, cfg.seed)
    x, y = generate_test_set(cfg.data, cfg.seed)
    flat = centres.reshape(-1, cfg.data.input_dim)
    owner = np.repeat(np.arange(cfg.data.num_classes), cfg.data.clusters_per_client)
    distances = ((x[:, None, :] - flat[None, :, :]) ** 2).sum(axis=2)
    accuracy = float((owner[distances.argmin(axis=1)] == y).mean())
    assert 0.35 < accuracy < 0.9


def test_desk_budgets_constrain_half_the_clients():
    """Two of four clients get L+2 experts, the rest are unconstrained."""
    cfg = load_experiment_config(DESK)
    limits = [b.max_active_experts for b in cfg.budgets]
    assert limits == [cfg.model.num_layers + 2] * 2 + [None] * 2


@pytest.mark.slow
def test_desk_robustness_over_five_seeds(tmp_path):
    """Budget-limited selection keeps 90% of unconstrained accuracy at lower compute, and beats random drop."""
    cfg = load_experiment_config(DESK)
    rows = compare(cfg, ["hfedmoe", "random_drop"], [0, 1, 2, 3, 4], tmp_path)
    summary = robustness_summary(rows)
    assert summary["accuracy_vs_reference"] >= 0.9
    assert summary["compute_vs_reference"] <= 0.9
    assert summary["baseline_lower_seeds"] >= 4
