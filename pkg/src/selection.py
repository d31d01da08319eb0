"""Budget-constrained choice of the experts that take part in backward."""
import logging
import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional

import numpy as np

from src.errors import CoverageError, InfeasibleClientError
from src.importance import ImportanceReport
from src.models import ClientBudget, ExpertCostModel, ModelConfig
from src.moe import ExpertKey, RoutingRecord

logger = logging.getLogger(__name__)

SELECTION_COLUMNS = ["round", "client", "batch", "union_size", "active_size", "budget", "objective_value", "status"]


@dataclass(frozen=True)
class SelectionResult:
    union: FrozenSet[ExpertKey]
    active: FrozenSet[ExpertKey]
    objective_value: float


def route_union(record: RoutingRecord) -> FrozenSet[ExpertKey]:
    """Every expert some unit of the batch was routed to, over all layers."""
    keys = set()
    for layer, selected in enumerate(record.selected):
        keys.update(ExpertKey(layer, int(s)) for s in np.unique(selected))
    return frozenset(keys)


def _objective(keys: Iterable[ExpertKey], report: ImportanceReport) -> float:
    return math.fsum(report.score(key, "ib") for key in keys)


def _rank(union: Iterable[ExpertKey], report: ImportanceReport, sort_key: str) -> List[ExpertKey]:
    return sorted(union, key=lambda e: (-report.score(e, sort_key), e.layer, e.index))


def _layers(union: Iterable[ExpertKey]) -> List[int]:
    return sorted({e.layer for e in union})


def select_active(
    union: Iterable[ExpertKey],
    report: ImportanceReport,
    budget: ClientBudget,
    sort_key: str = "ib",
) -> SelectionResult:
    """Pick at most `budget` experts from the union, best per layer first.

    The best expert of every layer present in the union is taken first; the rest
    of the budget goes to the highest-ranked remaining experts regardless of
    layer. Ties are broken by (layer, index). Under the `ib` key, experts with a
    negative score are never used to fill the budget.
    """
    union = frozenset(union)
    layers = _layers(union)
    if budget.max_active_experts < len(layers):
        raise CoverageError(
            f"budget {budget.max_active_experts} cannot cover {len(layers)} routed layers"
        )
    ranked = _rank(union, report, sort_key)

    active: List[ExpertKey] = []
    covered = set()
    for e in ranked:
        if e.layer not in covered:
            covered.add(e.layer)
            active.append(e)
    chosen = set(active)
    for e in ranked:
        if len(active) >= budget.max_active_experts:
            break
        if e in chosen:
            continue
        if sort_key == "ib" and report.score(e, "ib") < 0.0:
            break
        active.append(e)
        chosen.add(e)
    return SelectionResult(union=union, active=frozenset(active), objective_value=_objective(active, report))


def select_random(
    union: Iterable[ExpertKey],
    report: ImportanceReport,
    budget: ClientBudget,
    rng: np.random.Generator,
) -> SelectionResult:
    """Uniformly random coverage-feasible subset of the same size as select_active."""
    union = frozenset(union)
    layers = _layers(union)
    if budget.max_active_experts < len(layers):
        raise CoverageError(
            f"budget {budget.max_active_experts} cannot cover {len(layers)} routed layers"
        )
    ordered = sorted(union)
    active = []
    for layer in layers:
        members = [e for e in ordered if e.layer == layer]
        active.append(members[int(rng.integers(len(members)))])
    rest = [e for e in ordered if e not in set(active)]
    extra = min(budget.max_active_experts, len(union)) - len(active)
    if extra > 0:
        picks = rng.choice(len(rest), size=extra, replace=False)
        active.extend(rest[int(i)] for i in sorted(picks))
    return SelectionResult(union=union, active=frozenset(active), objective_value=_objective(active, report))


def select_all(union: Iterable[ExpertKey], report: ImportanceReport, budget: ClientBudget) -> SelectionResult:
    """Plain training: every routed expert, or failure when that exceeds the budget."""
    union = frozenset(union)
    if len(union) > budget.max_active_experts:
        raise CoverageError(
            f"{len(union)} routed experts exceed the budget of {budget.max_active_experts}"
        )
    return SelectionResult(union=union, active=union, objective_value=_objective(union, report))


def gradient_mask(result: SelectionResult, model: ModelConfig) -> FrozenSet[str]:
    """Group ids of every expert outside the active set; gating and shared layers stay trainable."""
    return frozenset(
        ExpertKey(layer, s).group_id
        for layer in range(model.num_layers)
        for s in range(model.experts_per_layer)
        if ExpertKey(layer, s) not in result.active
    )


def memory_to_budget(memory_gb: float, cost_model: ExpertCostModel, model: ModelConfig) -> int:
    """Number of experts a device with `memory_gb` can update per batch."""
    if memory_gb <= cost_model.base_gb:
        raise InfeasibleClientError(
            f"{memory_gb} GB does not exceed the base cost of {cost_model.base_gb} GB"
        )
    count = math.floor((memory_gb - cost_model.base_gb) / cost_model.per_expert_gb)
    return max(model.num_layers, min(count, model.total_experts))
