"""Client-side local training and server-side sparsity-aware aggregation."""
import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.data import STREAM_RANDOM_DROP, STREAM_SHUFFLE, ClientDataset, seed_stream
from src.errors import CoverageError, DegenerateRoundError, InputError, ProtocolError
from src.importance import ImportanceReport, RunningImportance, build_report
from src.models import (
    AggregationMode,
    AggregationPolicy,
    ClientBudget,
    ExperimentConfig,
    ImportanceConfig,
    RoundSummary,
    SelectionConfig,
)
from src.moe import EMBED_GROUP, HEAD_GROUP, ExpertKey, MoEModel, RoutingRecord, moe_forward
from src.selection import (
    SelectionResult,
    gradient_mask,
    route_union,
    select_active,
    select_all,
    select_random,
)
from src.tensor import backward, cross_entropy, sgd_step

logger = logging.getLogger(__name__)

SHARED_GROUPS = (EMBED_GROUP, HEAD_GROUP)


@dataclass(frozen=True)
class UpdatePackage:
    client_id: int
    round: int
    sample_count: int
    usage: Dict[ExpertKey, float]
    dominant_set: FrozenSet[ExpertKey]
    preference_sum: float
    gating: Dict[int, List[np.ndarray]]
    shared: Dict[str, List[np.ndarray]]
    active_experts: Dict[ExpertKey, List[np.ndarray]]


@dataclass
class ClientState:
    client_id: int
    dataset: ClientDataset
    budget: ClientBudget
    model: Optional[MoEModel] = None
    usage: Dict[ExpertKey, float] = field(default_factory=dict)
    importance: Dict[ExpertKey, float] = field(default_factory=dict)


@dataclass(frozen=True)
class LocalTrainingConfig:
    epochs: int = 1
    batch_size: int = 8
    lr: float = 1e-4
    importance: ImportanceConfig = field(default_factory=ImportanceConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    policy: AggregationPolicy = field(default_factory=AggregationPolicy)
    seed: int = 0

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig) -> "LocalTrainingConfig":
        return cls(
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            importance=cfg.importance,
            selection=cfg.selection,
            policy=cfg.policy,
            seed=cfg.seed,
        )


@dataclass(frozen=True)
class SelectionLogEntry:
    round: int
    client: int
    batch: int
    union_size: int
    active_size: int
    budget: int
    objective_value: float
    status: str

    def to_row(self) -> list:
        return [self.round, self.client, self.batch, self.union_size, self.active_size,
                self.budget, self.objective_value, self.status]


@dataclass
class ClientRoundResult:
    package: UpdatePackage
    loss: float
    train_accuracy: float
    failure_events: int
    compute_proxy: int
    activated_fraction: float
    selection_log: List[SelectionLogEntry]
    activation_counts: np.ndarray
    last_report: Optional[ImportanceReport]
    records: List[RoutingRecord] = field(default_factory=list)


def _choose(
    policy: AggregationPolicy,
    sort_key: str,
    union: FrozenSet[ExpertKey],
    report: ImportanceReport,
    budget: ClientBudget,
    drop_rng: np.random.Generator,
) -> SelectionResult:
    if policy.mode == AggregationMode.FEDAVG:
        return select_all(union, report, budget)
    if policy.mode == AggregationMode.RANDOM_DROP:
        return select_random(union, report, budget, drop_rng)
    if policy.mode == AggregationMode.FREQ_PRUNE:
        return select_active(union, report, budget, sort_key="cumulative")
    return select_active(union, report, budget, sort_key=sort_key)


def compute_usage(records: Sequence[RoutingRecord], e: ExpertKey) -> float:
    """Mean gate score of `e` over every routing unit in `records`."""
    units = sum(r.num_units for r in records)
    if units == 0:
        raise InputError("compute_usage: no local samples")
    return float(sum(r.expert_scores(e).sum() for r in records) / units)


def expert_preference(u: float, s: float) -> float:
    return u * s


def routing_consistency(s_c: Iterable[ExpertKey], s_global: Iterable[ExpertKey]) -> float:
    """Share of the global dominant set that client c also finds dominant."""
    s_global = frozenset(s_global)
    if not s_global:
        raise DegenerateRoundError("routing_consistency: global dominant set is empty")
    return len(frozenset(s_c) & s_global) / len(s_global)


def client_round(
    state: ClientState,
    global_model: MoEModel,
    train_cfg: LocalTrainingConfig,
    round_index: int = 0,
    keep_records: bool = False,
) -> ClientRoundResult:
    """Local fine-tuning of one client followed by building its upload."""
    if train_cfg.epochs < 1 or train_cfg.batch_size < 1:
        raise InputError("client_round: epochs and batch_size must be >= 1")
    model = global_model.clone()
    config = model.config
    data = state.dataset
    n = data.sample_count
    shuffle_rng = seed_stream(train_cfg.seed, STREAM_SHUFFLE, state.client_id, round_index)
    drop_rng = seed_stream(train_cfg.seed, STREAM_RANDOM_DROP, state.client_id, round_index)

    usage_sum = np.zeros((config.num_layers, config.experts_per_layer))
    units_seen = 0
    running = RunningImportance(config.num_layers, config.experts_per_layer)
    activation_counts = np.zeros((config.num_layers, config.experts_per_layer), dtype=np.int64)
    log: List[SelectionLogEntry] = []
    records: List[RoutingRecord] = []
    losses, correct, seen = [], 0, 0
    failures = compute_proxy = 0
    active_fractions = []
    report: Optional[ImportanceReport] = None
    batch_index = 0

    for epoch in range(train_cfg.epochs):
        final_epoch = epoch == train_cfg.epochs - 1
        order = shuffle_rng.permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            logits, record = moe_forward(data.x[idx], model)
            loss = cross_entropy(logits, data.y[idx])
            report = build_report(record, train_cfg.importance)
            losses.append(loss.scalar)
            correct += int((np.argmax(logits.data, axis=1) == data.y[idx]).sum())
            seen += idx.shape[0]
            if final_epoch:
                usage_sum += record.scores.sum(axis=1)
                units_seen += record.num_units
                running.add(report)
                if keep_records:
                    records.append(record)

            union = route_union(record)
            try:
                result = _choose(train_cfg.policy, train_cfg.selection.sort_key, union,
                                 report, state.budget, drop_rng)
            except CoverageError as exc:
                failures += 1
                logger.debug(f"client {state.client_id} round {round_index} batch {batch_index} skipped: {exc}")
                log.append(SelectionLogEntry(round_index, state.client_id, batch_index, len(union), 0,
                                             state.budget.max_active_experts, 0.0, "failed"))
                batch_index += 1
                continue

            grads = backward(loss, gradient_mask(result, config))
            sgd_step(model.groups, grads, train_cfg.lr)
            compute_proxy += len(result.active)
            active_fractions.append(len(result.active) / config.total_experts)
            for e in result.active:
                activation_counts[e.layer, e.index] += 1
            log.append(SelectionLogEntry(round_index, state.client_id, batch_index, len(union),
                                         len(result.active), state.budget.max_active_experts,
                                         result.objective_value, "ok"))
            logger.debug(f"client {state.client_id} batch {batch_index}: {len(result.active)}/{len(union)} experts")
            batch_index += 1

    if failures:
        logger.warning(f"client {state.client_id} round {round_index}: {failures} batches could not train within budget")
    if units_seen == 0:
        raise InputError(f"client {state.client_id} has no local samples")
    usage_table = usage_sum / units_seen
    importance = running.mean()
    tau = train_cfg.policy.effective_tau
    usage = {e: float(usage_table[e.layer, e.index]) for e in model.expert_keys()}
    dominant = frozenset(e for e, u in usage.items() if u >= tau)
    preference_sum = float(sum(
        expert_preference(usage[e], float(importance[e.layer, e.index])) for e in sorted(dominant)
    ))

    state.model = model
    state.usage = usage
    state.importance = running.as_dict()

    package = UpdatePackage(
        client_id=state.client_id,
        round=round_index,
        sample_count=n,
        usage=usage,
        dominant_set=dominant,
        preference_sum=preference_sum,
        gating={layer: [a.copy() for a in model.gating(layer).arrays()] for layer in range(config.num_layers)},
        shared={gid: [a.copy() for a in model.group(gid).arrays()] for gid in SHARED_GROUPS},
        active_experts={e: [a.copy() for a in model.expert(e).arrays()] for e in sorted(dominant)},
    )
    return ClientRoundResult(
        package=package,
        loss=float(np.mean(losses)),
        train_accuracy=correct / seen,
        failure_events=failures,
        compute_proxy=compute_proxy,
        activated_fraction=float(np.mean(active_fractions)) if active_fractions else 0.0,
        selection_log=log,
        activation_counts=activation_counts,
        last_report=report,
        records=records,
    )


def _weighted_sum(weights: Sequence[float], arrays_per_client: Sequence[List[np.ndarray]],
                  reference: List[np.ndarray], what: str) -> List[np.ndarray]:
    out: Optional[List[np.ndarray]] = None
    for w, arrays in zip(weights, arrays_per_client):
        if len(arrays) != len(reference) or any(a.shape != r.shape for a, r in zip(arrays, reference)):
            raise ProtocolError(f"{what}: uploaded tensor shapes do not match the global model")
        term = [w * a for a in arrays]
        out = term if out is None else [o + t for o, t in zip(out, term)]
    return out


def expert_participants(packages: Sequence[UpdatePackage], e: ExpertKey, tau: float) -> List[UpdatePackage]:
    """Clients whose usage of `e` reaches `tau` and who uploaded it."""
    return [p for p in packages if p.usage.get(e, 0.0) >= tau and e in p.active_experts]


def aggregate_experts(
    packages: Sequence[UpdatePackage], global_model: MoEModel, tau: float
) -> Dict[ExpertKey, List[np.ndarray]]:
    """Sample-weighted mean of each expert over the clients that actively trained it.

    Experts no client trained keep their global parameters bitwise.
    """
    if not packages:
        raise InputError("aggregate_experts: no packages")
    result = {}
    for e in global_model.expert_keys():
        reference = global_model.expert(e).arrays()
        active = expert_participants(packages, e, tau)
        if not active:
            result[e] = [a.copy() for a in reference]
            continue
        total = sum(p.sample_count for p in active)
        weights = [p.sample_count / total for p in active]
        result[e] = _weighted_sum(weights, [p.active_experts[e] for p in active], reference, e.group_id)
    return result


def gating_weights(packages: Sequence[UpdatePackage], weighting: str = "importance") -> List[float]:
    """Normalised per-client weights for the gating networks."""
    if not packages:
        raise InputError("gating_weights: no packages")
    if weighting == "importance":
        s_global = frozenset().union(*(p.dominant_set for p in packages))
        if s_global:
            raw = [p.preference_sum / len(s_global) for p in packages]
            total = sum(raw)
            if total > 0.0:
                return [a / total for a in raw]
        logger.warning("all preference sums are zero; gating falls back to sample-count weighting")
    total = sum(p.sample_count for p in packages)
    return [p.sample_count / total for p in packages]


def aggregate_gating(
    packages: Sequence[UpdatePackage],
    global_gating: Dict[int, List[np.ndarray]],
    weighting: str = "importance",
) -> Tuple[Dict[int, List[np.ndarray]], List[float]]:
    """Convex combination of client gating networks; returns (params, weights)."""
    weights = gating_weights(packages, weighting)
    params = {
        layer: _weighted_sum(weights, [p.gating[layer] for p in packages], reference, f"gate.{layer}")
        for layer, reference in global_gating.items()
    }
    return params, weights


def aggregate_shared(packages: Sequence[UpdatePackage], global_model: MoEModel) -> Dict[str, List[np.ndarray]]:
    total = sum(p.sample_count for p in packages)
    weights = [p.sample_count / total for p in packages]
    return {
        gid: _weighted_sum(weights, [p.shared[gid] for p in packages], global_model.group(gid).arrays(), gid)
        for gid in SHARED_GROUPS
    }


@dataclass
class FederationState:
    round: int
    model: MoEModel
    budgets: Dict[int, ClientBudget]
    policy: AggregationPolicy
    last_summary: Optional[RoundSummary] = None


def server_round(state: FederationState, packages: Sequence[UpdatePackage]) -> FederationState:
    """Aggregate one round of uploads into the next global model."""
    if not packages:
        logger.warning(f"round {state.round}: no packages received, global model unchanged")
        return FederationState(state.round + 1, state.model.clone(), state.budgets, state.policy)

    packages = sorted(packages, key=lambda p: p.client_id)
    model = state.model
    tau = state.policy.effective_tau
    weighting = "samples" if state.policy.mode == AggregationMode.FEDAVG else "importance"

    experts = aggregate_experts(packages, model, tau)
    gating, alpha = aggregate_gating(
        packages, {layer: model.gating(layer).arrays() for layer in range(model.config.num_layers)}, weighting
    )
    shared = aggregate_shared(packages, model)

    new_model = model.clone()
    new_state = {e.group_id: arrays for e, arrays in experts.items()}
    new_state.update({f"gate.{layer}": arrays for layer, arrays in gating.items()})
    new_state.update(shared)
    new_model.load_state(new_state)

    unchanged = sum(1 for e in model.expert_keys() if not expert_participants(packages, e, tau))
    s_global = frozenset().union(*(p.dominant_set for p in packages))
    consistency = [routing_consistency(p.dominant_set, s_global) if s_global else 0.0 for p in packages]
    summary = RoundSummary(
        round=state.round,
        clients=[p.client_id for p in packages],
        experts_aggregated=model.config.total_experts - unchanged,
        experts_unchanged=unchanged,
        alpha=alpha,
        consistency=consistency,
    )
    logger.info(
        f"round {state.round}: aggregated {summary.experts_aggregated} experts, "
        f"{unchanged} unchanged, alpha={[round(a, 4) for a in alpha]}, "
        f"r={[round(r, 4) for r in consistency]}"
    )
    return FederationState(state.round + 1, new_model, state.budgets, state.policy, summary)
