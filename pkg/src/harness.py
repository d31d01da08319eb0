"""Experiment orchestration: budgets, rounds, evaluation and CSV outputs."""
import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.data import STREAM_BUDGET, STREAM_INIT, ClientDataset, generate_clients, generate_test_set, seed_stream
from src.errors import ConfigError, InfeasibleClientError, InputError
from src.federation import (
    ClientRoundResult,
    ClientState,
    FederationState,
    LocalTrainingConfig,
    client_round,
    server_round,
)
from src.importance import REPORT_COLUMNS
from src.models import AggregationMode, ClientBudget, ExperimentConfig, MetricsRow, RoundSummary
from src.moe import MoEModel, moe_forward
from src.selection import SELECTION_COLUMNS, memory_to_budget
from src.tensor import cross_entropy
from src.wire import save_checkpoint, save_package

logger = logging.getLogger(__name__)

METRICS_COLUMNS = list(MetricsRow.model_fields)
ACTIVATION_COLUMNS = ["round", "client", "layer", "expert", "batches_active"]
SWEEP_COLUMNS = ["param", "value", "final_accuracy", "convergence_round", "compute_proxy", "failure_events"]
COMPARE_COLUMNS = [
    "mode", "seed", "final_accuracy", "compute_proxy", "failure_events", "convergence_round",
    "accuracy_vs_reference", "compute_vs_reference",
]

# FedAvg with every client unconstrained; compare always runs it as the reference arm
REFERENCE_MODE = "fedavg_unconstrained"

EVAL_CHUNK = 512


@dataclass
class ExperimentResult:
    out_dir: Path
    model: MoEModel
    accuracy_by_round: List[Tuple[int, float]]
    compute_proxy: int
    failure_events: int
    summaries: List[RoundSummary] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.accuracy_by_round[-1][1]

    def convergence_round(self, fraction: float) -> int:
        return convergence_round(self.accuracy_by_round, fraction)


def _check_test_set(x: np.ndarray, y: np.ndarray) -> None:
    if len(y) == 0:
        raise InputError("evaluation needs a nonempty test set")
    if len(x) != len(y):
        raise InputError(f"{len(x)} test inputs for {len(y)} labels")


def evaluate(model: MoEModel, x: np.ndarray, y: np.ndarray) -> float:
    """Fraction of test samples whose argmax prediction equals the label."""
    return evaluate_with_loss(model, x, y)[1]


def evaluate_with_loss(model: MoEModel, x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    """(mean cross-entropy, accuracy) of `model` on a test set."""
    _check_test_set(x, y)
    loss_sum, correct = 0.0, 0
    for start in range(0, len(y), EVAL_CHUNK):
        xs, ys = x[start:start + EVAL_CHUNK], y[start:start + EVAL_CHUNK]
        logits, _ = moe_forward(xs, model)
        loss_sum += cross_entropy(logits, ys).scalar * len(ys)
        correct += int((np.argmax(logits.data, axis=1) == ys).sum())
    return loss_sum / len(y), correct / len(y)


def convergence_round(accuracy_by_round: Sequence[Tuple[int, float]], fraction: float) -> int:
    """First round whose accuracy reaches `fraction` of the final one."""
    if not accuracy_by_round:
        raise InputError("convergence_round: no evaluations")
    target = fraction * accuracy_by_round[-1][1]
    for round_index, accuracy in accuracy_by_round:
        if accuracy >= target:
            return round_index
    return accuracy_by_round[-1][0]


def resolve_budgets(cfg: ExperimentConfig) -> Dict[int, ClientBudget]:
    """Per-client expert budgets from explicit specs, sampled memory, or none."""
    model = cfg.model
    budgets = {}
    if cfg.budgets:
        specs = [(c, spec.max_active_experts, spec.memory_gb) for c, spec in enumerate(cfg.budgets)]
    elif cfg.memory_sampling is not None:
        rng = seed_stream(cfg.seed, STREAM_BUDGET)
        memory = rng.uniform(cfg.memory_sampling.low_gb, cfg.memory_sampling.high_gb, size=cfg.clients)
        specs = [(c, None, float(memory[c])) for c in range(cfg.clients)]
    else:
        specs = [(c, None, None) for c in range(cfg.clients)]

    for c, count, memory_gb in specs:
        if memory_gb is not None:
            try:
                count = memory_to_budget(memory_gb, cfg.cost, model)
            except InfeasibleClientError as exc:
                raise InfeasibleClientError(f"client {c}: {exc}") from exc
        if count is None:
            count = model.total_experts
        budget = ClientBudget(max_active_experts=count, memory_gb=memory_gb)
        try:
            budget.check_covers(model)
        except ConfigError as exc:
            raise InfeasibleClientError(f"client {c}: {exc}") from exc
        budgets[c] = budget
    constrained = sum(1 for b in budgets.values() if b.max_active_experts < model.total_experts)
    logger.info(f"budgets: {[b.max_active_experts for b in budgets.values()]} ({constrained} constrained)")
    return budgets


class CsvSink:
    """Single writer for every CSV an experiment produces."""

    def __init__(self, out_dir: Path, tables: Dict[str, List[str]]):
        self._files = {}
        self._writers = {}
        for name, columns in tables.items():
            handle = open(out_dir / f"{name}.csv", "w", newline="", encoding="utf-8")
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(columns)
            self._files[name] = handle
            self._writers[name] = writer

    def write(self, name: str, rows: Sequence[Sequence]) -> None:
        self._writers[name].writerows(rows)

    def close(self) -> None:
        for handle in self._files.values():
            handle.close()

    def __enter__(self) -> "CsvSink":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _metrics_row(row: MetricsRow) -> list:
    return [getattr(row, name) for name in METRICS_COLUMNS]


def _client_row(round_index: int, client: ClientState, result: ClientRoundResult, wall_ms: float) -> MetricsRow:
    data = client.dataset
    if data.test_y.shape[0] > 0:
        accuracy = evaluate(client.model, data.test_x, data.test_y)
    else:
        accuracy = result.train_accuracy
    return MetricsRow(
        round=round_index,
        client=str(client.client_id),
        loss=result.loss,
        accuracy=accuracy,
        experts_activated_fraction=result.activated_fraction,
        failure_events=result.failure_events,
        wall_time_ms=wall_ms,
        compute_proxy=result.compute_proxy,
    )


def _activation_rows(round_index: int, result: ClientRoundResult) -> List[list]:
    counts = result.activation_counts
    return [
        [round_index, result.package.client_id, layer, s, int(counts[layer, s])]
        for layer in range(counts.shape[0])
        for s in range(counts.shape[1])
    ]


def build_clients(cfg: ExperimentConfig, budgets: Dict[int, ClientBudget]) -> List[ClientState]:
    datasets: List[ClientDataset] = generate_clients(cfg.data, cfg.clients, cfg.seed)
    return [ClientState(client_id=d.client_id, dataset=d, budget=budgets[d.client_id]) for d in datasets]


def initial_model(cfg: ExperimentConfig) -> MoEModel:
    return MoEModel.initialize(cfg.model, seed_stream(cfg.seed, STREAM_INIT))


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: Union[str, Path],
    package_dir: Optional[Union[str, Path]] = None,
) -> ExperimentResult:
    """Run `cfg.rounds` federated rounds and write metrics plus the final checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.model_dump_json(indent=2, by_alias=True), encoding="utf-8")

    budgets = resolve_budgets(cfg)
    clients = build_clients(cfg, budgets)
    test_x, test_y = generate_test_set(cfg.data, cfg.seed)
    train_cfg = LocalTrainingConfig.from_experiment(cfg)
    state = FederationState(round=1, model=initial_model(cfg), budgets=budgets, policy=cfg.policy)

    tables = {
        "metrics": METRICS_COLUMNS,
        "selection": SELECTION_COLUMNS,
        "importance": REPORT_COLUMNS,
        "activation": ACTIVATION_COLUMNS,
    }
    accuracy_by_round: List[Tuple[int, float]] = []
    summaries: List[RoundSummary] = []
    total_proxy = total_failures = 0
    logger.info(
        f"experiment: {cfg.clients} clients, {cfg.rounds} rounds, mode={cfg.policy.mode.value}, seed={cfg.seed}"
    )

    with CsvSink(out_dir, tables) as sink, ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        loss, accuracy = evaluate_with_loss(state.model, test_x, test_y)
        accuracy_by_round.append((0, accuracy))
        sink.write("metrics", [_metrics_row(MetricsRow(
            round=0, client="global", loss=loss, accuracy=accuracy, experts_activated_fraction=0.0,
            failure_events=0, wall_time_ms=0.0, compute_proxy=0,
        ))])

        for round_index in range(1, cfg.rounds + 1):
            logger.info(f"round {round_index}/{cfg.rounds} started")
            global_model = state.model

            def train(client: ClientState) -> Tuple[ClientRoundResult, float]:
                started = time.perf_counter()
                result = client_round(client, global_model, train_cfg, round_index)
                return result, (time.perf_counter() - started) * 1000.0

            outcomes = list(pool.map(train, clients))
            round_rows = []
            for client, (result, wall_ms) in zip(clients, outcomes):
                logger.info(
                    f"client {client.client_id}: loss={result.loss:.4f} failures={result.failure_events} "
                    f"proxy={result.compute_proxy} wall={wall_ms:.1f}ms"
                )
                row = _client_row(round_index, client, result, wall_ms if cfg.record_wall_time else 0.0)
                round_rows.append(row)
                sink.write("selection", [entry.to_row() for entry in result.selection_log])
                if result.last_report is not None:
                    sink.write("importance", result.last_report.to_rows(round_index, client.client_id))
                sink.write("activation", _activation_rows(round_index, result))
                if package_dir is not None:
                    save_package(result.package, package_dir)

            state = server_round(state, [result.package for result, _ in outcomes])
            if state.last_summary is not None:
                summaries.append(state.last_summary)

            round_proxy = sum(r.compute_proxy for r, _ in outcomes)
            round_failures = sum(r.failure_events for r, _ in outcomes)
            total_proxy += round_proxy
            total_failures += round_failures
            if round_index % cfg.eval_every == 0 or round_index == cfg.rounds:
                loss, accuracy = evaluate_with_loss(state.model, test_x, test_y)
                accuracy_by_round.append((round_index, accuracy))
                round_rows.append(MetricsRow(
                    round=round_index,
                    client="global",
                    loss=loss,
                    accuracy=accuracy,
                    experts_activated_fraction=float(np.mean([r.activated_fraction for r, _ in outcomes])),
                    failure_events=round_failures,
                    wall_time_ms=sum(w for _, w in outcomes) if cfg.record_wall_time else 0.0,
                    compute_proxy=round_proxy,
                ))
                logger.info(f"round {round_index}: global accuracy={accuracy:.4f} loss={loss:.4f}")
            sink.write("metrics", [_metrics_row(row) for row in round_rows])

    save_checkpoint(state.model, out_dir / "checkpoint.json", round_index=cfg.rounds)
    (out_dir / "rounds.json").write_text(
        json.dumps([s.model_dump() for s in summaries], indent=2), encoding="utf-8"
    )
    logger.info(f"experiment finished: accuracy={accuracy_by_round[-1][1]:.4f}, outputs in {out_dir}")
    return ExperimentResult(
        out_dir=out_dir,
        model=state.model,
        accuracy_by_round=accuracy_by_round,
        compute_proxy=total_proxy,
        failure_events=total_failures,
        summaries=summaries,
    )


def parse_value(text: str):
    """Interpret a CLI value as JSON when possible, else as a plain string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: ExperimentConfig, dotted: str, value) -> ExperimentConfig:
    """Copy of `cfg` with the dotted key (e.g. importance.lambda) set to `value`."""
    data = cfg.model_dump(mode="json", by_alias=True)
    node = data
    *parents, leaf = dotted.split(".")
    for part in parents:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config section {part!r} in {dotted!r}")
        node = node[part]
    if leaf not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[leaf] = value
    return ExperimentConfig.model_validate(data)


def _write_table(path: Path, columns: List[str], rows: List[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def sweep(cfg: ExperimentConfig, param: str, values: Sequence, out_dir: Union[str, Path]) -> List[list]:
    """One experiment per value of `param`; writes sweep.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = [(value, apply_override(cfg, param, value)) for value in values]
    rows = []
    for value, run_cfg in runs:
        logger.info(f"sweep {param}={value}")
        result = run_experiment(run_cfg, out_dir / f"{param}={value}")
        rows.append([param, value, result.final_accuracy, result.convergence_round(run_cfg.convergence_fraction),
                     result.compute_proxy, result.failure_events])
    _write_table(out_dir / "sweep.csv", SWEEP_COLUMNS, rows)
    return rows


def unconstrained_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Copy of `cfg` running plain FedAvg with no client budgets."""
    data = cfg.model_dump(mode="json", by_alias=True)
    data["budgets"] = []
    data["memory_sampling"] = None
    data["policy"]["mode"] = AggregationMode.FEDAVG.value
    return ExperimentConfig.model_validate(data)


def _ratio(value: float, reference: float) -> float:
    return value / reference if reference else 0.0


def compare(
    cfg: ExperimentConfig, modes: Sequence[str], seeds: Sequence[int], out_dir: Union[str, Path]
) -> List[list]:
    """Every (mode, seed) pair on the same budgets, plus the unconstrained FedAvg reference; writes compare.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    modes = [REFERENCE_MODE] + [m for m in modes if m != REFERENCE_MODE]
    references: Dict[int, ExperimentResult] = {}
    rows = []
    for mode in modes:
        for seed in seeds:
            base = unconstrained_config(cfg) if mode == REFERENCE_MODE else apply_override(cfg, "policy.mode", mode)
            run_cfg = apply_override(base, "seed", seed)
            logger.info(f"compare mode={mode} seed={seed}")
            result = run_experiment(run_cfg, out_dir / mode / f"seed_{seed}")
            if mode == REFERENCE_MODE:
                references[seed] = result
            reference = references[seed]
            rows.append([
                mode, seed, result.final_accuracy, result.compute_proxy, result.failure_events,
                result.convergence_round(run_cfg.convergence_fraction),
                _ratio(result.final_accuracy, reference.final_accuracy),
                _ratio(result.compute_proxy, reference.compute_proxy),
            ])
    _write_table(out_dir / "compare.csv", COMPARE_COLUMNS, rows)
    return rows


def robustness_summary(rows: Sequence[list], mode: str = "hfedmoe", baseline: str = "random_drop") -> Dict[str, float]:
    """Seed-averaged ratios of `mode` to the reference, and how often `baseline` scored strictly lower."""
    by_mode: Dict[str, Dict[int, list]] = {}
    for row in rows:
        by_mode.setdefault(row[0], {})[row[1]] = row
    if mode not in by_mode or REFERENCE_MODE not in by_mode:
        raise InputError(f"robustness_summary needs rows for {mode!r} and {REFERENCE_MODE!r}")
    seeds = sorted(by_mode[mode])
    reference_accuracy = float(np.mean([by_mode[REFERENCE_MODE][s][2] for s in seeds]))
    summary = {
        "seeds": len(seeds),
        "accuracy_vs_reference": _ratio(float(np.mean([by_mode[mode][s][2] for s in seeds])), reference_accuracy),
        "compute_vs_reference": float(np.mean([by_mode[mode][s][7] for s in seeds])),
    }
    if baseline in by_mode:
        summary["baseline_lower_seeds"] = sum(
            1 for s in seeds if s in by_mode[baseline] and by_mode[baseline][s][2] < by_mode[mode][s][2]
        )
    return summary
