"""Stacked mixture-of-experts layers with top-k routing."""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from src.errors import ConfigError, CoverageError, DimensionError, InputError
from src.models import ModelConfig, RoutingUnit
from src.tensor import (
    ParamGroup,
    Tensor,
    activate,
    add,
    column,
    forward_linear,
    masked_renormalize,
    matmul,
    mean_groups,
    mul,
    scatter_rows,
    softmax,
    take_rows,
)

logger = logging.getLogger(__name__)

EMBED_GROUP = "embed"
HEAD_GROUP = "head"


class ExpertKey(NamedTuple):
    layer: int
    index: int

    @property
    def group_id(self) -> str:
        return f"expert.{self.layer}.{self.index}"


def gating_group_id(layer: int) -> str:
    return f"gate.{layer}"


@dataclass(frozen=True)
class RoutingRecord:
    """Gate scores of one forward pass.

    scores[l, u, s] is the unrestricted softmax score of expert s in layer l for
    routing unit u; selected[l] is a U×k_l array of the experts each unit was
    actually routed to, best first.
    """

    scores: np.ndarray
    selected: Tuple[np.ndarray, ...]

    @property
    def num_layers(self) -> int:
        return self.scores.shape[0]

    @property
    def num_units(self) -> int:
        return self.scores.shape[1]

    @property
    def num_experts(self) -> int:
        return self.scores.shape[2]

    def expert_scores(self, key: ExpertKey) -> np.ndarray:
        return self.scores[key.layer, :, key.index]


def top_k_route(gate_row: Sequence[float], k: int) -> Tuple[int, ...]:
    """Indices of the k largest scores, best first; ties go to the smaller index."""
    row = np.asarray(gate_row, dtype=np.float64)
    if k < 1 or k > row.shape[0]:
        raise ConfigError(f"top_k_route: k={k} must lie in [1, {row.shape[0]}]")
    order = np.argsort(-row, kind="stable")[:k]
    return tuple(int(i) for i in order)


def _top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> List[np.ndarray]:
    scale = 1.0 / np.sqrt(fan_in)
    return [rng.normal(0.0, scale, size=(fan_in, fan_out)), np.zeros(fan_out)]


class MoEModel:
    """Parameters of the whole network, organised in masking groups.

    Group order is fixed: embed, then per layer the gating map followed by its
    experts, then the classification head.
    """

    def __init__(self, config: ModelConfig, groups: Iterable[ParamGroup]):
        self.config = config
        self._groups: Dict[str, ParamGroup] = {g.id: g for g in groups}
        expected = self.group_ids(config)
        if list(self._groups) != expected:
            raise DimensionError(f"model groups {list(self._groups)} do not match {expected}")

    @staticmethod
    def group_ids(config: ModelConfig) -> List[str]:
        ids = [EMBED_GROUP]
        for layer in range(config.num_layers):
            ids.append(gating_group_id(layer))
            ids.extend(ExpertKey(layer, s).group_id for s in range(config.experts_per_layer))
        ids.append(HEAD_GROUP)
        return ids

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "MoEModel":
        groups = [ParamGroup.from_arrays(EMBED_GROUP, _init_linear(rng, config.input_dim, config.hidden_dim))]
        for layer in range(config.num_layers):
            groups.append(ParamGroup.from_arrays(
                gating_group_id(layer), _init_linear(rng, config.hidden_dim, config.experts_per_layer)
            ))
            for s in range(config.experts_per_layer):
                arrays = _init_linear(rng, config.hidden_dim, config.expert_dim)
                arrays += _init_linear(rng, config.expert_dim, config.hidden_dim)
                groups.append(ParamGroup.from_arrays(ExpertKey(layer, s).group_id, arrays))
        groups.append(ParamGroup.from_arrays(HEAD_GROUP, _init_linear(rng, config.hidden_dim, config.output_dim)))
        return cls(config, groups)

    @property
    def groups(self) -> List[ParamGroup]:
        return list(self._groups.values())

    def group(self, group_id: str) -> ParamGroup:
        return self._groups[group_id]

    def gating(self, layer: int) -> ParamGroup:
        return self._groups[gating_group_id(layer)]

    def expert(self, key: ExpertKey) -> ParamGroup:
        return self._groups[key.group_id]

    def expert_keys(self) -> List[ExpertKey]:
        return [
            ExpertKey(layer, s)
            for layer in range(self.config.num_layers)
            for s in range(self.config.experts_per_layer)
        ]

    def clone(self) -> "MoEModel":
        return MoEModel(self.config, (g.copy() for g in self.groups))

    def state(self) -> Dict[str, List[np.ndarray]]:
        return {g.id: [a.copy() for a in g.arrays()] for g in self.groups}

    def load_state(self, state: Dict[str, List[np.ndarray]]) -> None:
        for group_id, arrays in state.items():
            group = self._groups[group_id]
            if len(arrays) != len(group.tensors):
                raise DimensionError(f"{group_id}: expected {len(group.tensors)} tensors")
            for t, a in zip(group.tensors, arrays):
                if a.shape != t.shape:
                    raise DimensionError(f"{group_id}: shape {a.shape} != {t.shape}")
                t.data = np.array(a, dtype=np.float64)


def _expert_forward(x: Tensor, expert: ParamGroup, activation: str) -> Tensor:
    w1, b1, w2, b2 = expert.tensors
    hidden = activate(add(matmul(x, w1), b1), activation)
    return add(matmul(hidden, w2), b2)


def _as_units(batch, config: ModelConfig) -> Tuple[Tensor, int]:
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    if data.shape[0] == 0:
        raise InputError("moe_forward: empty batch")
    if config.routing_unit == RoutingUnit.PER_TOKEN:
        if data.ndim != 3 or data.shape[2] != config.input_dim:
            raise DimensionError(f"per_token batch must be B×T×{config.input_dim}, got {data.shape}")
        b, t, d = data.shape
        return Tensor(data.reshape(b * t, d)), t
    if data.ndim != 2 or data.shape[1] != config.input_dim:
        raise DimensionError(f"per_sample batch must be B×{config.input_dim}, got {data.shape}")
    return Tensor(data), 1


def _allowed_by_layer(
    active_override: Iterable[ExpertKey], config: ModelConfig
) -> List[np.ndarray]:
    allowed = [np.zeros(config.experts_per_layer, dtype=bool) for _ in range(config.num_layers)]
    for key in active_override:
        if not (0 <= key.layer < config.num_layers and 0 <= key.index < config.experts_per_layer):
            raise CoverageError(f"override names unknown expert {tuple(key)}")
        allowed[key.layer][key.index] = True
    missing = [layer for layer, row in enumerate(allowed) if not row.any()]
    if missing:
        raise CoverageError(f"override leaves layers {missing} without an expert")
    return allowed


def moe_layer(
    h: Tensor,
    model: MoEModel,
    layer: int,
    allowed: Optional[np.ndarray] = None,
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """One MoE layer: returns (Σ gate·expert output, raw scores, selected indices)."""
    config = model.config
    gates = softmax(forward_linear(h, model.gating(layer)))
    scores = gates.data.copy()
    if allowed is None:
        used = gates
        selected = _top_k_rows(scores, config.top_k)
    else:
        used = masked_renormalize(gates, allowed)
        k = min(config.top_k, int(allowed.sum()))
        ranked = np.where(allowed[None, :], used.data, -np.inf)
        selected = _top_k_rows(ranked, k)

    units = h.shape[0]
    combined: Optional[Tensor] = None
    for s in range(config.experts_per_layer):
        rows = np.flatnonzero((selected == s).any(axis=1))
        if rows.size == 0:
            continue
        out = _expert_forward(take_rows(h, rows), model.expert(ExpertKey(layer, s)), config.activation)
        weight = take_rows(column(used, s), rows)
        contribution = scatter_rows(mul(out, weight), rows, units)
        combined = contribution if combined is None else add(combined, contribution)
    return combined, scores, selected


def moe_forward(
    batch,
    model: MoEModel,
    config: Optional[ModelConfig] = None,
    active_override: Optional[Iterable[ExpertKey]] = None,
) -> Tuple[Tensor, RoutingRecord]:
    """Logits for a batch plus the routing record of every layer.

    With `active_override`, each layer routes only among the given experts, with
    gates renormalised over them; the record still holds the unrestricted scores.
    """
    config = config or model.config
    if config != model.config:
        raise ConfigError("moe_forward: config does not match the model")
    allowed = None if active_override is None else _allowed_by_layer(active_override, config)

    x, tokens = _as_units(batch, config)
    h = activate(forward_linear(x, model.group(EMBED_GROUP)), config.activation)
    all_scores = []
    all_selected = []
    for layer in range(config.num_layers):
        mixed, scores, selected = moe_layer(h, model, layer, None if allowed is None else allowed[layer])
        h = add(h, mixed) if config.residual else mixed
        all_scores.append(scores)
        all_selected.append(selected)
    if tokens > 1:
        h = mean_groups(h, tokens)
    logits = forward_linear(h, model.group(HEAD_GROUP))
    record = RoutingRecord(scores=np.stack(all_scores), selected=tuple(all_selected))
    return logits, record


def predict(model: MoEModel, x: np.ndarray, active_override: Optional[Iterable[ExpertKey]] = None) -> np.ndarray:
    logits, _ = moe_forward(x, model, active_override=active_override)
    return np.argmax(logits.data, axis=1)
