"""Per-expert batch importance and information-bottleneck contribution.

All quantities are computed from the gate scores of one batch. The task-relevant
information of an expert is approximated by its combined importance; the
compression term is the KL divergence between the expert's per-unit activation
and its batch marginal. Natural logarithms throughout.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Tuple

import numpy as np

from src.errors import InputError
from src.models import ImportanceConfig
from src.moe import ExpertKey, RoutingRecord

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["round", "client", "layer", "expert", "s_cumul", "s_specific", "s", "kl", "ib"]


class ExpertImportance(NamedTuple):
    s_cumul: float
    s_specific: float
    s_combined: float
    marginal: float
    kl_term: float
    ib_score: float


@dataclass(frozen=True)
class ActivationDistribution:
    """Per-unit conditionals G_e(x_u) and their batch marginal, as [L, U, S] / [L, S]."""

    conditionals: np.ndarray
    marginal: np.ndarray


@dataclass(frozen=True)
class ImportanceReport:
    """Importance fields for every expert, each an [L, S] array."""

    s_cumul: np.ndarray
    s_specific: np.ndarray
    s_combined: np.ndarray
    marginal: np.ndarray
    kl_term: np.ndarray
    ib_score: np.ndarray

    def expert(self, key: ExpertKey) -> ExpertImportance:
        at = (key.layer, key.index)
        return ExpertImportance(
            float(self.s_cumul[at]),
            float(self.s_specific[at]),
            float(self.s_combined[at]),
            float(self.marginal[at]),
            float(self.kl_term[at]),
            float(self.ib_score[at]),
        )

    def score(self, key: ExpertKey, sort_key: str = "ib") -> float:
        table = {"ib": self.ib_score, "combined": self.s_combined, "cumulative": self.s_cumul}[sort_key]
        return float(table[key.layer, key.index])

    def to_rows(self, round_index: int, client: int) -> List[list]:
        rows = []
        layers, experts = self.s_cumul.shape
        for layer in range(layers):
            for s in range(experts):
                e = self.expert(ExpertKey(layer, s))
                rows.append([round_index, client, layer, s, e.s_cumul, e.s_specific,
                             e.s_combined, e.kl_term, e.ib_score])
        return rows


def _require_units(record: RoutingRecord) -> None:
    if record.num_units < 1:
        raise InputError("importance needs a batch with at least one routing unit")


def _batch_mean(scores: np.ndarray, axis: int) -> np.ndarray:
    # rounding can push the mean of equal values one ulp above their max
    return np.minimum(scores.mean(axis=axis), scores.max(axis=axis))


def activation_distribution(record: RoutingRecord) -> ActivationDistribution:
    _require_units(record)
    return ActivationDistribution(conditionals=record.scores, marginal=_batch_mean(record.scores, 1))


def cumulative_importance(record: RoutingRecord, e: ExpertKey) -> float:
    """Mean gate score of `e` over the batch."""
    _require_units(record)
    return float(_batch_mean(record.expert_scores(e), 0))


def specific_importance(record: RoutingRecord, e: ExpertKey) -> float:
    """Largest gate score of `e` on any single unit of the batch."""
    _require_units(record)
    return float(record.expert_scores(e).max())


def combined_importance(s_cumul: float, s_specific: float, cfg: ImportanceConfig) -> float:
    return cfg.lambda_ * s_cumul + (1.0 - cfg.lambda_) * s_specific


def _kl_terms(conditionals: np.ndarray, marginal: np.ndarray, eps: float) -> np.ndarray:
    # conditionals: [..., U, S]-like with units on axis -2 relative to marginal
    ratio = (conditionals + eps) / (np.expand_dims(marginal, axis=-2) + eps)
    return (conditionals * np.log(ratio)).mean(axis=-2)


def ib_contribution(record: RoutingRecord, e: ExpertKey, cfg: ImportanceConfig) -> Tuple[float, float]:
    """(kl_term, ib_score) for one expert; ib = combined importance − β·kl."""
    _require_units(record)
    g = record.expert_scores(e)
    p = _batch_mean(g, 0)
    kl = float((g * np.log((g + cfg.epsilon) / (p + cfg.epsilon))).mean())
    s = combined_importance(float(p), float(g.max()), cfg)
    return kl, s - cfg.beta * kl


def build_report(record: RoutingRecord, cfg: ImportanceConfig) -> ImportanceReport:
    dist = activation_distribution(record)
    s_cumul = dist.marginal
    s_specific = record.scores.max(axis=1)
    s_combined = cfg.lambda_ * s_cumul + (1.0 - cfg.lambda_) * s_specific
    kl = _kl_terms(record.scores, s_cumul, cfg.epsilon)
    return ImportanceReport(
        s_cumul=s_cumul,
        s_specific=s_specific,
        s_combined=s_combined,
        marginal=s_cumul.copy(),
        kl_term=kl,
        ib_score=s_combined - cfg.beta * kl,
    )


class RunningImportance:
    """Running mean of combined importance over the batches it has seen."""

    def __init__(self, num_layers: int, num_experts: int):
        self._sum = np.zeros((num_layers, num_experts))
        self.batches = 0

    def add(self, report: ImportanceReport) -> None:
        self._sum += report.s_combined
        self.batches += 1

    def mean(self) -> np.ndarray:
        if self.batches == 0:
            return np.zeros_like(self._sum)
        return self._sum / self.batches

    def as_dict(self) -> Dict[ExpertKey, float]:
        mean = self.mean()
        return {ExpertKey(l, s): float(mean[l, s]) for l in range(mean.shape[0]) for s in range(mean.shape[1])}
