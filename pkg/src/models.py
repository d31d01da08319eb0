from enum import Enum
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import ConfigError


class RoutingUnit(str, Enum):
    PER_SAMPLE = "per_sample"
    PER_TOKEN = "per_token"


class AggregationMode(str, Enum):
    HFEDMOE = "hfedmoe"
    FEDAVG = "fedavg"
    RANDOM_DROP = "random_drop"
    FREQ_PRUNE = "freq_prune"


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_layers: int = Field(2, gt=0, description="Number of MoE layers L")
    experts_per_layer: int = Field(8, gt=0, description="Parallel experts per layer S")
    top_k: int = Field(1, gt=0, description="Experts routed per unit and layer")
    input_dim: int = Field(16, gt=0, description="Width of one routing unit's input")
    hidden_dim: int = Field(32, gt=0, description="Width of the residual stream")
    expert_dim: int = Field(32, gt=0, description="Inner width of each expert MLP")
    output_dim: int = Field(4, gt=0, description="Number of output classes")
    routing_unit: RoutingUnit = Field(RoutingUnit.PER_SAMPLE, description="Routing granularity")
    activation: Literal["tanh", "relu"] = Field("tanh", description="Expert and embedding nonlinearity")
    residual: bool = Field(True, description="Add each MoE layer's output to its input")

    @model_validator(mode="after")
    def _check_top_k(self):
        if self.top_k > self.experts_per_layer:
            raise ConfigError(
                f"top_k={self.top_k} exceeds experts_per_layer={self.experts_per_layer}"
            )
        return self

    @property
    def total_experts(self) -> int:
        return self.num_layers * self.experts_per_layer


class ImportanceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    lambda_: float = Field(0.9, alias="lambda", ge=0.0, le=1.0,
                           description="Weight of cumulative vs specific importance")
    beta: float = Field(0.1, ge=0.0, description="Weight of the redundancy (KL) penalty")
    epsilon: float = Field(1e-12, gt=0.0, description="Guard added inside logarithms")


class SelectionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    sort_key: Literal["ib", "combined", "cumulative"] = Field(
        "ib", description="Per-expert score used to rank experts for backward"
    )


class ExpertCostModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    base_gb: float = Field(10.0, ge=0.0, description="Memory needed with no expert active")
    per_expert_gb: float = Field(0.5, gt=0.0, description="Memory per active expert")


class ClientBudget(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    max_active_experts: int = Field(..., gt=0, description="Distinct experts updatable per batch")
    memory_gb: Optional[float] = Field(None, gt=0.0, description="Memory the count was derived from")

    def check_covers(self, config: ModelConfig) -> None:
        if self.max_active_experts < config.num_layers:
            raise ConfigError(
                f"budget of {self.max_active_experts} experts cannot cover "
                f"{config.num_layers} layers"
            )


class BudgetSpec(BaseModel):
    """One client's budget as written in a config; empty means unconstrained."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    max_active_experts: Optional[int] = Field(None, gt=0)
    memory_gb: Optional[float] = Field(None, gt=0.0)

    @model_validator(mode="after")
    def _one_source(self):
        if self.max_active_experts is not None and self.memory_gb is not None:
            raise ConfigError("give either max_active_experts or memory_gb, not both")
        return self


class MemorySampling(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    low_gb: float = Field(12.0, gt=0.0)
    high_gb: float = Field(32.0, gt=0.0)

    @model_validator(mode="after")
    def _ordered(self):
        if self.high_gb < self.low_gb:
            raise ConfigError("memory_sampling.high_gb must be >= low_gb")
        return self


class AggregationPolicy(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    tau: float = Field(0.05, ge=0.0, lt=1.0, description="Usage threshold for active experts")
    mode: AggregationMode = Field(AggregationMode.HFEDMOE, description="Training and aggregation rule")

    @property
    def effective_tau(self) -> float:
        """Threshold actually applied; FedAvg aggregates every expert."""
        return 0.0 if self.mode == AggregationMode.FEDAVG else self.tau


class SyntheticTaskSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_classes: int = Field(4, gt=1)
    input_dim: int = Field(16, gt=0)
    clusters_per_client: int = Field(2, gt=0, description="Gaussian modes per class a client samples from")
    label_skew: float = Field(0.0, ge=0.0, le=1.0,
                              description="Fraction of a client's samples drawn from its preferred classes")
    samples_per_client: int = Field(500, gt=0)
    tokens_per_sample: int = Field(1, gt=0, description="Tokens per sample (per_token routing only)")
    test_fraction: float = Field(0.2, ge=0.0, lt=1.0, description="Share of each client's samples held out")
    global_test_samples: int = Field(1000, gt=0, description="Size of the held-out IID test set")
    cluster_spread: float = Field(1.0, gt=0.0, description="Std of cluster centres")
    noise_std: float = Field(2.0, gt=0.0, description="Std of samples around their centre")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    model: ModelConfig = Field(default_factory=ModelConfig)
    clients: int = Field(4, gt=0, description="Number of clients C")
    rounds: int = Field(30, ge=0, description="Federated rounds T")
    epochs: int = Field(1, gt=0, description="Local epochs E")
    batch_size: int = Field(8, gt=0, description="Local mini-batch size B")
    lr: float = Field(1e-4, gt=0.0, description="Client SGD learning rate")
    importance: ImportanceConfig = Field(default_factory=ImportanceConfig)
    selection: SelectionConfig = Field(default_factory=SelectionConfig)
    policy: AggregationPolicy = Field(default_factory=AggregationPolicy)
    budgets: List[BudgetSpec] = Field(default_factory=list, description="Per-client budgets; empty = unconstrained")
    memory_sampling: Optional[MemorySampling] = Field(None, description="Sample client memory when budgets is empty")
    cost: ExpertCostModel = Field(default_factory=ExpertCostModel)
    data: SyntheticTaskSpec = Field(default_factory=SyntheticTaskSpec)
    seed: int = Field(0, ge=0, lt=2**64)
    workers: int = Field(1, gt=0, description="Client rounds run in parallel threads")
    record_wall_time: bool = Field(False, description="Write measured wall time into metrics")
    eval_every: int = Field(1, gt=0, description="Evaluate the global model every N rounds (and after the last)")
    convergence_fraction: float = Field(0.95, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _consistent(self):
        if self.data.input_dim != self.model.input_dim:
            raise ConfigError(
                f"data.input_dim={self.data.input_dim} != model.input_dim={self.model.input_dim}"
            )
        if self.data.num_classes != self.model.output_dim:
            raise ConfigError(
                f"data.num_classes={self.data.num_classes} != model.output_dim={self.model.output_dim}"
            )
        if self.data.tokens_per_sample > 1 and self.model.routing_unit != RoutingUnit.PER_TOKEN:
            raise ConfigError("tokens_per_sample > 1 requires routing_unit=per_token")
        if self.budgets and len(self.budgets) != self.clients:
            raise ConfigError(f"{len(self.budgets)} budgets given for {self.clients} clients")
        return self


class MetricsRow(BaseModel):
    round: int
    client: str
    loss: float
    accuracy: float = Field(..., ge=0.0, le=1.0)
    experts_activated_fraction: float = Field(..., ge=0.0, le=1.0)
    failure_events: int = Field(..., ge=0)
    wall_time_ms: float = Field(..., ge=0.0)
    compute_proxy: int = Field(..., ge=0)


# Wire documents

class TensorBlob(BaseModel):
    shape: List[int]
    data: str = Field(..., description="base64 of little-endian float64 values, row-major")


class GroupBlob(BaseModel):
    id: str
    tensors: List[TensorBlob]


class ExpertBlob(BaseModel):
    layer: int = Field(..., ge=0)
    index: int = Field(..., ge=0)
    tensors: List[TensorBlob]


class UsageEntry(BaseModel):
    layer: int = Field(..., ge=0)
    index: int = Field(..., ge=0)
    usage: float = Field(..., ge=0.0)


class PackageDocument(BaseModel):
    format: Literal["moefed-package"] = "moefed-package"
    version: Literal[1] = 1
    client_id: int = Field(..., ge=0)
    round: int = Field(..., ge=0)
    sample_count: int = Field(..., gt=0)
    usage: List[UsageEntry]
    dominant_set: List[List[int]] = Field(..., description="[layer, index] pairs")
    preference_sum: float = Field(..., ge=0.0)
    gating: List[GroupBlob]
    shared: List[GroupBlob]
    experts: List[ExpertBlob]


class CheckpointDocument(BaseModel):
    format: Literal["moefed-checkpoint"] = "moefed-checkpoint"
    version: Literal[1] = 1
    round: int = Field(0, ge=0)
    config: ModelConfig
    groups: List[GroupBlob]


class RoundSummary(BaseModel):
    round: int
    clients: List[int]
    experts_aggregated: int
    experts_unchanged: int
    alpha: List[float]
    consistency: List[float]
