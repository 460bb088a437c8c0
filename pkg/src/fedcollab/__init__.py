"""Desk-scale federated learning simulator with a governed model registry."""

from .aggregation import (
    AggregationConfig,
    ClientUpdate,
    aggregate,
    aggregate_fedavg,
    aggregate_median,
    aggregate_trimmed_mean,
)
from .core_model import (
    ModelSpec,
    ParameterVector,
    TrainConfig,
    forward,
    init_params,
    load_checkpoint,
    local_train,
    save_checkpoint,
)
from .orchestrator import (
    ExperimentConfig,
    RoundReport,
    compare_runs,
    run_centralized,
    run_experiment,
    run_federated,
    run_single_client,
)
from .partition import (
    Dataset,
    LabeledExample,
    PartitionPlan,
    make_synthetic_corpus,
    partition_by_repository,
    partition_label_imbalanced,
    partition_quantity_imbalanced,
    partition_uniform,
    select_single_client,
)

__version__ = "0.1.0"

__all__ = [
    "AggregationConfig",
    "ClientUpdate",
    "Dataset",
    "ExperimentConfig",
    "LabeledExample",
    "ModelSpec",
    "ParameterVector",
    "PartitionPlan",
    "RoundReport",
    "TrainConfig",
    "aggregate",
    "aggregate_fedavg",
    "aggregate_median",
    "aggregate_trimmed_mean",
    "compare_runs",
    "forward",
    "init_params",
    "load_checkpoint",
    "local_train",
    "make_synthetic_corpus",
    "partition_by_repository",
    "partition_label_imbalanced",
    "partition_quantity_imbalanced",
    "partition_uniform",
    "run_centralized",
    "run_experiment",
    "run_federated",
    "run_single_client",
    "save_checkpoint",
    "select_single_client",
]
