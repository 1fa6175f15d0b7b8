"""Dataset ingestion, batch evaluation, metrics and experiment drivers."""

from .ingest import DatasetKind, MalformedRecord, UnknownKind, ingest
from .metrics import LengthMismatch, Metrics, compute_metrics, macro_f1
from .runner import ConfigError, RunConfig, RunOutput, cross_dataset, evaluate, self_evolution

__all__ = [
    "ConfigError",
    "DatasetKind",
    "LengthMismatch",
    "MalformedRecord",
    "Metrics",
    "RunConfig",
    "RunOutput",
    "UnknownKind",
    "compute_metrics",
    "cross_dataset",
    "evaluate",
    "ingest",
    "macro_f1",
    "self_evolution",
]
