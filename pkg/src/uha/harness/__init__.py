"""Experiment harness: configuration, orchestration, persistence and CLI."""
from .config import ExperimentConfig, SubsetsConfig, Table1Config, TargetSpec
from .records import RecordWriter, read_records
from ..rng import derive_seed

__all__ = ["ExperimentConfig", "SubsetsConfig", "Table1Config", "TargetSpec", "RecordWriter",
           "read_records", "derive_seed"]
