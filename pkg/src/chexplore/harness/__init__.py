"""Operational surface: configuration, datasets, checkpoints, metrics and the CLI."""
from .checkpoint import Checkpoint, capture, load_checkpoint, restore, save_checkpoint
from .config import ExperimentConfig, load_config, make_config, resolve_config
from .data import Dataset, generate_synthetic_dataset, load_idx, write_idx
from .metrics import CSV_HEADER, read_metrics_csv, write_metrics_csv, write_metrics_json
from .runner import build_dataset, build_trainer, run_experiment
