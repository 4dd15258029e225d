"""Glue between an ExperimentConfig and a training run on disk."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..simnet.loop import Trainer, make_streams
from ..simnet.network import SimNetwork
from .checkpoint import capture, load_checkpoint, restore, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .data import Dataset, generate_synthetic_dataset, load_idx
from .metrics import write_metrics_csv, write_metrics_json


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "idx":
        return load_idx(cfg.idx_images, cfg.idx_labels, seed=cfg.data_seed)
    return generate_synthetic_dataset(cfg.dataset, cfg.n, cfg.classes, cfg.noise, cfg.data_seed)


def build_trainer(cfg: ExperimentConfig, data: Dataset, callback=None) -> Trainer:
    widths = list(cfg.widths)
    if widths[0] != data.n_features:
        raise ConfigError(f"widths start with {widths[0]} but the data has {data.n_features} features", key="widths")
    if widths[-1] < data.n_classes:
        raise ConfigError(f"widths end with {widths[-1]} but the data has {data.n_classes} classes", key="widths")
    run = cfg.exploration(data.x_train.shape[0])
    rngs = make_streams(cfg.seed)
    net = SimNetwork.initialize(widths, rngs["init"], bn_mode=cfg.bn_mode)
    return Trainer(net, data, run, rngs=rngs, callback=callback)


@dataclass
class RunOutput:
    trainer: Trainer
    metrics_csv: Path
    metrics_json: Path
    checkpoint: Path


def run_experiment(cfg: ExperimentConfig, out: Optional[str] = None, *, checkpoint_every: int = 0,
                   resume: Optional[str] = None, stop_at: Optional[int] = None) -> RunOutput:
    """Train, writing metrics and a final checkpoint under ``out``.

    ``checkpoint_every`` > 0 also saves ``checkpoint.json`` every that many
    iterations; ``resume`` continues from a saved checkpoint; ``stop_at``
    halts early (the checkpoint then reflects the partial run).
    """
    out_dir = Path(out or cfg.out)
    data = build_dataset(cfg)
    ckpt_path = out_dir / "checkpoint.json"
    echo = cfg.echo()

    def on_step(tr, _event):
        if checkpoint_every and tr.iteration % checkpoint_every == 0:
            save_checkpoint(ckpt_path, capture(tr, echo))

    if resume:
        tr = restore(load_checkpoint(resume), data, callback=on_step)
    else:
        tr = build_trainer(cfg, data, callback=on_step)
    tr.run(until=stop_at)
    save_checkpoint(ckpt_path, capture(tr, echo))
    csv_path, json_path = out_dir / "metrics.csv", out_dir / "metrics.json"
    write_metrics_csv(csv_path, tr.history)
    write_metrics_json(json_path, tr.history, {"config": echo})
    return RunOutput(tr, csv_path, json_path, ckpt_path)
