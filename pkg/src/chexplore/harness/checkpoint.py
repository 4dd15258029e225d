"""Versioned JSON checkpoints of a complete training run.

Floats are written with ``repr`` (shortest round-trip form), so a reload
reproduces every value exactly. A SHA-256 over the canonical body guards
against truncation and edits; writes go to a temporary file and are renamed
into place.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import CheckpointError, CheckpointVersionError
from ..explore import ArchivedChannel, ChannelMask, MruCache
from ..simnet.loop import ExplorationConfig, MetricsRow, Trainer, make_streams
from ..simnet.network import OptimizerState, SimNetwork

FORMAT = "chexplore-checkpoint"
VERSION = 1


def _arr(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v) for v in a.reshape(-1)]}


def _unarr(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def _arrays(named: dict) -> dict:
    return {k: _arr(v) for k, v in sorted(named.items())}


def _unarrays(d: dict) -> dict:
    return {k: _unarr(v) for k, v in d.items()}


def _record_to_json(layer, channel, r: ArchivedChannel) -> dict:
    out = {"layer": layer, "channel": channel, "step_archived": r.step_archived,
           "out_weights": _arr(r.out_weights), "in_weights": _arr(r.in_weights),
           "gamma": r.gamma, "beta": r.beta}
    if r.ema_out_weights is not None:
        out.update(ema_out_weights=_arr(r.ema_out_weights), ema_in_weights=_arr(r.ema_in_weights),
                   ema_gamma=r.ema_gamma, ema_beta=r.ema_beta)
    return out


def _record_from_json(d: dict) -> ArchivedChannel:
    r = ArchivedChannel(out_weights=_unarr(d["out_weights"]), in_weights=_unarr(d["in_weights"]),
                        gamma=d["gamma"], beta=d["beta"], step_archived=d["step_archived"])
    if "ema_out_weights" in d:
        r.ema_out_weights = _unarr(d["ema_out_weights"])
        r.ema_in_weights = _unarr(d["ema_in_weights"])
        r.ema_gamma, r.ema_beta = d["ema_gamma"], d["ema_beta"]
    return r


def metrics_row_to_json(row: MetricsRow) -> dict:
    """Row without wall time, which would break byte-identical output."""
    return {"iteration": row.iteration, "loss": row.loss, "acc": row.acc, "flops": row.flops,
            "delta": row.delta, "retained": list(row.retained)}


def metrics_row_from_json(d: dict) -> MetricsRow:
    return MetricsRow(d["iteration"], d["loss"], d["acc"], d["flops"], d["delta"], tuple(d["retained"]))


@dataclass
class Checkpoint:
    iteration: int
    widths: list
    bn_mode: str
    params: dict
    masks: list  # retained indices per layer
    velocity: dict
    ema: dict
    cache: list  # [(layer, channel, ArchivedChannel)]
    rng_states: dict
    perm: list
    pos: int
    loss_sum: float
    loss_count: int
    delta: float
    kappa: list
    history: list
    run_config: dict  # ExplorationConfig fields
    config_echo: Optional[dict] = None
    version: int = VERSION

    def network(self) -> SimNetwork:
        """Live network (parameters copied) with the saved masks."""
        masks = [ChannelMask(l, w, np.array(r, dtype=np.int64))
                 for l, (w, r) in enumerate(zip(self.widths[1:-1], self.masks))]
        return SimNetwork(list(self.widths), {k: v.copy() for k, v in self.params.items()}, masks, self.bn_mode)

    def to_json(self) -> dict:
        return {
            "format": FORMAT,
            "version": self.version,
            "iteration": self.iteration,
            "widths": list(self.widths),
            "bn_mode": self.bn_mode,
            "params": _arrays(self.params),
            "masks": [list(m) for m in self.masks],
            "velocity": _arrays(self.velocity),
            "ema": _arrays(self.ema),
            "cache": [_record_to_json(l, c, r) for l, c, r in self.cache],
            "rng_states": self.rng_states,
            "perm": list(self.perm),
            "pos": self.pos,
            "loss_sum": self.loss_sum,
            "loss_count": self.loss_count,
            "delta": self.delta,
            "kappa": list(self.kappa),
            "history": [metrics_row_to_json(r) for r in self.history],
            "run_config": self.run_config,
            "config_echo": self.config_echo,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Checkpoint":
        return cls(
            iteration=d["iteration"], widths=d["widths"], bn_mode=d["bn_mode"], params=_unarrays(d["params"]),
            masks=d["masks"], velocity=_unarrays(d["velocity"]), ema=_unarrays(d["ema"]),
            cache=[(e["layer"], e["channel"], _record_from_json(e)) for e in d["cache"]],
            rng_states=d["rng_states"], perm=d["perm"], pos=d["pos"], loss_sum=d["loss_sum"],
            loss_count=d["loss_count"], delta=d["delta"], kappa=d["kappa"],
            history=[metrics_row_from_json(r) for r in d["history"]], run_config=d["run_config"],
            config_echo=d.get("config_echo"), version=d["version"],
        )


def capture(trainer: Trainer, config_echo: Optional[dict] = None) -> Checkpoint:
    """Snapshot everything needed to continue ``trainer`` bit-identically."""
    net = trainer.net
    return Checkpoint(
        iteration=trainer.iteration,
        widths=list(net.widths),
        bn_mode=net.bn_mode,
        params={k: v.copy() for k, v in net.params.items()},
        masks=[[int(j) for j in m.retained] for m in net.masks],
        velocity={k: v.copy() for k, v in trainer.opt.velocity.items()},
        ema={k: v.copy() for k, v in trainer.ema.items()},
        cache=[(l, c, r) for (l, c), r in trainer.cache.items()],
        rng_states={name: g.bit_generator.state for name, g in trainer.rngs.items()},
        perm=[int(i) for i in trainer.perm],
        pos=trainer.pos,
        loss_sum=trainer.loss_sum,
        loss_count=trainer.loss_count,
        delta=trainer.delta,
        kappa=list(trainer.kappa),
        history=list(trainer.history),
        run_config=asdict(trainer.config),
        config_echo=config_echo,
    )


def restore(ckpt: Checkpoint, data, callback=None) -> Trainer:
    """Rebuild a trainer that continues from ``ckpt``."""
    known = {f.name for f in fields(ExplorationConfig)}
    config = ExplorationConfig(**{k: v for k, v in ckpt.run_config.items() if k in known})
    net = ckpt.network()
    rngs = make_streams(config.seed)
    for name, state in ckpt.rng_states.items():
        rngs[name].bit_generator.state = state
    tr = Trainer(net, data, config, rngs=rngs, callback=callback)
    tr.opt = OptimizerState(lr=config.lr_at(max(ckpt.iteration, 1)), momentum=config.momentum,
                            weight_decay=config.weight_decay, velocity={k: v.copy() for k, v in ckpt.velocity.items()})
    tr.ema = {k: v.copy() for k, v in ckpt.ema.items()}
    tr.cache = MruCache()
    for l, c, r in ckpt.cache:
        tr.cache.archive(l, c, r)
    tr.iteration = ckpt.iteration
    tr.perm = np.array(ckpt.perm, dtype=np.int64)
    tr.pos = ckpt.pos
    tr.loss_sum, tr.loss_count = ckpt.loss_sum, ckpt.loss_count
    tr.delta, tr.kappa = ckpt.delta, list(ckpt.kappa)
    tr.history = list(ckpt.history)
    return tr


def _canonical(body: dict) -> str:
    return json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=True)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    body = ckpt.to_json()
    digest = hashlib.sha256(_canonical(body).encode()).hexdigest()
    atomic_write_text(path, _canonical({"sha256": digest, "body": body}) + "\n")


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
        body, digest = doc["body"], doc["sha256"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} is not a valid document: {exc}") from exc
    if hashlib.sha256(_canonical(body).encode()).hexdigest() != digest:
        raise CheckpointError(f"checkpoint {path} failed its checksum")
    if body.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} document")
    if body.get("version") != VERSION:
        raise CheckpointVersionError(f"checkpoint version {body.get('version')!r} is not supported (expected {VERSION})")
    try:
        return Checkpoint.from_json(body)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is missing fields: {exc}") from exc
