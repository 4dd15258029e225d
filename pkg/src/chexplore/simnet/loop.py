"""Training loops: CHEX exploration, the pruning baselines, and the convergence probe.

A channel's parameters are its column of ``w{l}``, its row of the next
matrix, and its ``gamma``/``beta``. A weight coordinate of ``w{l+1}`` is
shared by channel ``j`` of layer ``l`` (row) and channel ``k`` of layer
``l+1`` (column). When both are pruned, both archives hold the same
most-recently-used value; when one comes back, the coordinate stays masked
and its value stays in the other's archive.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ..errors import InvalidArgumentError
from ..explore import (
    EMA_DECAY,
    INIT_SCHEMES,
    SAMPLING_MODES,
    SCHEDULER_KINDS,
    ArchivedChannel,
    MruCache,
    RegrowSchedule,
    allocate_layer_sparsity,
    delta_at,
    prune_layer_css,
    regrow_layer,
    robust_ceil,
)
from .network import (
    OptimizerState,
    SimNetwork,
    backward,
    batch_statistics,
    count_flops,
    predict,
    sgd_step_masked,
)

MODES = ("chex", "one_shot_early", "gradual", "plain")
STREAMS = ("init", "data", "explore", "restore")


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(STREAMS, children)}


@dataclass(frozen=True)
class ExplorationConfig:
    """Everything a single training run needs, with the step grid in iterations."""

    total_iters: int
    dt: int
    t_max: int
    mode: str = "chex"
    S: float = 0.5
    delta0: float = 0.3
    scheduler: str = "cosine"
    init_scheme: str = "mru"
    sampling: str = "importance"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_fraction: float = 0.05
    label_smoothing: float = 0.0
    batch_size: int = 64
    eval_every: int = 0  # 0 -> once per dt
    one_shot_fraction: float = 0.06
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.S < 1.0:
            raise InvalidArgumentError(f"S must be in [0, 1), got {self.S}")
        if not 0.0 < self.delta0 <= 1.0:
            raise InvalidArgumentError(f"delta0 must be in (0, 1], got {self.delta0}")
        if self.total_iters < 1:
            raise InvalidArgumentError("total_iters must be positive")
        if self.dt < 1:
            raise InvalidArgumentError("dt must be >= 1")
        if self.dt > self.t_max:
            raise InvalidArgumentError(f"dt ({self.dt}) exceeds t_max ({self.t_max})")
        if self.t_max > self.total_iters:
            raise InvalidArgumentError("t_max exceeds total_iters")
        if self.scheduler not in SCHEDULER_KINDS:
            raise InvalidArgumentError(f"unknown scheduler {self.scheduler!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise InvalidArgumentError(f"unknown init scheme {self.init_scheme!r}")
        if self.sampling not in SAMPLING_MODES:
            raise InvalidArgumentError(f"unknown sampling mode {self.sampling!r}")
        if self.batch_size < 2:
            raise InvalidArgumentError("batch_size must be >= 2")

    @property
    def n_steps(self) -> int:
        return self.t_max // self.dt

    @property
    def schedule(self) -> RegrowSchedule:
        return RegrowSchedule(self.delta0, self.n_steps * self.dt, self.dt, self.scheduler)

    @property
    def eval_interval(self) -> int:
        return self.eval_every or self.dt

    def lr_at(self, t: int) -> float:
        """Linear warmup then cosine decay; ``t`` counts from 1."""
        warm = int(self.warmup_fraction * self.total_iters)
        if t <= warm:
            return self.lr * t / warm
        span = max(self.total_iters - warm, 1)
        return 0.5 * (1.0 + math.cos(math.pi * (t - 1 - warm) / span)) * self.lr


@dataclass
class MetricsRow:
    iteration: int
    loss: float
    acc: float
    flops: int
    delta: float
    retained: tuple
    wall_time: float = 0.0


@dataclass
class ExploreEvent:
    iteration: int
    step: int
    kappa: list
    delta: float
    pruned: dict  # layer -> newly pruned channels
    regrown: dict  # layer -> {channel: ArchivedChannel spliced in}
    retained: list


# --------------------------------------------------------------------------- channel surgery


def archive_channel(net: SimNetwork, cache: MruCache, ema: Optional[dict], layer: int, j: int, step: int):
    """Copy channel ``j`` of ``layer`` into the cache and zero it in the live network."""
    p = net.params
    nxt = net.next_weight_name(layer)
    out_w = p[f"w{layer}"][:, j].copy()
    in_w = p[nxt][j, :].copy()
    # coordinates already masked by a pruned partner channel hold their value in its archive
    if layer > 0:
        for i in net.masks[layer - 1].pruned:
            out_w[i] = cache.get(layer - 1, int(i)).in_weights[j]
    if nxt != "head_w":
        for k in net.masks[layer + 1].pruned:
            in_w[k] = cache.get(layer + 1, int(k)).out_weights[j]
    record = ArchivedChannel(
        out_weights=out_w,
        in_weights=in_w,
        gamma=float(p[f"gamma{layer}"][j]),
        beta=float(p[f"beta{layer}"][j]),
        step_archived=step,
    )
    if ema is not None:
        record.ema_out_weights = ema[f"w{layer}"][:, j].copy()
        record.ema_in_weights = ema[nxt][j, :].copy()
        record.ema_gamma = float(ema[f"gamma{layer}"][j])
        record.ema_beta = float(ema[f"beta{layer}"][j])
    cache.archive(layer, j, record)
    p[f"w{layer}"][:, j] = 0.0
    p[nxt][j, :] = 0.0
    p[f"gamma{layer}"][j] = 0.0
    p[f"beta{layer}"][j] = 0.0


def splice_channel(net: SimNetwork, layer: int, j: int, record: ArchivedChannel):
    """Write restored values of a regrown channel into the live network.

    Must be called after the channel is back in its mask; coordinates whose
    partner channel is still pruned stay zero.
    """
    p = net.params
    nxt = net.next_weight_name(layer)
    p[f"w{layer}"][:, j] = np.where(net.input_mask(layer), record.out_weights, 0.0)
    if nxt == "head_w":
        p[nxt][j, :] = record.in_weights
    else:
        p[nxt][j, :] = np.where(net.masks[layer + 1].as_bool(), record.in_weights, 0.0)
    p[f"gamma{layer}"][j] = record.gamma
    p[f"beta{layer}"][j] = record.beta


def clear_velocity(opt: OptimizerState, net: SimNetwork):
    pm = net.param_masks()
    for name, v in opt.velocity.items():
        v[~pm[name]] = 0.0


# --------------------------------------------------------------------------- trainer


class Trainer:
    """One training run. ``step()`` advances one iteration; ``run()`` to completion.

    All mutable run state lives on the instance so it can be checkpointed and
    resumed bit-identically.
    """

    def __init__(self, net: SimNetwork, data, config: ExplorationConfig, rngs=None, callback=None):
        self.net = net
        self.data = data
        self.config = config
        self.rngs = rngs if rngs is not None else make_streams(config.seed)
        self.callback = callback
        self.cache = MruCache()
        self.opt = OptimizerState(lr=config.lr_at(1), momentum=config.momentum, weight_decay=config.weight_decay)
        self.ema = {k: v.copy() for k, v in net.params.items()}
        self.iteration = 0
        self.perm = np.zeros(0, dtype=np.int64)
        self.pos = 0
        self.loss_sum = 0.0
        self.loss_count = 0
        self.delta = 0.0
        self.kappa = [0.0] * net.n_layers
        self.history: list[MetricsRow] = []
        self._t0 = time.perf_counter()

    # -- batches -----------------------------------------------------------
    def _next_batch(self):
        n = self.data.x_train.shape[0]
        bs = min(self.config.batch_size, n)
        if self.pos + bs > self.perm.size:
            self.perm = self.rngs["data"].permutation(n)
            self.pos = 0
        idx = self.perm[self.pos : self.pos + bs]
        self.pos += bs
        return self.data.x_train[idx], self.data.y_train[idx]

    # -- training ----------------------------------------------------------
    @property
    def done(self) -> bool:
        return self.iteration >= self.config.total_iters

    def step(self):
        cfg = self.config
        t = self.iteration + 1
        xb, yb = self._next_batch()
        value, grads = backward(self.net, xb, yb, cfg.label_smoothing)
        self.opt.lr = cfg.lr_at(t)
        pm = self.net.param_masks()
        sgd_step_masked(self.opt, self.net, grads)
        for name, p in self.net.params.items():
            e = self.ema[name]
            np.copyto(e, EMA_DECAY * e + (1.0 - EMA_DECAY) * p, where=pm[name])
        self.iteration = t
        self.loss_sum += value
        self.loss_count += 1

        event = self._maybe_reshape(t)
        if t % cfg.eval_interval == 0 or t == cfg.total_iters:
            self.history.append(self._metrics_row(t))
        if self.callback is not None:
            self.callback(self, event)
        return event

    def run(self, until: Optional[int] = None):
        stop = self.config.total_iters if until is None else min(until, self.config.total_iters)
        while self.iteration < stop:
            self.step()
        return self

    # -- exploration -------------------------------------------------------
    def _maybe_reshape(self, t: int) -> Optional[ExploreEvent]:
        cfg = self.config
        if cfg.mode == "plain":
            return None
        if cfg.mode == "one_shot_early":
            t_once = max(1, robust_ceil(cfg.one_shot_fraction * cfg.total_iters))
            if t != t_once:
                return None
            return self._explore(t, 1, cfg.S, regrow_delta=0.0)
        if t % cfg.dt != 0 or t > cfg.t_max:
            return None
        s = t // cfg.dt
        if cfg.mode == "gradual":
            return self._explore(t, s, cfg.S * s / cfg.n_steps, regrow_delta=0.0)
        # the last step lands exactly on the target sparsity, whatever the scheduler
        delta = 0.0 if s >= cfg.n_steps else delta_at(cfg.schedule, s)
        return self._explore(t, s, cfg.S, regrow_delta=delta)

    def _explore(self, t: int, s: int, target: float, regrow_delta: float) -> ExploreEvent:
        net, cfg = self.net, self.config
        gammas = [net.params[f"gamma{l}"] for l in range(net.n_layers)]
        already = [~m.as_bool() for m in net.masks]
        alloc = allocate_layer_sparsity(gammas, target, pruned=already)
        pruned = {}
        for l in range(net.n_layers):
            mask = net.masks[l]
            active = mask.as_bool()
            _, drop = prune_layer_css(net.params[f"w{l}"], float(alloc.per_layer[l]), active=active)
            newly = [int(j) for j in drop if active[j]]
            for j in newly:
                archive_channel(net, self.cache, self.ema, l, j, t)
            mask.drop(newly)
            pruned[l] = newly
        regrown = {}
        if regrow_delta > 0.0:
            for l in range(net.n_layers):
                mask = net.masks[l]
                k = robust_ceil(regrow_delta * mask.total_channels)
                restored = regrow_layer(
                    mask,
                    self.cache,
                    net.params[f"w{l}"],
                    k,
                    cfg.sampling,
                    self.rngs["explore"],
                    scheme=cfg.init_scheme,
                    init_rng=self.rngs["restore"],
                    input_mask=net.input_mask(l),
                )
                for j, record in restored.items():
                    splice_channel(net, l, j, record)
                regrown[l] = restored
        clear_velocity(self.opt, net)
        self.delta = regrow_delta
        self.kappa = [float(k) for k in alloc.per_layer]
        return ExploreEvent(
            iteration=t,
            step=s,
            kappa=self.kappa,
            delta=regrow_delta,
            pruned=pruned,
            regrown=regrown,
            retained=[int(m.retained.size) for m in net.masks],
        )

    # -- metrics -----------------------------------------------------------
    def evaluate(self) -> float:
        stats = None
        if self.net.bn_mode == "standardize":
            stats = batch_statistics(self.net, self.data.x_train)
        pred = predict(self.net, self.data.x_eval, stats)
        return float(np.mean(pred == self.data.y_eval))

    def _metrics_row(self, t: int) -> MetricsRow:
        mean_loss = self.loss_sum / max(self.loss_count, 1)
        self.loss_sum, self.loss_count = 0.0, 0
        return MetricsRow(
            iteration=t,
            loss=mean_loss,
            acc=self.evaluate(),
            flops=count_flops(self.net).total,
            delta=self.delta,
            retained=tuple(int(m.retained.size) for m in self.net.masks),
            wall_time=time.perf_counter() - self._t0,
        )


@dataclass
class RunResult:
    net: SimNetwork
    history: list
    kappa: list
    cache: MruCache

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].acc


def run_chex(net: SimNetwork, data, config: ExplorationConfig, callback=None) -> RunResult:
    """Train with periodic prune/regrow exploration (``config.mode`` must be 'chex' or 'plain')."""
    if config.mode not in ("chex", "plain"):
        raise InvalidArgumentError(f"run_chex got mode {config.mode!r}; use run_baseline")
    tr = Trainer(net, data, config, callback=callback).run()
    return RunResult(tr.net, tr.history, tr.kappa, tr.cache)


def run_baseline(net: SimNetwork, data, mode: str, config: ExplorationConfig, callback=None) -> RunResult:
    """One-shot early pruning or gradual pruning, both without regrowing."""
    if mode not in ("one_shot_early", "gradual"):
        raise InvalidArgumentError(f"unknown baseline mode {mode!r}")
    tr = Trainer(net, data, replace(config, mode=mode), callback=callback).run()
    return RunResult(tr.net, tr.history, tr.kappa, tr.cache)


# --------------------------------------------------------------------------- convergence probe


def masked_gradient_norm_sq(net: SimNetwork, x, y) -> float:
    _, grads = backward(net, x, y)
    return float(sum(np.sum(g * g) for g in grads.values()))


def convergence_probe(net: SimNetwork, data, total_iters: int, eta0: float, rng, batch_size: int = 32,
                      tail: float = 0.1) -> float:
    """Plain masked SGD with a constant step ``eta0 / sqrt(total_iters)``.

    Masks are left as given. Returns the mean squared norm of the full-batch
    masked gradient over the trailing ``tail`` fraction of iterations.
    """
    net = net.copy()
    opt = OptimizerState(lr=eta0 / math.sqrt(total_iters), momentum=0.0)
    x, y = data.x_train, data.y_train
    start = total_iters - max(1, int(round(tail * total_iters)))
    norms = []
    for t in range(total_iters):
        idx = rng.integers(0, x.shape[0], size=batch_size)
        _, grads = backward(net, x[idx], y[idx])
        sgd_step_masked(opt, net, grads)
        if t + 1 > start:
            norms.append(masked_gradient_norm_sq(net, x, y))
    return float(np.mean(norms))
