"""Channel exploration: masks, CSS pruning, sampling-based regrowing, schedules.

Channels are columns of a layer matrix ``w`` of shape ``(K, C)``. A layer's
``ChannelMask`` holds the retained index set; every pruned channel has an
``ArchivedChannel`` in the ``MruCache`` holding the values it had when it was
pruned, so it can be restored if it is regrown.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import linalg
from .errors import CacheIntegrityError, InvalidArgumentError, InvalidInputError

EMA_DECAY = 0.99
SCHEDULER_KINDS = ("cosine", "linear", "constant")
SAMPLING_MODES = ("importance", "uniform", "deterministic")
INIT_SCHEMES = ("mru", "ema", "zero", "random")

# slack for ceil() of products such as (1 - 0.7) * 10 that land a hair above an integer
_CEIL_SLACK = 1e-9


def robust_ceil(x: float) -> int:
    return math.ceil(x - _CEIL_SLACK)


def retained_count(kappa: float, total: int) -> int:
    """Number of channels kept for sparsity ``kappa``: ceil((1 - kappa) * total)."""
    return robust_ceil((1.0 - kappa) * total)


# --------------------------------------------------------------------------- masks


@dataclass
class ChannelMask:
    layer_id: int
    total_channels: int
    retained: np.ndarray = None

    def __post_init__(self):
        if self.retained is None:
            self.retained = np.arange(self.total_channels)
        r = np.unique(np.asarray(self.retained, dtype=np.int64))
        if len(r) != len(np.asarray(self.retained).ravel()):
            raise InvalidInputError(f"layer {self.layer_id}: duplicate retained indices")
        if r.size == 0:
            raise InvalidInputError(f"layer {self.layer_id}: a layer must retain at least one channel")
        if r[0] < 0 or r[-1] >= self.total_channels:
            raise InvalidInputError(f"layer {self.layer_id}: retained index out of range")
        self.retained = r

    @property
    def pruned(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.total_channels), self.retained)

    def as_bool(self) -> np.ndarray:
        m = np.zeros(self.total_channels, dtype=bool)
        m[self.retained] = True
        return m

    def drop(self, channels: Iterable[int]) -> None:
        self.retained = np.setdiff1d(self.retained, np.asarray(list(channels), dtype=np.int64))
        if self.retained.size == 0:
            raise InvalidInputError(f"layer {self.layer_id}: cannot prune every channel")

    def add(self, channels: Iterable[int]) -> None:
        self.retained = np.union1d(self.retained, np.asarray(list(channels), dtype=np.int64))

    def copy(self) -> "ChannelMask":
        return ChannelMask(self.layer_id, self.total_channels, self.retained.copy())


# --------------------------------------------------------------------------- MRU cache


@dataclass
class ArchivedChannel:
    """Values of one channel at the moment it was pruned.

    ``out_weights`` is the channel's column of its own layer matrix and
    ``in_weights`` the matching row of the next layer (or of the head).
    """

    out_weights: np.ndarray
    in_weights: np.ndarray
    gamma: float
    beta: float
    step_archived: int = 0
    ema_out_weights: Optional[np.ndarray] = None
    ema_in_weights: Optional[np.ndarray] = None
    ema_gamma: Optional[float] = None
    ema_beta: Optional[float] = None

    def arrays(self):
        yield self.out_weights
        yield self.in_weights
        yield np.array([self.gamma, self.beta])
        for extra in (self.ema_out_weights, self.ema_in_weights):
            if extra is not None:
                yield extra

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


class MruCache:
    """Archive of pruned channels keyed by ``(layer, channel)``."""

    def __init__(self):
        self._entries: dict[tuple[int, int], ArchivedChannel] = {}

    def __contains__(self, key) -> bool:
        return tuple(key) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(sorted(self._entries))

    def items(self):
        return sorted(self._entries.items())

    def archive(self, layer: int, channel: int, record: ArchivedChannel) -> None:
        if not record.is_finite():
            raise CacheIntegrityError(f"refusing to archive non-finite values for {(layer, channel)}")
        self._entries[(layer, channel)] = record

    def get(self, layer: int, channel: int) -> ArchivedChannel:
        try:
            return self._entries[(layer, channel)]
        except KeyError:
            raise CacheIntegrityError(f"no archived values for channel {channel} of layer {layer}") from None

    def pop(self, layer: int, channel: int) -> ArchivedChannel:
        record = self.get(layer, channel)
        del self._entries[(layer, channel)]
        return record

    def channels(self, layer: int) -> np.ndarray:
        return np.array(sorted(c for l, c in self._entries if l == layer), dtype=np.int64)

    def check_against(self, masks: Sequence[ChannelMask]) -> None:
        """Raise unless the cache keys are exactly the pruned channels of ``masks``."""
        expected = {(m.layer_id, int(c)) for m in masks for c in m.pruned}
        actual = set(self._entries)
        if expected != actual:
            missing = sorted(expected - actual)
            extra = sorted(actual - expected)
            raise CacheIntegrityError(f"cache/mask mismatch: missing={missing} unexpected={extra}")
        for key, record in self._entries.items():
            if not record.is_finite():
                raise CacheIntegrityError(f"non-finite archived values for {key}")


def ema_update(ema, value, decay: float = EMA_DECAY):
    """One step of the exponential moving average recurrence."""
    return decay * ema + (1.0 - decay) * value


def restore_weights(
    cache: MruCache,
    layer: int,
    channel: int,
    scheme: str,
    rng: Optional[np.random.Generator] = None,
    *,
    layer_width: Optional[int] = None,
    shape: Optional[tuple[int, int]] = None,
) -> ArchivedChannel:
    """Values to splice back in for a regrown channel.

    ``mru`` returns the archived values unchanged and ``ema`` their moving
    averages. ``zero`` and ``random`` work for any channel; they take their
    shapes from the archive when present, otherwise from ``shape`` given as
    ``(len(out_weights), len(in_weights))``. ``random`` draws He-normal values,
    with ``layer_width`` the fan-in of the next layer.
    """
    if scheme not in INIT_SCHEMES:
        raise InvalidArgumentError(f"unknown init scheme {scheme!r}")
    if scheme in ("mru", "ema"):
        record = cache.get(layer, channel)
        if not record.is_finite():
            raise CacheIntegrityError(f"non-finite archived values for {(layer, channel)}")
        if scheme == "mru":
            return record
        if record.ema_out_weights is None or record.ema_in_weights is None:
            raise CacheIntegrityError(f"no EMA values archived for {(layer, channel)}")
        return ArchivedChannel(
            out_weights=record.ema_out_weights,
            in_weights=record.ema_in_weights,
            gamma=record.ema_gamma if record.ema_gamma is not None else record.gamma,
            beta=record.ema_beta if record.ema_beta is not None else record.beta,
            step_archived=record.step_archived,
        )

    if (layer, channel) in cache:
        record = cache.get(layer, channel)
        n_out, n_in = record.out_weights.shape[0], record.in_weights.shape[0]
    elif shape is not None:
        n_out, n_in = shape
    else:
        raise InvalidArgumentError("shape is required for a channel that is not archived")
    if scheme == "zero":
        return ArchivedChannel(np.zeros(n_out), np.zeros(n_in), 0.0, 0.0)
    if rng is None:
        raise InvalidArgumentError("the random scheme needs an rng")
    width = layer_width if layer_width is not None else n_out
    out_w = rng.normal(0.0, math.sqrt(2.0 / n_out), size=n_out)
    in_w = rng.normal(0.0, math.sqrt(2.0 / width), size=n_in)
    return ArchivedChannel(out_w, in_w, 1.0, 0.0)


# --------------------------------------------------------------------------- schedules


@dataclass(frozen=True)
class RegrowSchedule:
    delta0: float
    t_max: int
    dt: int
    kind: str = "cosine"

    def __post_init__(self):
        if not 0.0 < self.delta0 <= 1.0:
            raise InvalidArgumentError(f"delta0 must be in (0, 1], got {self.delta0}")
        if self.dt < 1 or self.t_max < self.dt:
            raise InvalidArgumentError(f"need 1 <= dt <= t_max, got dt={self.dt}, t_max={self.t_max}")
        if self.kind not in SCHEDULER_KINDS:
            raise InvalidArgumentError(f"unknown scheduler {self.kind!r}")

    @property
    def n_steps(self) -> float:
        return self.t_max / self.dt


def delta_at(sched: RegrowSchedule, step: float) -> float:
    """Regrowing factor at exploration step ``step`` (0 past the final step)."""
    n = sched.n_steps
    if step > n:
        return 0.0
    if sched.kind == "cosine":
        return 0.5 * (1.0 + math.cos(step * math.pi / n)) * sched.delta0
    if sched.kind == "linear":
        return sched.delta0 * (1.0 - step / n)
    return sched.delta0


# --------------------------------------------------------------------------- sparsity allocation


@dataclass
class SparsityAllocation:
    global_target: float
    per_layer: np.ndarray  # kappa per layer
    threshold: float  # q(Gamma, S); -inf when nothing is pruned
    pruned_counts: np.ndarray
    totals: np.ndarray

    @property
    def retained_counts(self) -> np.ndarray:
        return self.totals - self.pruned_counts


def allocate_layer_sparsity(gammas: Sequence[Sequence[float]], S: float, pruned=None) -> SparsityAllocation:
    """Per-layer sparsity from the global S-th percentile of |gamma|.

    Exactly ``ceil(S * N)`` channels are marked (before the keep-one clamp):
    the smallest magnitudes, ties broken by channel index and then by layer.
    Channels listed in ``pruned`` (boolean masks, True = already pruned) sort
    ahead of every live channel so the previously pruned set stays inside the
    new one.
    """
    if not 0.0 <= S < 1.0:
        raise InvalidArgumentError(f"S must be in [0, 1), got {S}")
    layers = [np.abs(np.asarray(g, dtype=np.float64).ravel()) for g in gammas]
    if not layers:
        raise InvalidInputError("no layers given")
    for l, g in enumerate(layers):
        if g.size == 0:
            raise InvalidInputError(f"layer {l} has no channels")
        if not np.all(np.isfinite(g)):
            raise InvalidInputError(f"layer {l} has non-finite scaling factors")
    totals = np.array([g.size for g in layers])
    mags = np.concatenate(layers)
    chan = np.concatenate([np.arange(g.size) for g in layers])
    lay = np.concatenate([np.full(g.size, l) for l, g in enumerate(layers)])
    if pruned is None:
        live = np.ones(mags.size, dtype=bool)
    else:
        live = ~np.concatenate([np.asarray(p, dtype=bool).ravel() for p in pruned])

    k = robust_ceil(S * mags.size)
    counts = np.zeros(len(layers), dtype=np.int64)
    threshold = -math.inf
    if k > 0:
        order = np.lexsort((lay, chan, mags, live))
        np.add.at(counts, lay[order[:k]], 1)
        threshold = float(np.sort(mags)[k - 1])
    counts = np.minimum(counts, totals - 1)
    return SparsityAllocation(
        global_target=S,
        per_layer=counts / totals,
        threshold=threshold,
        pruned_counts=counts,
        totals=totals,
    )


# --------------------------------------------------------------------------- pruning


def prune_layer_css(w, kappa: float, active=None) -> tuple[np.ndarray, np.ndarray]:
    """Keep the ceil((1 - kappa) C) columns with the largest leverage scores.

    Leverage scores use the top ``c`` right singular vectors with ``c`` the
    number kept; when ``c`` exceeds the numerical rank the remaining slots go
    to the largest-norm columns. Only columns in ``active`` (default: all) can
    be kept. Returns ``(retained, pruned)`` as sorted index arrays.
    """
    if not 0.0 <= kappa < 1.0:
        raise InvalidArgumentError(f"kappa must be in [0, 1), got {kappa}")
    a = linalg.as_matrix(w)
    n = a.shape[1]
    c = retained_count(kappa, n)
    if active is None:
        cand = np.arange(n)
    else:
        act = np.asarray(active)
        cand = np.flatnonzero(act) if act.dtype == bool else np.unique(act.astype(np.int64))
    if c > cand.size:
        raise InvalidArgumentError(f"asked to keep {c} channels but only {cand.size} are active")

    lev = linalg.leverage_scores(a, c)
    by_score = cand[np.argsort(-lev.scores[cand], kind="stable")]
    chosen = list(by_score[: min(c, lev.c)])
    if len(chosen) < c:
        rest = np.setdiff1d(cand, chosen)
        norms = np.sqrt(np.einsum("ij,ij->j", a[:, rest], a[:, rest]))
        chosen.extend(rest[np.argsort(-norms, kind="stable")][: c - len(chosen)])
    retained = np.sort(np.asarray(chosen, dtype=np.int64))
    return retained, np.setdiff1d(np.arange(n), retained)


# --------------------------------------------------------------------------- regrowing


def sample_without_replacement(probs, k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``k`` distinct indices by repeated categorical draws, renormalising each time."""
    p = np.asarray(probs, dtype=np.float64).copy()
    k = min(k, p.size)
    out = np.empty(k, dtype=np.int64)
    for i in range(k):
        cdf = np.cumsum(p)
        u = rng.random() * cdf[-1]
        j = int(np.searchsorted(cdf, u, side="right"))
        j = min(j, p.size - 1)
        while p[j] == 0.0:  # u landed on the upper edge of a zero-mass tail
            j -= 1
        out[i] = j
        p[j] = 0.0
    return out


def importance_sample(scores, k: int, rng: np.random.Generator) -> np.ndarray:
    """Sample ``k`` positions with probability softmax(scores), without replacement."""
    return sample_without_replacement(linalg.softmax(scores), k, rng)


def regrow_layer(
    mask: ChannelMask,
    cache: MruCache,
    w,
    k: int,
    mode: str = "importance",
    rng: Optional[np.random.Generator] = None,
    *,
    scheme: str = "mru",
    init_rng: Optional[np.random.Generator] = None,
    input_mask=None,
) -> dict[int, ArchivedChannel]:
    """Reactivate up to ``k`` pruned channels of one layer.

    ``w`` is the live layer matrix; its retained columns form the active set.
    Candidates are scored by the orthogonality of their archived columns
    (rows outside ``input_mask`` zeroed) against the active set. The chosen
    channels are added to ``mask``, their archive entries are removed from
    ``cache``, and a mapping channel -> values to splice in is returned.
    """
    if mode not in SAMPLING_MODES:
        raise InvalidArgumentError(f"unknown sampling mode {mode!r}")
    a = linalg.as_matrix(w)
    candidates = mask.pruned
    k = max(0, min(int(k), candidates.size))
    if k == 0:
        return {}

    if mode == "uniform":
        picked = candidates[sample_without_replacement(np.ones(candidates.size), k, rng)]
    else:
        rows = np.ones(a.shape[0], dtype=bool) if input_mask is None else np.asarray(input_mask, dtype=bool)
        cols = np.stack([cache.get(mask.layer_id, int(j)).out_weights for j in candidates], axis=1)
        cols = cols * rows[:, None]
        eps = linalg.orthogonality_scores(a[:, mask.retained], cols)
        if mode == "importance":
            picked = candidates[importance_sample(eps, k, rng)]
        else:
            picked = candidates[np.argsort(-eps, kind="stable")[:k]]

    restored = {}
    for j in sorted(int(j) for j in picked):
        restored[j] = restore_weights(
            cache, mask.layer_id, j, scheme, init_rng, layer_width=mask.total_channels
        )
        cache.pop(mask.layer_id, j)
    mask.add(restored)
    return restored
