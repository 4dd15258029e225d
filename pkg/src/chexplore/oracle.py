"""Independent reference computations used to check the main code paths.

Nothing here calls into ``linalg``, ``explore`` or ``simnet`` for the quantity
being checked. The SVD is obtained from a two-sided cyclic Jacobi
eigensolver applied to the Gram matrix ``w.T @ w``, which is a different
algorithm from the one-sided Jacobi in ``linalg``; the network forward pass
is re-written channel by channel.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import InvalidArgumentError, SizeGuardError

MAX_CSS_COLUMNS = 12
# Gram eigenvalues below this fraction of the largest are zero (singular-value ratio 1e-6)
GRAM_RTOL = 1e-12


# --------------------------------------------------------------------------- eigen / SVD


def jacobi_eigh(a, tol: float = 1e-15, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in decreasing order and the matching eigenvectors
    as columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= tol * max(np.linalg.norm(np.diag(a)), 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                j = np.eye(n)
                j[p, p] = j[q, q] = c
                j[p, q] = s
                j[q, p] = -s
                a = j.T @ a @ j
                v = v @ j
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]


def full_svd(w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(u, s, v)`` with ``v`` the full set of right singular vectors (n x n).

    Only the first ``rank`` columns of ``u`` are meaningful.
    """
    w = np.asarray(w, dtype=np.float64)
    lam, v = jacobi_eigh(w.T @ w)
    lam = np.where(lam > GRAM_RTOL * max(lam[0], 0.0), lam, 0.0) if lam.size else lam
    s = np.sqrt(lam)
    u = np.zeros((w.shape[0], s.size))
    nz = s > 0
    u[:, nz] = (w @ v[:, nz]) / s[nz]
    return u, s, v


def oracle_rank(s: np.ndarray) -> int:
    return int(np.count_nonzero(s > 0))


def oracle_pinv(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    u, s, v = full_svd(w)
    r = oracle_rank(s)
    return v[:, :r] @ np.diag(1.0 / s[:r]) @ u[:, :r].T


def oracle_leverage_scores(w, c: int) -> np.ndarray:
    _, s, v = full_svd(w)
    c = min(c, oracle_rank(s))
    return np.array([np.sum(v[j, :c] ** 2) for j in range(v.shape[0])])


def projection_residual(w, subset, norm: str = "frobenius") -> float:
    """``||w - C C^+ w||`` with ``C`` the chosen columns, via the Gram-Jacobi SVD."""
    w = np.asarray(w, dtype=np.float64)
    cols = w[:, list(subset)]
    r = w - cols @ oracle_pinv(cols) @ w
    if norm == "frobenius":
        return math.sqrt(float(np.sum(r * r)))
    if norm == "spectral":
        lam, _ = jacobi_eigh(r.T @ r)
        return math.sqrt(max(lam[0], 0.0))
    raise InvalidArgumentError(f"unknown norm {norm!r}")


def oracle_orthogonality(active, candidates) -> np.ndarray:
    """Least-squares residuals from the normal equations ``(T^T T) x = T^T w_j``."""
    t = np.asarray(active, dtype=np.float64)
    x = np.asarray(candidates, dtype=np.float64)
    if t.shape[1] == 0:
        return np.sum(x * x, axis=0)
    lam, v = jacobi_eigh(t.T @ t)
    keep = lam > GRAM_RTOL * max(lam[0], 0.0)
    gram_pinv = v[:, keep] @ np.diag(1.0 / lam[keep]) @ v[:, keep].T
    out = []
    for j in range(x.shape[1]):
        coef = gram_pinv @ (t.T @ x[:, j])
        res = x[:, j] - t @ coef
        out.append(float(res @ res))
    return np.array(out)


# --------------------------------------------------------------------------- CSS


@dataclass
class CssOracleResult:
    best_subset: tuple
    best_error: float
    all_errors: dict


def brute_force_css(w, c: int, norm: str = "frobenius") -> CssOracleResult:
    """Exact column subset selection optimum by enumerating every subset."""
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[1]
    if n > MAX_CSS_COLUMNS:
        raise SizeGuardError(f"refusing to enumerate subsets of {n} columns (limit {MAX_CSS_COLUMNS})")
    if not 1 <= c <= n:
        raise InvalidArgumentError(f"c must be in [1, {n}], got {c}")
    errors = {subset: projection_residual(w, subset, norm) for subset in itertools.combinations(range(n), c)}
    best = min(errors, key=lambda s: (errors[s], s))
    return CssOracleResult(best_subset=best, best_error=errors[best], all_errors=errors)


# --------------------------------------------------------------------------- gradients


def finite_diff_grad(loss_fn: Callable[[], float], params, h: float = 1e-5):
    """Central differences of ``loss_fn()`` w.r.t. every coordinate of ``params``.

    ``params`` is an array or a dict of arrays; they are perturbed in place
    and restored, so ``loss_fn`` should read them when called.
    """
    if not 1e-7 <= h <= 1e-3:
        raise InvalidArgumentError(f"h must be in [1e-7, 1e-3], got {h}")
    if isinstance(params, dict):
        return {k: finite_diff_grad(loss_fn, v, h) for k, v in params.items()}
    grad = np.zeros_like(params, dtype=np.float64)
    flat = params.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        g[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a, b) -> float:
    """``||a - b|| / max(||a||, ||b||)``, 0 when both vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - b) / scale)


# --------------------------------------------------------------------------- sampling


class FrequencyResult(NamedTuple):
    tv_distance: float
    chi_square_stat: float


def frequency_test(draw_fn: Callable[[], int], expected_probs, trials: int) -> FrequencyResult:
    """Compare ``trials`` draws of ``draw_fn`` with ``expected_probs``."""
    if trials < 10_000:
        raise InvalidArgumentError(f"need at least 10,000 trials, got {trials}")
    p = np.asarray(expected_probs, dtype=np.float64)
    counts = np.zeros(p.size)
    for _ in range(trials):
        counts[int(draw_fn())] += 1
    emp = counts / trials
    tv = 0.5 * float(np.sum(np.abs(emp - p)))
    expected = trials * p
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(expected > 0, (counts - expected) ** 2 / expected, np.where(counts > 0, np.inf, 0.0))
    return FrequencyResult(tv, float(np.sum(terms)))


# --------------------------------------------------------------------------- network


def reference_forward(params: dict, masks, bn_mode: str, x, eps: float = 1e-5) -> np.ndarray:
    """Logits of the channelized network, written out channel by channel.

    ``masks`` is one boolean vector per hidden layer (True = retained).
    """
    a = np.asarray(x, dtype=np.float64)
    n = a.shape[0]
    in_keep = np.ones(a.shape[1], dtype=bool)
    layer = 0
    while f"w{layer}" in params:
        w = params[f"w{layer}"]
        keep = np.asarray(masks[layer], dtype=bool)
        out = np.zeros((n, w.shape[1]))
        for j in range(w.shape[1]):
            if not keep[j]:
                continue
            z = np.zeros(n)
            for i in range(w.shape[0]):
                if in_keep[i]:
                    z = z + a[:, i] * w[i, j]
            if bn_mode == "standardize":
                mean = sum(z) / n
                var = sum((z - mean) ** 2) / n
                z = (z - mean) / math.sqrt(var + eps)
            out[:, j] = np.maximum(params[f"gamma{layer}"][j] * z + params[f"beta{layer}"][j], 0.0)
        a, in_keep = out, keep
        layer += 1
    head = params["head_w"] * in_keep[:, None]
    return a @ head + params["head_b"]


def reference_loss(params: dict, masks, bn_mode: str, x, labels) -> float:
    logits = reference_forward(params, masks, bn_mode, x)
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        total += -(row[y] - m - math.log(sum(math.exp(v - m) for v in row)))
    return total / len(labels)


# --------------------------------------------------------------------------- suite


class Check(NamedTuple):
    name: str
    passed: bool
    detail: str


def run_suite(seed: int = 0) -> list[Check]:
    """Cross-check every closed-form component against its oracle."""
    from . import explore, linalg
    from .simnet.network import SimNetwork, backward, forward

    rng = np.random.default_rng(seed)
    checks = []

    def add(name, ok, detail):
        checks.append(Check(name, bool(ok), detail))

    w = rng.standard_normal((5, 7))
    got = linalg.top_right_singular_vectors(w, 3).singular_values
    _, s, _ = full_svd(w)
    err = float(np.max(np.abs(got - s[:3])))
    add("svd singular values vs Gram-Jacobi", err <= 1e-8, f"max abs diff {err:.2e}")

    worst, worst_sum = 0.0, 0.0
    for _ in range(20):
        m, n = rng.integers(2, 9, size=2)
        a = rng.standard_normal((m, n))
        c = int(rng.integers(1, min(m, n) + 1))
        lev = linalg.leverage_scores(a, c)
        worst = max(worst, float(np.max(np.abs(lev.scores - oracle_leverage_scores(a, c)))))
        worst_sum = max(worst_sum, abs(float(lev.scores.sum()) - c))
    add("leverage scores vs oracle", worst <= 1e-8 and worst_sum <= 1e-6, f"max diff {worst:.2e}, sum err {worst_sum:.2e}")

    a = rng.standard_normal((4, 2)) @ rng.standard_normal((2, 3))
    pa = linalg.pseudo_inverse(a)
    penrose = max(
        np.linalg.norm(a @ pa @ a - a),
        np.linalg.norm(pa @ a @ pa - pa),
        np.linalg.norm((a @ pa).T - a @ pa),
        np.linalg.norm((pa @ a).T - pa @ a),
    )
    add("pseudo-inverse Penrose identities", penrose <= 1e-6, f"worst residual {penrose:.2e}")

    a = rng.standard_normal((4, 6))
    diff = 0.0
    for r in range(1, 7):
        for subset in itertools.combinations(range(6), r):
            diff = max(diff, abs(linalg.css_reconstruction_error(a, subset) - projection_residual(a, subset)))
    add("CSS residual vs projection oracle", diff <= 1e-8, f"max diff {diff:.2e}")

    t, x = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
    diff = float(np.max(np.abs(linalg.orthogonality_scores(t, x) - oracle_orthogonality(t, x))))
    add("orthogonality vs normal equations", diff <= 1e-8, f"max diff {diff:.2e}")

    sm = linalg.softmax([1.0, 2.0, 3.0])
    ref = np.array([math.exp(v) for v in (1.0, 2.0, 3.0)])
    diff = float(np.max(np.abs(sm - ref / ref.sum())))
    add("softmax direct evaluation", diff <= 1e-12, f"max diff {diff:.2e}")

    draw_rng = np.random.default_rng(seed + 1)
    res = frequency_test(lambda: explore.importance_sample([1.0, 2.0, 3.0], 1, draw_rng)[0], ref / ref.sum(), 100_000)
    add("importance sampler frequencies", res.tv_distance <= 0.01, f"TV {res.tv_distance:.4f}")

    worst_ratio = 1.0
    ok = True
    for _ in range(20):
        a = rng.standard_normal((4, 8))
        kept, _ = explore.prune_layer_css(a, 0.75)
        mine = projection_residual(a, kept)
        best = brute_force_css(a, 2).best_error
        ok &= best <= mine + 1e-12
        worst_ratio = max(worst_ratio, mine / best)
    add("brute-force CSS <= leverage selection", ok, f"worst ratio {worst_ratio:.3f}")

    worst_fwd, worst_grad = 0.0, 0.0
    for bn_mode in ("standardize", "scale_only"):
        net = SimNetwork.initialize([3, 5, 4, 2], rng, bn_mode=bn_mode)
        net.masks[0].drop([1])
        net.params["w0"][:, 1] = 0.0
        net.params["w1"][1, :] = 0.0
        net.params["gamma0"][1] = net.params["beta0"][1] = 0.0
        xb = rng.standard_normal((6, 3))
        yb = rng.integers(0, 2, size=6)
        bools = [m.as_bool() for m in net.masks]
        worst_fwd = max(worst_fwd, float(np.max(np.abs(forward(net, xb).logits - reference_forward(net.params, bools, bn_mode, xb)))))
        _, grads = backward(net, xb, yb)
        numeric = finite_diff_grad(lambda: reference_loss(net.params, bools, bn_mode, xb, yb), net.params)
        for k in grads:
            worst_grad = max(worst_grad, relative_error(grads[k], numeric[k]))
    add("forward vs channel-by-channel reference", worst_fwd <= 1e-10, f"max diff {worst_fwd:.2e}")
    add("backward vs finite differences", worst_grad <= 1e-4, f"worst relative error {worst_grad:.2e}")
    return checks
