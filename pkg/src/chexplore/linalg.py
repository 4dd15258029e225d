"""Dense linear algebra used by the channel exploration engine.

Everything here is a pure function of its inputs. The SVD is a one-sided
(Hestenes) Jacobi method with a round-robin pair ordering, so every round
rotates ``n // 2`` disjoint column pairs at once with vectorised numpy.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidInputError, ShapeError

# singular values below RANK_TOL * sigma_max are treated as zero
RANK_TOL = 1e-10
_EPS = np.finfo(np.float64).eps
_MAX_SWEEPS = 80


@dataclass(frozen=True)
class SvdFactors:
    singular_values: np.ndarray  # (c,) non-increasing
    right_vectors: np.ndarray  # (cols, c), orthonormal columns

    @property
    def c(self) -> int:
        return self.singular_values.shape[0]


@dataclass(frozen=True)
class LeverageScores:
    scores: np.ndarray  # one per column of the source matrix
    c: int  # number of singular vectors actually used (after clamping)

    def __len__(self):
        return self.scores.shape[0]


def as_matrix(w, name: str = "w") -> np.ndarray:
    """Return ``w`` as a finite 2-D float64 array or raise."""
    a = np.asarray(w, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # circle method: n-1 rounds (n padded to even), each a perfect matching
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _orthogonalize_columns(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Jacobi: find orthogonal ``v`` so the columns of ``a @ v`` are orthogonal."""
    a = a.copy()
    m, n = a.shape
    v = np.eye(n)
    if n < 2:
        return a, v
    tol = _EPS * max(m, 1)
    rounds = _round_robin(n)
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            g = np.where(active, gamma, 1.0)
            with np.errstate(over="ignore", divide="ignore"):
                zeta = (beta - alpha) / (2.0 * g)
            # a vanishing off-diagonal term (|zeta| huge or inf) is orthogonal already
            active &= np.abs(zeta) < 1e150
            if not active.any():
                continue
            rotated = True
            zeta = np.where(active, zeta, 0.0)
            sign = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    return a, v


def thin_svd(w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``w = u @ diag(s) @ v.T`` with ``k = min(rows, cols)`` factors.

    Columns of ``u``/``v`` belonging to zero singular values are zero rather
    than an arbitrary orthonormal completion.
    """
    a = as_matrix(w)
    m, n = a.shape
    if m < n:
        u, s, v = thin_svd(a.T)
        return v, s, u
    rot, v = _orthogonalize_columns(a)
    s = np.sqrt(np.einsum("ij,ij->j", rot, rot))
    order = np.argsort(-s, kind="stable")
    s, rot, v = s[order], rot[:, order], v[:, order]
    nonzero = s > 0.0
    u = np.zeros_like(rot)
    u[:, nonzero] = rot[:, nonzero] / s[nonzero]
    return u, s, v


def numerical_rank(s: np.ndarray) -> int:
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > RANK_TOL * s[0]))


def top_right_singular_vectors(w, c: int) -> SvdFactors:
    """Top-``c`` right singular vectors of ``w``.

    ``c`` is clamped to the numerical rank of ``w``, so the returned factors
    may hold fewer than ``c`` vectors (none at all for a zero matrix).
    """
    if c < 1:
        raise InvalidArgumentError(f"c must be >= 1, got {c}")
    _, s, v = thin_svd(w)
    keep = min(c, numerical_rank(s))
    return SvdFactors(singular_values=s[:keep].copy(), right_vectors=v[:, :keep].copy())


def pseudo_inverse(w) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via the Jacobi SVD."""
    a = as_matrix(w)
    m, n = a.shape
    if a.size == 0:
        return np.zeros((n, m))
    u, s, v = thin_svd(a)
    r = numerical_rank(s)
    return (v[:, :r] / s[:r]) @ u[:, :r].T


def _spectral_norm(a: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    _, s, _ = thin_svd(a)
    return float(s[0])


def css_reconstruction_error(w, selected: Iterable[int], norm: str = "frobenius") -> float:
    """Residual ``||w - w_c w_c^+ w||`` after projecting onto the selected columns.

    The norm itself is returned, not its square.
    """
    a = as_matrix(w)
    idx = sorted(set(int(j) for j in selected))
    if not idx:
        raise InvalidArgumentError("selection must be non-empty")
    if idx[0] < 0 or idx[-1] >= a.shape[1]:
        raise InvalidArgumentError(f"selected indices out of range for {a.shape[1]} columns")
    wc = a[:, idx]
    residual = a - wc @ (pseudo_inverse(wc) @ a)
    if norm == "frobenius":
        return float(np.sqrt(np.sum(residual * residual)))
    if norm == "spectral":
        return _spectral_norm(residual)
    raise InvalidArgumentError(f"unknown norm {norm!r}; expected 'frobenius' or 'spectral'")


def leverage_scores(w, c: int) -> LeverageScores:
    """Squared row norms of the top-``c`` right singular vector matrix."""
    factors = top_right_singular_vectors(w, c)
    v = factors.right_vectors
    return LeverageScores(scores=np.einsum("ij,ij->i", v, v), c=factors.c)


def orthogonality_scores(active, candidates) -> np.ndarray:
    """Squared residual of each candidate column after projection onto span(active).

    ``active`` may have zero columns, in which case the score is the squared
    norm of the candidate.
    """
    t = np.asarray(active, dtype=np.float64)
    x = as_matrix(candidates, "candidates")
    if t.ndim == 1:
        t = t.reshape(-1, 1)
    if t.shape[0] != x.shape[0]:
        raise ShapeError(f"active has {t.shape[0]} rows but candidates have {x.shape[0]}")
    if t.shape[1] == 0:
        return np.einsum("ij,ij->j", x, x)
    t = as_matrix(t, "active")
    # (T^T T)^+ T^T == T^+ ; the latter avoids squaring the condition number
    residual = x - t @ (pseudo_inverse(t) @ x)
    return np.einsum("ij,ij->j", residual, residual)


def softmax(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise InvalidArgumentError("softmax of an empty sequence")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("softmax input contains non-finite values")
    e = np.exp(v - v.max())
    return e / e.sum()
