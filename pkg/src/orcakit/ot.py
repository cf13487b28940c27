"""Discrete optimal transport: log-domain Sinkhorn, an exact small-instance
oracle, and the closed-form 2-Wasserstein distance between Gaussians."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .tensor import ensure_finite, logsumexp_rows, sqrtm_psd

MARGINAL_TOL = 1e-6
DEFAULT_EPS_FRACTION = 0.05  # eps = 0.05 * mean(cost) when unspecified


def validate_histogram(w: np.ndarray, name: str = "histogram") -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size == 0:
        raise ContractError(f"{name}: empty")
    if np.any(w < 0):
        raise ContractError(f"{name}: negative weight")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ContractError(f"{name}: weights sum to {w.sum():.12g}, not 1")
    return w


@dataclass
class TransportPlan:
    matrix: np.ndarray          # n x m, nonnegative
    value: float                # sum(plan * cost), entropy term excluded
    eps: float                  # regularization used (0 for exact solves)
    converged: bool = True
    iterations: int = 0

    def marginal_errors(self, a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
        row = float(np.abs(self.matrix.sum(axis=1) - a).max())
        col = float(np.abs(self.matrix.sum(axis=0) - b).max())
        return row, col


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.size
        if self.cov.shape != (d, d):
            raise ShapeError(f"covariance shape {self.cov.shape} != ({d}, {d})")


def default_eps(cost: np.ndarray) -> float:
    m = float(np.mean(cost))
    return DEFAULT_EPS_FRACTION * m if m > 0 else 1e-3


def sinkhorn_log(cost, a, b, eps=None, max_iter: int = 1000, tol: float = MARGINAL_TOL) -> TransportPlan:
    """Entropy-regularized OT in the log domain (dual potentials f, g).

    Returns the plan and its linear cost sum(pi * cost); a convergence flag is
    set instead of raising when the marginal tolerance is not reached within
    max_iter. Zero-mass atoms are dropped and reinserted as zero rows/columns.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ContractError("sinkhorn_log: non-finite cost entries")
    a = validate_histogram(a, "a")
    b = validate_histogram(b, "b")
    if cost.shape != (a.size, b.size):
        raise ShapeError(f"cost shape {cost.shape} vs histogram sizes ({a.size}, {b.size})")
    if eps is None:
        eps = default_eps(cost)
    if eps <= 0:
        raise ContractError("sinkhorn_log: eps must be positive")

    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    c = cost[np.ix_(ia, ib)]
    la = np.log(a[ia])
    lb = np.log(b[ib])

    f = np.zeros(ia.size)
    g = np.zeros(ib.size)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f = eps * (la - logsumexp_rows((g[None, :] - c) / eps, axis=1))
        g = eps * (lb - logsumexp_rows((f[:, None] - c) / eps, axis=0))
        pi = np.exp((f[:, None] + g[None, :] - c) / eps)
        row_err = np.abs(pi.sum(axis=1) - a[ia]).max()
        col_err = np.abs(pi.sum(axis=0) - b[ib]).max()
        if max(row_err, col_err) < tol:
            converged = True
            break

    plan = np.zeros(cost.shape)
    plan[np.ix_(ia, ib)] = pi
    ensure_finite(plan, "sinkhorn plan")
    value = float(np.sum(plan * cost, dtype=np.float64))
    return TransportPlan(matrix=plan, value=value, eps=float(eps), converged=converged, iterations=it)


def _basic_feasible_plans(a: np.ndarray, b: np.ndarray):
    """All basic feasible solutions of the transportation polytope.

    Every vertex is supported on n+m-1 cells whose incidence columns are
    linearly independent; enumerating those supports and solving the flow
    system yields every candidate optimum. Solves are batched per chunk.
    """
    n, m = a.size, b.size
    k = n + m - 1
    incidence = np.zeros((k, n * m))
    for i in range(n):
        incidence[i, i * m : (i + 1) * m] = 1.0
    for j in range(m - 1):  # last column constraint is redundant
        incidence[n + j, j::m] = 1.0
    rhs = np.concatenate([a, b[:-1]])

    supports = np.array(list(itertools.combinations(range(n * m), k)))
    for chunk in np.array_split(supports, max(1, supports.shape[0] // 4096)):
        mats = incidence[:, chunk]                      # (k, n_chunk, k)
        mats = np.moveaxis(mats, 1, 0)                  # (n_chunk, k, k)
        dets = np.abs(np.linalg.det(mats))
        ok = dets > 1e-9
        if not ok.any():
            continue
        flows = np.linalg.solve(
            mats[ok], np.broadcast_to(rhs[:, None], (int(ok.sum()), k, 1)).copy()
        )[..., 0]
        feasible = (flows >= -1e-12).all(axis=1)
        for support, flow in zip(chunk[ok][feasible], flows[feasible]):
            plan = np.zeros(n * m)
            plan[support] = np.maximum(flow, 0.0)
            yield plan.reshape(n, m)


def exact_ot_enum(cost, a, b) -> TransportPlan:
    """Exact OT on small instances; a test oracle, independent of Sinkhorn.

    Uniform square instances are solved by assignment enumeration over all
    permutations; general instances enumerate transport-polytope vertices via
    basis-support enumeration (sizes <= 5) or fall back to an LP solve.
    """
    cost = np.asarray(cost, dtype=np.float64)
    a = validate_histogram(a, "a")
    b = validate_histogram(b, "b")
    n, m = cost.shape
    if n > 8 or m > 8:
        raise ContractError(f"exact_ot_enum: instance {n}x{m} above the 8x8 cap")

    uniform = (
        n == m
        and np.allclose(a, 1.0 / n, atol=1e-12)
        and np.allclose(b, 1.0 / m, atol=1e-12)
    )
    if uniform:
        best_val = np.inf
        best_perm = None
        for perm in itertools.permutations(range(n)):
            v = sum(cost[i, perm[i]] for i in range(n)) / n
            if v < best_val - 1e-15:
                best_val = v
                best_perm = perm
        plan = np.zeros((n, m))
        for i in range(n):
            plan[i, best_perm[i]] = 1.0 / n
        return TransportPlan(matrix=plan, value=float(best_val), eps=0.0)

    if n <= 5 and m <= 5:
        best_val = np.inf
        best_plan = None
        for plan in _basic_feasible_plans(a, b):
            v = float(np.sum(plan * cost))
            if v < best_val - 1e-15:
                best_val = v
                best_plan = plan
        return TransportPlan(matrix=best_plan, value=best_val, eps=0.0)

    # 6..8 on a side: vertex enumeration explodes; exact LP instead
    from scipy.optimize import linprog

    c_flat = cost.ravel()
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    res = linprog(c_flat, A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if not res.success:
        raise NumericError(f"exact_ot_enum: LP solve failed: {res.message}")
    return TransportPlan(matrix=res.x.reshape(n, m), value=float(res.fun), eps=0.0)


def gaussian_w2(g1: GaussianStats, g2: GaussianStats) -> float:
    """Closed-form 2-Wasserstein (Bures) distance between two Gaussians."""
    if g1.mean.size != g2.mean.size:
        raise ShapeError(f"dimension mismatch: {g1.mean.size} vs {g2.mean.size}")
    dm = g1.mean - g2.mean
    s2 = sqrtm_psd(g2.cov)
    cross = sqrtm_psd(s2 @ g1.cov @ s2, sym_tol=1e-5)
    val = float(dm @ dm + np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * np.trace(cross))
    return float(np.sqrt(max(val, 0.0)))
