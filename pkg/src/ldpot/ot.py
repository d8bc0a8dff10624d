"""Entropic optimal transport between discrete measures.

The regularized problem solved here is

    min_pi  <pi, C> + lam * KL(pi || a (x) b)    over couplings of (a, b),

whose KL term is the mutual information of the coupling.  With ``lam = 1``
the optimal value is the Sinkhorn distance S_C; with ``C = ||x - y||_p^p`` it
is the entropic p-Wasserstein distance W_{p,lam} = lam * S_{C/lam}.

Potentials ``f``, ``g`` are kept in cost units (the lam-scaled convention):

    pi_ij = a_i b_j exp((f_i + g_j - C_ij) / lam)

and the Sinkhorn updates are soft-min reductions evaluated in the log
domain, so large ``C / lam`` cannot overflow.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog
from scipy.special import logsumexp

from ._validation import check_positive, check_weights
from .datasets import as_distribution

__all__ = [
    "CostSpec",
    "CostMatrix",
    "GaussianKernel",
    "LaplaceKernel",
    "TransportPlan",
    "cost_matrix",
    "lp_cost",
    "sinkhorn",
    "entropic_wasserstein",
    "mutual_information",
    "dual_residual",
    "exact_ot_lp",
    "sinkhorn_divergence",
]

EXACT_OT_MAX_SIZE = 4096


# --------------------------------------------------------------------------
# costs

class GaussianKernel:
    """Density of y = x + N(0, sigma^2 I)."""

    def __init__(self, sigma: float):
        self.sigma = check_positive(sigma, "sigma")

    def log_density(self, x, y):
        d = x.shape[-1]
        sq = ((y - x) ** 2).sum(-1)
        return -sq / (2 * self.sigma**2) - 0.5 * d * np.log(2 * np.pi * self.sigma**2)

    def __repr__(self):
        return f"GaussianKernel(sigma={self.sigma!r})"


class LaplaceKernel:
    """Density of y = x + Laplace(0, sigma) noise, i.i.d. over coordinates."""

    def __init__(self, sigma: float):
        self.sigma = check_positive(sigma, "sigma")

    def log_density(self, x, y):
        d = x.shape[-1]
        return -np.abs(y - x).sum(-1) / self.sigma - d * np.log(2 * self.sigma)

    def __repr__(self):
        return f"LaplaceKernel(sigma={self.sigma!r})"


@dataclass(frozen=True)
class CostSpec:
    """Cost function description.

    ``kind="lp"`` gives ``||x - y||_p^p`` with ``p`` in {1, 2}.
    ``kind="neg_log_kernel"`` gives ``-log k(x, y)``; ``kernel`` is an object
    with ``log_density(x, y)``, a callable density ``k(x, y)`` evaluated on
    broadcast arrays, or a precomputed table of densities.
    """

    kind: str = "lp"
    p: int = 2
    lam: float = 1.0
    kernel: object = None

    def __post_init__(self):
        check_positive(self.lam, "lam")
        if self.kind == "lp" and self.p not in (1, 2):
            raise ValueError("p must be 1 or 2")
        if self.kind == "neg_log_kernel" and self.kernel is None:
            raise ValueError("neg_log_kernel cost needs a kernel")
        if self.kind not in ("lp", "neg_log_kernel"):
            raise ValueError(f"unknown cost kind {self.kind!r}")


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray
    rows: str = "x"
    cols: str = "y"

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)

    @property
    def shape(self):
        return self.entries.shape


def lp_cost(X, Y, p: int) -> np.ndarray:
    """Matrix of ``||X_i - Y_j||_p^p`` for p in {1, 2}."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if p == 2:
        diff = X[:, None, :] - Y[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)
    if p == 1:
        return np.abs(X[:, None, :] - Y[None, :, :]).sum(-1)
    raise ValueError("p must be 1 or 2")


def cost_matrix(X, Y, spec: CostSpec) -> CostMatrix:
    """Evaluate the cost between every row of X and every row of Y."""
    Xp = as_distribution(X).points
    Yp = as_distribution(Y).points
    if Xp.shape[1] != Yp.shape[1]:
        raise ValueError(f"dimension mismatch: {Xp.shape[1]} vs {Yp.shape[1]}")
    if spec.kind == "lp":
        return CostMatrix(lp_cost(Xp, Yp, spec.p))
    kern = spec.kernel
    xb, yb = Xp[:, None, :], Yp[None, :, :]
    if hasattr(kern, "log_density"):
        C = -kern.log_density(xb, yb)
    else:
        dens = np.asarray(kern(xb, yb), dtype=np.float64) if callable(kern) else np.asarray(kern, dtype=np.float64)
        if dens.shape != (Xp.shape[0], Yp.shape[0]):
            raise ValueError(f"kernel table has shape {dens.shape}, expected {(Xp.shape[0], Yp.shape[0])}")
        bad = np.argwhere(~(dens > 0))
        if bad.size:
            i, j = bad[0]
            raise ValueError(f"kernel vanishes at pair ({i}, {j}); the cost would be infinite")
        C = -np.log(dens)
    if not np.all(np.isfinite(C)):
        i, j = np.argwhere(~np.isfinite(C))[0]
        raise ValueError(f"cost is not finite at pair ({i}, {j})")
    return CostMatrix(C)


# --------------------------------------------------------------------------
# Sinkhorn

@numba.njit(cache=True)
def _softmin_rows(C, v, lam, out):
    # out_i = -lam * log sum_j exp((v_j - C_ij) / lam); each row reduced in index order
    n, k = C.shape
    for i in range(n):
        m = -np.inf
        for j in range(k):
            t = v[j] - C[i, j]
            if t > m:
                m = t
        s = 0.0
        for j in range(k):
            s += np.exp((v[j] - C[i, j] - m) / lam)
        out[i] = -(m + lam * np.log(s))


@numba.njit(cache=True)
def _sinkhorn_core(C, CT, a, loga, logb, f, g, lam, lam_start, factor, tol, max_iter):
    n = C.shape[0]
    k = C.shape[1]
    va = np.empty(n)
    vb = np.empty(k)
    f_next = np.empty(n)
    it = 0
    cur = lam_start
    while cur > lam and it < max_iter:
        for j in range(k):
            vb[j] = g[j] + cur * logb[j]
        _softmin_rows(C, vb, cur, f)
        for i in range(n):
            va[i] = f[i] + cur * loga[i]
        _softmin_rows(CT, va, cur, g)
        cur *= factor
        it += 1
    for j in range(k):
        vb[j] = g[j] + lam * logb[j]
    _softmin_rows(C, vb, lam, f)
    res = np.inf
    while it < max_iter:
        for i in range(n):
            va[i] = f[i] + lam * loga[i]
        _softmin_rows(CT, va, lam, g)
        it += 1
        for j in range(k):
            vb[j] = g[j] + lam * logb[j]
        _softmin_rows(C, vb, lam, f_next)
        # row sums of the current plan are a_i exp((f_i - f_next_i) / lam)
        res = 0.0
        for i in range(n):
            if a[i] > 0:
                res += a[i] * abs(np.exp((f[i] - f_next[i]) / lam) - 1.0)
        if res <= tol:
            break
        for i in range(n):
            f[i] = f_next[i]
    return it, res


@dataclass
class TransportPlan:
    """Solution of an entropic transport problem.

    Attributes
    ----------
    pi : ndarray (m, k)
    f, g : ndarray
        Dual potentials in cost units, normalized so ``a @ f == b @ g``.
    transport_cost : float
        ``<pi, C>``.
    mutual_information : float
        ``KL(pi || a (x) b)``.
    objective : float
        Dual value ``a @ f + b @ g - lam * (pi.sum() - 1)``; with lam = 1 this
        is the Sinkhorn distance.
    """

    pi: np.ndarray
    f: np.ndarray
    g: np.ndarray
    transport_cost: float
    mutual_information: float
    objective: float
    iterations: int
    marginal_residual: float
    converged: bool
    lam: float
    a: np.ndarray
    b: np.ndarray

    @property
    def primal(self) -> float:
        """``<pi, C> + lam * I_pi`` evaluated on the plan itself."""
        return self.transport_cost + self.lam * self.mutual_information

    @property
    def dual(self) -> float:
        return float(self.a @ self.f + self.b @ self.g)


def _log_weights(w):
    with np.errstate(divide="ignore"):
        return np.log(w)


def plan_from_potentials(C, f, g, a, b, lam):
    la, lb = _log_weights(a), _log_weights(b)
    return np.exp((f[:, None] + g[None, :] - C) / lam + la[:, None] + lb[None, :])


def sinkhorn(C, a=None, b=None, lam=1.0, tol=1e-9, max_iter=10000, epsilon_scaling=None,
             init=None) -> TransportPlan:
    """Log-domain Sinkhorn-Knopp for entropic transport.

    Parameters
    ----------
    C : array-like (m, k) or CostMatrix
    a, b : weight vectors, uniform when omitted.
    lam : float
        Regularization strength (multiplies the mutual information).
    tol : float
        Stop when ``||pi 1 - a||_1 <= tol``; column marginals are exact after
        every g-update.
    max_iter : int
        Total number of (f, g) sweeps, annealing sweeps included.
    epsilon_scaling : float in (0, 1) or None
        If given, start from an effective regularization of ``max(C)`` and
        multiply it by this factor after every sweep until it reaches ``lam``.
    init : (f0, g0) or None
        Warm start potentials in cost units.
    """
    C = np.ascontiguousarray(np.asarray(C, dtype=np.float64))
    if C.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    m, k = C.shape
    a = check_weights(a, m, "a", atol=1e-9)
    b = check_weights(b, k, "b", atol=1e-9)
    lam = check_positive(lam, "lam")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    if epsilon_scaling is not None and not 0 < epsilon_scaling < 1:
        raise ValueError("epsilon_scaling must lie in (0, 1)")
    lam_start = lam
    if epsilon_scaling is not None:
        lam_start = max(float(C.max()), lam)
    if init is None:
        f = np.zeros(m)
        g = np.zeros(k)
    else:
        f = np.array(init[0], dtype=np.float64)
        g = np.array(init[1], dtype=np.float64)
    factor = 1.0 if epsilon_scaling is None else float(epsilon_scaling)
    it, res = _sinkhorn_core(C, np.ascontiguousarray(C.T), a, _log_weights(a), _log_weights(b),
                             f, g, lam, lam_start, factor, float(tol), int(max_iter))
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise AssertionError("non-finite Sinkhorn potentials; log-domain updates should rule this out")
    shift = 0.5 * (a @ f - b @ g)
    f = f - shift
    g = g + shift
    pi = plan_from_potentials(C, f, g, a, b, lam)
    residual = max(np.abs(pi.sum(1) - a).sum(), np.abs(pi.sum(0) - b).sum())
    return TransportPlan(
        pi=pi,
        f=f,
        g=g,
        transport_cost=float((pi * C).sum()),
        mutual_information=mutual_information(pi, a, b),
        objective=float(a @ f + b @ g - lam * (pi.sum() - 1.0)),
        iterations=int(it),
        marginal_residual=float(residual),
        converged=bool(residual <= tol),
        lam=lam,
        a=a,
        b=b,
    )


def mutual_information(pi, a=None, b=None) -> float:
    """``sum pi_ij log(pi_ij / (a_i b_j))`` with 0 log 0 = 0.

    Marginals default to the plan's own row and column sums.
    """
    pi = np.asarray(pi, dtype=np.float64)
    if pi.ndim != 2 or np.any(pi < 0):
        raise ValueError("plan must be a nonnegative matrix")
    a = pi.sum(1) if a is None else np.asarray(a, dtype=np.float64)
    b = pi.sum(0) if b is None else np.asarray(b, dtype=np.float64)
    mask = pi > 0
    denom = np.outer(a, b)[mask]
    if np.any(denom <= 0):
        raise ValueError("plan puts mass outside the support of a (x) b")
    return float(np.sum(pi[mask] * np.log(pi[mask] / denom)))


def dual_residual(plan: TransportPlan, C, a=None, b=None, lam=None) -> float:
    """Largest violation of the fixed-point conditions of the dual potentials."""
    C = np.asarray(C, dtype=np.float64)
    a = plan.a if a is None else np.asarray(a, dtype=np.float64)
    b = plan.b if b is None else np.asarray(b, dtype=np.float64)
    lam = plan.lam if lam is None else float(lam)
    la, lb = _log_weights(a), _log_weights(b)
    rf = plan.f + lam * logsumexp((plan.g[None, :] - C) / lam + lb[None, :], axis=1)
    rg = plan.g + lam * logsumexp((plan.f[:, None] - C) / lam + la[:, None], axis=0)
    return float(max(np.abs(rf[a > 0]).max(), np.abs(rg[b > 0]).max()))


def entropic_wasserstein(X, Y, p=2, lam=1.0, tol=1e-9, max_iter=10000, epsilon_scaling=None,
                         check=True) -> float:
    """W_{p,lam}(X, Y) computed as ``lam * S`` for the cost ``||x - y||_p^p / lam``.

    With ``check=True`` the value is recomputed with the unscaled cost and
    regularization ``lam`` and both routes must agree to 1e-9 relative.
    """
    Xd, Yd = as_distribution(X), as_distribution(Y)
    C = lp_cost(Xd.points, Yd.points, p)
    plan = sinkhorn(C / lam, Xd.weights, Yd.weights, lam=1.0, tol=tol, max_iter=max_iter,
                    epsilon_scaling=epsilon_scaling)
    value = lam * plan.objective
    if check:
        direct = sinkhorn(C, Xd.weights, Yd.weights, lam=lam, tol=tol, max_iter=max_iter,
                          epsilon_scaling=epsilon_scaling).objective
        scale = max(abs(value), abs(direct), 1e-300)
        if abs(value - direct) > 1e-9 * scale and plan.converged:
            raise AssertionError(f"W_plam identity violated: {value!r} vs {direct!r}")
    if not plan.converged:
        warnings.warn(f"Sinkhorn stopped at residual {plan.marginal_residual:.3g}", RuntimeWarning)
    return value


def exact_ot_lp(C, a=None, b=None):
    """Unregularized optimal transport; returns ``(value, plan)``.

    Uniform marginals of equal size are solved as an assignment problem,
    anything else as a transportation linear program.
    """
    C = np.asarray(C, dtype=np.float64)
    m, k = C.shape
    if m > EXACT_OT_MAX_SIZE or k > EXACT_OT_MAX_SIZE:
        raise ValueError(f"exact OT is limited to {EXACT_OT_MAX_SIZE} atoms per side")
    a = check_weights(a, m, "a", atol=1e-9)
    b = check_weights(b, k, "b", atol=1e-9)
    if m == k and np.allclose(a, 1.0 / m, rtol=0, atol=1e-15) and np.allclose(b, 1.0 / k, rtol=0, atol=1e-15):
        rows, cols = linear_sum_assignment(C)
        plan = np.zeros_like(C)
        plan[rows, cols] = 1.0 / m
        return float(C[rows, cols].sum() / m), plan
    # variables pi_ij in row-major order
    row_con = sparse.kron(sparse.eye(m), np.ones((1, k)))
    col_con = sparse.kron(np.ones((1, m)), sparse.eye(k))
    A_eq = sparse.vstack([row_con, col_con]).tocsr()
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = res.x.reshape(m, k)
    return float(res.fun), plan


def sinkhorn_divergence(X, Y, spec: CostSpec = CostSpec(), tol=1e-9, max_iter=10000,
                        epsilon_scaling=None) -> float:
    """Debiased value S(X, Y) - S(X, X)/2 - S(Y, Y)/2 for the given cost."""
    Xd, Yd = as_distribution(X), as_distribution(Y)

    def value(P, Q):
        C = cost_matrix(P, Q, spec).entries
        return sinkhorn(C, P.weights, Q.weights, lam=spec.lam, tol=tol, max_iter=max_iter,
                        epsilon_scaling=epsilon_scaling).objective

    return value(Xd, Yd) - 0.5 * value(Xd, Xd) - 0.5 * value(Yd, Yd)
