"""Deconvolution on a finite grid by entropic projection.

Given a row-stochastic channel ``K`` (``K[i, j] = P(y_j | x_i)``) and the
observed law ``p_y = p_x @ K``, the distribution of the private input is
estimated as

    q* = argmin_q  S_c(q, p_y),     c_ij = -log K_ij,

over the probability simplex on ``support_x``.  At ``q = p_x`` the coupling
``p_x[i] K[i, j]`` is optimal and the value is the entropy of ``p_y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import logsumexp
from sklearn.base import BaseEstimator

from ._rng import substream
from ._validation import check_positive, check_weights
from .ot import _log_weights, _sinkhorn_core, lp_cost, sinkhorn
from .privacy import _noise

__all__ = [
    "GridModel",
    "additive_kernel",
    "forward_push",
    "projection_objective",
    "entropic_projection",
    "ProjectionResult",
    "ProjectionNotConverged",
    "kl_discrete",
    "total_variation",
    "lemma1_gap",
    "EntropicDeconvolver",
]


def _as_support(points, name):
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1 or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be a finite (k, d) array")
    return arr


@dataclass(frozen=True)
class GridModel:
    """A discrete channel between two finite supports plus input/output laws."""

    support_x: np.ndarray
    support_y: np.ndarray
    kernel: np.ndarray
    p_x: np.ndarray | None = None
    p_y: np.ndarray | None = None

    def __post_init__(self):
        sx = _as_support(self.support_x, "support_x")
        sy = _as_support(self.support_y, "support_y")
        K = np.asarray(self.kernel, dtype=np.float64)
        if K.shape != (sx.shape[0], sy.shape[0]):
            raise ValueError(f"kernel has shape {K.shape}, expected {(sx.shape[0], sy.shape[0])}")
        if not np.all(K > 0) or not np.all(np.isfinite(K)):
            raise ValueError("kernel entries must be strictly positive and finite")
        if np.abs(K.sum(1) - 1).max() > 1e-12:
            raise ValueError("kernel rows must sum to 1")
        object.__setattr__(self, "support_x", sx)
        object.__setattr__(self, "support_y", sy)
        object.__setattr__(self, "kernel", K)
        px = self.p_x
        py = self.p_y
        if px is not None:
            px = check_weights(px, sx.shape[0], "p_x")
            if py is None:
                py = forward_push(px, K)
        if py is not None:
            py = check_weights(py, sy.shape[0], "p_y", atol=1e-9)
        object.__setattr__(self, "p_x", px)
        object.__setattr__(self, "p_y", py)

    @property
    def cost(self) -> np.ndarray:
        return -np.log(self.kernel)

    @classmethod
    def additive(cls, support_x, sigma, mech="gaussian", p_x=None, support_y=None):
        """Channel ``y = x + noise`` discretized onto ``support_y`` (default: ``support_x``)."""
        sx = _as_support(support_x, "support_x")
        sy = sx if support_y is None else _as_support(support_y, "support_y")
        return cls(sx, sy, additive_kernel(sx, sy, sigma, mech), p_x=p_x)


def additive_kernel(support_x, support_y, sigma, mech="gaussian") -> np.ndarray:
    """Row-normalized ``K[i, j] ∝ density(y_j - x_i)`` for Gaussian or Laplace noise of scale sigma."""
    sigma = check_positive(sigma, "sigma")
    sx = _as_support(support_x, "support_x")
    sy = _as_support(support_y, "support_y")
    if mech == "gaussian":
        logk = -lp_cost(sx, sy, 2) / (2 * sigma**2)
    elif mech == "laplace":
        logk = -lp_cost(sx, sy, 1) / sigma
    else:
        raise ValueError(f"unknown mechanism {mech!r}")
    logk -= logk.max(1, keepdims=True)
    K = np.exp(logk)
    return K / K.sum(1, keepdims=True)


def forward_push(p_x, kernel) -> np.ndarray:
    """Output law ``p_y[j] = sum_i p_x[i] K[i, j]``."""
    K = np.asarray(kernel, dtype=np.float64)
    p = np.asarray(p_x, dtype=np.float64).ravel()
    if K.ndim != 2 or p.shape[0] != K.shape[0]:
        raise ValueError(f"p_x of length {p.shape[0]} does not match kernel of shape {K.shape}")
    return p @ K


def kl_discrete(p, q) -> float:
    """``sum p_i log(p_i / q_i)`` with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ValueError("p and q must have the same length")
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise ValueError("p is not absolutely continuous with respect to q")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())


class _InnerSolver:
    """Keeps the Sinkhorn warm start between successive objective evaluations."""

    def __init__(self, C, p_y, tol, max_iter):
        self.C = np.ascontiguousarray(C)
        self.CT = np.ascontiguousarray(C.T)
        self.p_y = p_y
        self.logb = _log_weights(p_y)
        self.g = np.zeros(C.shape[1])
        self.tol = tol
        self.max_iter = max_iter

    def __call__(self, q):
        f = np.zeros(self.C.shape[0])
        g = self.g.copy()
        _, res = _sinkhorn_core(self.C, self.CT, q, _log_weights(q), self.logb, f, g, 1.0, 1.0, 1.0,
                                self.tol, self.max_iter)
        # potentials are exact fixed points for (f, g) up to the row residual
        value = float(q @ f + self.p_y @ g)
        return value, f, g, float(res)

    def accept(self, g):
        self.g = g


def projection_objective(model: GridModel, q, tol=1e-13, max_iter=100000):
    """``S_c(q, p_y)`` and its first variation in ``q`` (the row potential, centred)."""
    q = check_weights(q, model.kernel.shape[0], "q", atol=1e-9)
    plan = sinkhorn(model.cost, q, model.p_y, lam=1.0, tol=tol, max_iter=max_iter)
    grad = plan.f - q @ plan.f
    return plan.objective, grad


class ProjectionNotConverged(RuntimeError):
    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


@dataclass
class ProjectionResult:
    q: np.ndarray
    objective: float
    iterations: int
    residual: float
    converged: bool
    history: list = field(default_factory=list)


def _bregman(qn, q):
    m = qn > 0
    return float(np.sum(qn[m] * (np.log(qn[m]) - np.log(q[m]))))


def entropic_projection(model: GridModel, lam=1.0, step=1.0, tol=1e-10, max_iter=20000, q0=None,
                        step_rule="accelerated", inner_tol=1e-13, inner_max_iter=100000,
                        raise_on_failure=False, record_every=0) -> ProjectionResult:
    """Minimize ``q -> S_c(q, p_y)`` over the simplex by mirror descent.

    The first variation of the objective in ``q`` is the row potential ``f``
    of the inner Sinkhorn problem, so a step maps ``log q`` to
    ``log q - step * (f - <q, f>)`` followed by renormalization.  The step is
    found by backtracking on the relative-smoothness condition

        S(q+) <= S(q) + <f, q+ - q> + KL(q+ || q) / step

    and grown by 1.2x after every accepted step.  ``step_rule="accelerated"``
    adds Nesterov momentum on ``log q`` and restarts it whenever the objective
    would increase, so accepted iterates are monotone under both rules.  Stops
    once ``sum_i q_i |f_i - <q, f>| <= tol``.

    ``lam`` must be 1: the kernel cost already carries the noise scale.
    """
    if lam != 1.0:
        raise ValueError("entropic projection uses lam = 1; rescale the kernel instead")
    if model.p_y is None:
        raise ValueError("model needs an output law p_y")
    if step_rule not in ("accelerated", "backtracking"):
        raise ValueError(f"unknown step rule {step_rule!r}")
    k = model.kernel.shape[0]
    q = np.full(k, 1.0 / k) if q0 is None else check_weights(q0, k, "q0", atol=1e-9).copy()
    with np.errstate(divide="ignore"):
        u = np.log(q)
    solver = _InnerSolver(model.cost, model.p_y, inner_tol, inner_max_iter)
    obj, f, g, _ = solver(q)
    solver.accept(g)
    eta = check_positive(step, "step")
    u_prev = u.copy()
    t_k = 1.0
    history = []
    residual = float(np.sum(q * np.abs(f - q @ f)))
    it = 0
    converged = residual <= tol
    while not converged and it < max_iter:
        it += 1
        if record_every and (it - 1) % record_every == 0:
            history.append((it - 1, obj, residual))
        if step_rule == "accelerated":
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_k * t_k))
            with np.errstate(invalid="ignore"):
                y = np.where(np.isfinite(u), u + (t_k - 1.0) / t_next * (u - u_prev), -np.inf)
            y -= logsumexp(y)
            qy = np.exp(y)
            oy, fy, _, _ = solver(qy)
        else:
            y, qy, oy, fy = u, q, obj, f
        grad = fy - qy @ fy
        while True:
            un = y - eta * grad
            un -= logsumexp(un)
            qn = np.exp(un)
            on, fn, gn, _ = solver(qn)
            if on <= oy + grad @ (qn - qy) + _bregman(qn, qy) / eta:
                break
            eta *= 0.5
            if eta < 1e-12:
                break
        if eta < 1e-12:
            break
        if on > obj:
            # momentum overshot: restart from the last accepted iterate
            t_k = 1.0
            u_prev = u.copy()
            continue
        u_prev, u, q, obj, f = u, un, qn, on, fn
        solver.accept(gn)
        eta *= 1.2
        if step_rule == "accelerated":
            t_k = t_next
        residual = float(np.sum(q * np.abs(f - q @ f)))
        converged = residual <= tol
    if record_every:
        history.append((it, obj, residual))
    result = ProjectionResult(q=q, objective=obj, iterations=it, residual=residual, converged=converged,
                              history=history)
    if not converged and raise_on_failure:
        raise ProjectionNotConverged(f"no convergence after {it} steps; last residual {residual:.3g}", result)
    return result


# --------------------------------------------------------------------------
# smoothed-KL bound, one dimension

def _noise_logpdf(z, p, sigma):
    if p == 1:
        return -np.abs(z) / sigma - math.log(2 * sigma)
    return -z**2 / (2 * sigma**2) - 0.5 * math.log(2 * math.pi * sigma**2)


def _mixture_kl(x, p_weights, q_weights, p, sigma):
    # tails beyond this width hold less than 1e-8 of each component's mass
    width = sigma * (math.log(2e8) if p == 1 else 6.0)
    lo, hi = x.min() - width, x.max() + width

    def logmix(y, w):
        m = w > 0
        lz = _noise_logpdf(y - x[m], p, sigma) + np.log(w[m])
        top = lz.max()
        return top + math.log(np.exp(lz - top).sum())

    def integrand(y):
        lp = logmix(y, p_weights)
        return math.exp(lp) * (lp - logmix(y, q_weights))

    breaks = np.unique(x)
    value, err = integrate.quad(integrand, lo, hi, points=breaks if breaks.size < 50 else None,
                                limit=500, epsabs=1e-10, epsrel=1e-8)
    if not np.isfinite(value) or err > 1e-6 + 1e-4 * abs(value):
        raise RuntimeError(f"mixture KL quadrature did not converge (estimate {value}, error {err})")
    return max(value, 0.0)


def lemma1_gap(model: GridModel, q, p=2, sigma=0.5, s=4000, seed=0, tol=1e-9, max_iter=100000):
    """Both sides of the smoothed-KL transport bound for a candidate ``q``.

    Returns ``(lhs, rhs)`` with ``lhs = KL(p_x * N || q * N)`` and
    ``rhs = (W(q, Y_s) - W(p_x, Y_s)) / (p sigma^p)``, where ``W`` is the
    entropic p-Wasserstein distance with regularization ``p sigma^p``, ``N`` is
    the noise with density proportional to ``exp(-|z|^p / (p sigma^p))`` and
    ``Y_s`` is an ``s``-point sample of ``p_x * N``.
    """
    if model.support_x.shape[1] != 1:
        raise ValueError("lemma1_gap supports one-dimensional grids only")
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    sigma = check_positive(sigma, "sigma")
    px = model.p_x
    if px is None:
        raise ValueError("model needs p_x")
    q = check_weights(q, px.shape[0], "q", atol=1e-9)
    x = model.support_x[:, 0]
    lhs = _mixture_kl(x, px, q, p, sigma)

    rng = substream(seed, "data")
    idx = rng.choice(px.shape[0], size=s, p=px)
    y = x[idx] + _noise("laplace" if p == 1 else "gaussian", sigma, s, substream(seed, "noise"))
    lam = p * sigma**p
    C = lp_cost(model.support_x, y[:, None], p) / lam

    def s_value(w):
        return sinkhorn(C, w, None, lam=1.0, tol=tol, max_iter=max_iter).objective

    rhs = s_value(q) - s_value(px)
    return lhs, rhs


class EntropicDeconvolver(BaseEstimator):
    """Estimate the input law on a grid from privatized samples.

    ``fit(Y)`` histograms the samples onto the nearest ``support_y`` points and
    runs ``entropic_projection``; the estimate is stored in ``weights_``.
    """

    def __init__(self, support_x=None, sigma=1.0, mech="gaussian", support_y=None, tol=1e-10,
                 max_iter=20000):
        self.support_x = support_x
        self.sigma = sigma
        self.mech = mech
        self.support_y = support_y
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, Y, y=None):
        sx = _as_support(self.support_x, "support_x")
        sy = sx if self.support_y is None else _as_support(self.support_y, "support_y")
        Y = _as_support(Y, "Y")
        nearest = lp_cost(Y, sy, 2).argmin(1)
        counts = np.bincount(nearest, minlength=sy.shape[0]).astype(np.float64)
        K = additive_kernel(sx, sy, self.sigma, self.mech)
        model = GridModel(sx, sy, K, p_y=counts / counts.sum() * (1 - 1e-12) + 1e-12 / sy.shape[0])
        res = entropic_projection(model, tol=self.tol, max_iter=self.max_iter)
        self.model_ = model
        self.weights_ = res.q
        self.objective_ = res.objective
        self.n_iter_ = res.iterations
        self.converged_ = res.converged
        return self
