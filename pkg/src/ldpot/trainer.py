"""Minibatch transport training of a generator on privatized samples.

Every step samples ``b`` privatized points (with replacement) and ``b`` fresh
latents, solves the transport problem between data (rows) and generated
points (columns), freezes the plan and backpropagates ``<pi, C>`` through
the generator.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator

from ._rng import substream
from ._validation import check_points
from .datasets import Dataset
from .generator import LatentSpec, MlpGenerator, OptimizerState, backward, forward, optimizer_step, sample_latent
from .ot import exact_ot_lp, lp_cost, sinkhorn

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "TrainingDivergedError",
    "loss_and_grad",
    "fixed_plan_cost",
    "train",
    "EntropicOTGAN",
]

log = logging.getLogger(__name__)

LOSSES = ("entropic", "unregularized", "divergence")
LR_SCHEDULES = ("constant", "cosine")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss: str = "entropic"
    p: int = 2
    lam: float | None = 1.0
    batch: int = 256
    sinkhorn_iters: int = 100
    sinkhorn_tol: float = 1e-6
    lr: float = 1e-3
    lr_schedule: str = "constant"
    optimizer: str = "rmsprop"
    steps: int = 3000
    epochs: float | None = None
    seed: int = 0
    eval_every: int = 0
    eval_samples: int = 1024

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.p not in (1, 2):
            raise ValueError("p must be 1 or 2")
        if self.batch < 2:
            raise ValueError("batch must be at least 2")
        if self.loss != "unregularized":
            if self.lam is None or not self.lam > 0 or not np.isfinite(self.lam):
                raise ValueError("lam must be positive for regularized losses")
        if self.sinkhorn_iters < 1:
            raise ValueError("sinkhorn_iters must be at least 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.optimizer not in ("rmsprop", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0 or self.eval_every < 0 or self.eval_samples < 1:
            raise ValueError("steps, eval_every and eval_samples must be nonnegative")

    @classmethod
    def from_mechanism(cls, mech, p=None, **kwargs) -> "TrainConfig":
        """Config whose regularization matches the noise: ``lam = p * sigma**p``.

        The default exponent is 1 for Laplace noise and 2 for Gaussian noise.
        """
        if p is None:
            p = 1 if mech.kind == "laplace" else 2
        lam = p * mech.noise_scale**p
        cfg = cls(p=p, lam=lam, **kwargs)
        expected = mech.noise_scale if p == 1 else 2 * mech.noise_scale**2
        assert abs(cfg.lam - expected) <= 1e-12 * expected
        return cfg

    def lr_at(self, step: int, total: int) -> float:
        """Learning rate for 1-based ``step``; cosine decays to zero at ``total``."""
        if self.lr_schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1.0 + np.cos(np.pi * (step - 1) / total))

    def total_steps(self, n_data: int) -> int:
        if self.epochs is None:
            return self.steps
        return int(np.ceil(self.epochs * n_data / self.batch))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    unconverged_steps: list = field(default_factory=list)

    def add(self, step, loss, w2_raw, wlam_priv, seconds):
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("history steps must increase")
        self.records.append({"step": int(step), "loss": float(loss), "w2_raw": float(w2_raw),
                             "wlam_priv": float(wlam_priv), "seconds": float(seconds)})

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "loss", "w2_raw", "wlam_priv", "seconds"],
                               lineterminator="\n")
            w.writeheader()
            for rec in self.records:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})


def _cost_grad(rows, cols, p):
    # d/dcols[j] of c(rows[i], cols[j]) for every pair, shape (m, k, d)
    diff = cols[None, :, :] - rows[:, None, :]
    return 2.0 * diff if p == 2 else np.sign(diff)


def _plan(C, config: TrainConfig):
    if config.loss == "unregularized":
        if C.shape[0] != C.shape[1]:
            raise ValueError("unregularized loss needs equal data and latent batch sizes")
        r, c = linear_sum_assignment(C)
        P = np.zeros_like(C)
        P[r, c] = 1.0 / C.shape[0]
        return P, float(C[r, c].sum() / C.shape[0]), True
    sol = sinkhorn(C, lam=config.lam, tol=config.sinkhorn_tol, max_iter=config.sinkhorn_iters)
    return sol.pi, sol.objective, sol.converged


def _upstream(P, rows, cols, p):
    # sum_i P_ij dc(rows_i, cols_j)/dcols_j
    if p == 2:
        return 2.0 * (P.sum(0)[:, None] * cols - P.T @ rows)
    return np.einsum("ij,ijk->jk", P, _cost_grad(rows, cols, p))


def loss_and_grad(batch_y, batch_z, gen: MlpGenerator, config: TrainConfig, theta=None):
    """Loss value and its fixed-plan gradient with respect to the generator parameters.

    Returns ``(value, grad, info)``; ``info`` holds the plan(s), the cost
    matrix and whether every inner Sinkhorn solve met its tolerance.
    """
    Y = np.asarray(batch_y, dtype=np.float64)
    G, cache = forward(gen, batch_z, theta)
    with np.errstate(over="ignore", invalid="ignore"):
        C = lp_cost(Y, G, config.p)
    if not np.all(np.isfinite(C)):
        raise TrainingDivergedError(f"non-finite cost (lam={config.lam}, max cost={np.nanmax(C):.6g})")
    P, value, converged = _plan(C, config)
    up = _upstream(P, Y, G, config.p)
    info = {"plan": P, "cost": C, "converged": converged}
    if config.loss == "divergence":
        CGG = lp_cost(G, G, config.p)
        selfsol = sinkhorn(CGG, lam=config.lam, tol=config.sinkhorn_tol, max_iter=config.sinkhorn_iters)
        yy = sinkhorn(lp_cost(Y, Y, config.p), lam=config.lam, tol=config.sinkhorn_tol,
                      max_iter=config.sinkhorn_iters)
        value = value - 0.5 * selfsol.objective - 0.5 * yy.objective
        # both arguments of the self term move with G
        up = up - _upstream(0.5 * (selfsol.pi + selfsol.pi.T), G, G, config.p)
        info["self_plan"] = selfsol.pi
        info["converged"] = converged and selfsol.converged and yy.converged
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss (lam={config.lam}, max cost={C.max():.6g})")
    return float(value), backward(gen, cache, up), info


def fixed_plan_cost(batch_y, batch_z, gen: MlpGenerator, config: TrainConfig, plans, theta=None) -> float:
    """Loss surrogate with the plans held fixed; its gradient is what ``loss_and_grad`` returns."""
    Y = np.asarray(batch_y, dtype=np.float64)
    G, _ = forward(gen, batch_z, theta)
    value = float((plans["plan"] * lp_cost(Y, G, config.p)).sum())
    if config.loss == "divergence":
        value -= 0.5 * float((plans["self_plan"] * lp_cost(G, G, config.p)).sum())
    return value


def _evaluate(gen, config, priv, eval_raw, rng):
    m = config.eval_samples
    X = gen.sample(m, rng=rng)
    w2 = np.nan
    if eval_raw is not None:
        R = eval_raw[rng.choice(eval_raw.shape[0], size=min(m, eval_raw.shape[0]), replace=False)]
        C = lp_cost(R, X[:R.shape[0]], 2)
        w2 = exact_ot_lp(C)[0]
    Pv = priv[rng.choice(priv.shape[0], size=min(m, priv.shape[0]), replace=False)]
    lam = config.lam if config.lam is not None else 1.0
    sol = sinkhorn(lp_cost(Pv, X, config.p), lam=lam, tol=1e-6, max_iter=2000)
    return w2, sol.objective


def train(privatized, gen: MlpGenerator, config: TrainConfig, eval_raw=None):
    """Run the training loop; returns ``(trained_generator, history)``.

    ``eval_raw`` only feeds the ``w2_raw`` metric.  It is read inside the
    evaluation routine, which draws from its own random stream, so it cannot
    influence the parameters.
    """
    Y = privatized.points if isinstance(privatized, Dataset) else check_points(privatized, "privatized")
    if Y.shape[1] != gen.layer_dims[-1]:
        raise ValueError(f"data dimension {Y.shape[1]} differs from generator output {gen.layer_dims[-1]}")
    R = None
    if eval_raw is not None:
        R = eval_raw.points if isinstance(eval_raw, Dataset) else check_points(eval_raw, "eval_raw")
    gen = gen.copy()
    state = OptimizerState(config.optimizer, config.lr, gen.n_params)
    batch_rng = substream(config.seed, "batch")
    latent_rng = substream(config.seed, "latent")
    eval_rng = substream(config.seed, "eval")
    history = TrainHistory()
    steps = config.total_steps(Y.shape[0])
    t0 = time.perf_counter()
    theta = gen.theta
    value = np.nan
    for step in range(1, steps + 1):
        yb = Y[batch_rng.integers(0, Y.shape[0], size=config.batch)]
        zb = sample_latent(gen.latent, config.batch, rng=latent_rng)
        try:
            value, grad, info = loss_and_grad(yb, zb, gen, config, theta)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"step {step}: {exc}") from exc
        if not info["converged"]:
            history.unconverged_steps.append(step)
        state.lr = config.lr_at(step, steps)
        theta, state = optimizer_step(state, theta, grad)
        gen.theta = theta
        history.losses.append(value)
        if config.eval_every and step % config.eval_every == 0 and step != steps:
            w2, wl = _evaluate(gen, config, Y, R, eval_rng)
            history.add(step, value, w2, wl, time.perf_counter() - t0)
            log.info("step %d loss %.6g w2_raw %.6g wlam_priv %.6g", step, value, w2, wl)
    if steps > 0:
        w2, wl = _evaluate(gen, config, Y, R, eval_rng)
        history.add(steps, value, w2, wl, time.perf_counter() - t0)
    return gen, history


class EntropicOTGAN(BaseEstimator):
    """Generator trained by minibatch entropic transport against the samples passed to ``fit``.

    Parameters mirror ``TrainConfig`` plus the architecture
    (``hidden``, ``latent_dim``, ``latent_law``, ``output``).  Fitted
    attributes: ``generator_``, ``history_``.
    """

    def __init__(self, loss="entropic", p=2, lam=1.0, hidden=(256, 256), latent_dim=2,
                 latent_law="uniform(-1,1)", output="linear", batch=256, sinkhorn_iters=100, lr=1e-3,
                 optimizer="rmsprop", steps=3000, random_state=0):
        self.loss = loss
        self.p = p
        self.lam = lam
        self.hidden = hidden
        self.latent_dim = latent_dim
        self.latent_law = latent_law
        self.output = output
        self.batch = batch
        self.sinkhorn_iters = sinkhorn_iters
        self.lr = lr
        self.optimizer = optimizer
        self.steps = steps
        self.random_state = random_state

    def _config(self):
        return TrainConfig(loss=self.loss, p=self.p, lam=self.lam, batch=self.batch,
                           sinkhorn_iters=self.sinkhorn_iters, lr=self.lr, optimizer=self.optimizer,
                           steps=self.steps, seed=self.random_state)

    def fit(self, X, y=None, eval_raw=None):
        X = check_points(X, "X")
        dims = (self.latent_dim, *self.hidden, X.shape[1])
        gen = MlpGenerator(dims, self.output, seed=self.random_state,
                           latent=LatentSpec(self.latent_dim, self.latent_law))
        self.generator_, self.history_ = train(X, gen, self._config(), eval_raw=eval_raw)
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self, n_samples=1024, seed=0):
        if not hasattr(self, "generator_"):
            raise AttributeError("call fit before sample")
        return self.generator_.sample(n_samples, rng=substream(seed, "eval"))
