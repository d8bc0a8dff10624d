"""Local privatization mechanisms, calibration and data conditioning.

Noise scale convention: ``noise_scale`` is the Laplace scale parameter
``sensitivity / epsilon`` for the Laplace mechanism and the standard deviation
for the Gaussian mechanism.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import fft
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._rng import open_uniform, substream
from ._validation import check_positive
from .datasets import Dataset

__all__ = [
    "MechanismSpec",
    "calibrate_laplace",
    "calibrate_gaussian",
    "invert_gaussian",
    "gaussian_threshold",
    "privatize",
    "clip_l1",
    "clip_l2",
    "dct2",
    "idct2",
    "coefficient_clip",
    "laplace_ratio_certificate",
    "LDPPrivatizer",
    "BallClipper",
    "DCTTransformer",
    "CoefficientClipper",
]

# relative margin above the strict Gaussian-mechanism threshold
GAUSSIAN_MARGIN = 1e-9


@dataclass(frozen=True)
class MechanismSpec:
    kind: str
    sensitivity: float
    epsilon: float
    delta: float
    noise_scale: float

    def __post_init__(self):
        if self.kind not in ("laplace", "gaussian"):
            raise ValueError(f"unknown mechanism {self.kind!r}")
        for name in ("sensitivity", "epsilon", "noise_scale"):
            check_positive(getattr(self, name), name)
        if self.kind == "laplace":
            if self.delta != 0:
                raise ValueError("the Laplace mechanism has delta = 0")
            expected = self.sensitivity / self.epsilon
            if abs(self.noise_scale - expected) > 1e-12 * expected:
                raise ValueError("Laplace noise scale must equal sensitivity / epsilon")
        else:
            if not 0 < self.delta < 0.5:
                raise ValueError("Gaussian mechanism needs delta in (0, 0.5)")
            if not self.noise_scale > gaussian_threshold(self.sensitivity, self.epsilon, self.delta):
                raise ValueError("Gaussian noise scale does not exceed the privacy threshold")

    def to_dict(self) -> dict:
        return asdict(self)


def calibrate_laplace(sensitivity: float, epsilon: float) -> MechanismSpec:
    """Laplace mechanism with scale ``sensitivity / epsilon`` (l1 sensitivity)."""
    sensitivity = check_positive(sensitivity, "sensitivity")
    epsilon = check_positive(epsilon, "epsilon")
    return MechanismSpec("laplace", sensitivity, epsilon, 0.0, sensitivity / epsilon)


def _gaussian_c(delta: float) -> float:
    return math.sqrt(math.log(2.0 / (math.sqrt(16.0 * delta + 1.0) - 1.0)))


def gaussian_threshold(sensitivity: float, epsilon: float, delta: float) -> float:
    """Smallest (excluded) standard deviation giving (epsilon, delta)-LDP."""
    c = _gaussian_c(delta)
    return (c + math.sqrt(c * c + epsilon)) / (epsilon * math.sqrt(2.0)) * sensitivity


def calibrate_gaussian(sensitivity: float, epsilon: float, delta: float) -> MechanismSpec:
    """Gaussian mechanism for an l2 sensitivity, just above the threshold."""
    sensitivity = check_positive(sensitivity, "sensitivity")
    epsilon = check_positive(epsilon, "epsilon")
    if not 0 < delta < 0.5:
        raise ValueError("delta must lie in (0, 0.5)")
    sigma = (1.0 + GAUSSIAN_MARGIN) * gaussian_threshold(sensitivity, epsilon, delta)
    return MechanismSpec("gaussian", sensitivity, epsilon, float(delta), sigma)


def invert_gaussian(sigma: float, sensitivity: float, delta: float, rtol=1e-13) -> float:
    """Epsilon for which :func:`calibrate_gaussian` returns ``sigma``.

    The threshold is strictly decreasing in epsilon, from +inf at 0 to 0 at
    +inf, so bisection on log(epsilon) finds the unique root.
    """
    sigma = check_positive(sigma, "sigma")
    sensitivity = check_positive(sensitivity, "sensitivity")
    if not 0 < delta < 0.5:
        raise ValueError("delta must lie in (0, 0.5)")
    target = sigma / (1.0 + GAUSSIAN_MARGIN)

    def excess(log_eps):
        return gaussian_threshold(sensitivity, math.exp(log_eps), delta) - target

    lo, hi = -1.0, 1.0
    while excess(lo) < 0:
        lo *= 2
        if lo < -700:
            raise ValueError(f"sigma={sigma} needs epsilon below the float range")
    while excess(hi) > 0:
        hi *= 2
        if hi > 700:
            raise ValueError(f"sigma={sigma} is below the achievable floor for any finite epsilon")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < rtol:
            break
    return math.exp(0.5 * (lo + hi))


def _noise(kind, scale, shape, rng):
    if kind == "laplace":
        # inverse CDF of Laplace(0, scale)
        u = open_uniform(rng, shape)
        return np.where(u < 0.5, scale * np.log(2.0 * u), -scale * np.log(2.0 - 2.0 * u))
    # Box-Muller on two open-interval uniform blocks
    u1 = open_uniform(rng, shape)
    u2 = open_uniform(rng, shape)
    return scale * np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def privatize(data, mech: MechanismSpec, seed=0):
    """Add i.i.d. mechanism noise to every coordinate of every sample.

    Returns the same type as ``data`` (Dataset in, Dataset out).
    """
    pts = data.points if isinstance(data, Dataset) else check_array(data)
    noise = _noise(mech.kind, mech.noise_scale, pts.shape, substream(seed, "noise"))
    out = pts + noise
    if isinstance(data, Dataset):
        return Dataset(out, name=f"{data.name}+{mech.kind}", seed=seed)
    return out


def laplace_ratio_certificate(mech: MechanismSpec, x, x_prime, y) -> float:
    """Largest density ratio f(y - x) / f(y - x') over the given grid.

    ``x`` and ``x_prime`` are paired rows; ``y`` are output points.
    """
    x = np.atleast_2d(x)
    x_prime = np.atleast_2d(x_prime)
    y = np.atleast_2d(y)
    if np.any(np.abs(x - x_prime).sum(1) > mech.sensitivity * (1 + 1e-15)):
        raise ValueError("pair violates the l1 sensitivity bound")
    # l1 distance difference, one coordinate at a time
    diff = np.zeros((x.shape[0], y.shape[0]))
    for k in range(y.shape[1]):
        diff += np.abs(y[None, :, k] - x_prime[:, None, k])
        diff -= np.abs(y[None, :, k] - x[:, None, k])
    return float(np.exp(diff.max() / mech.noise_scale))


# --------------------------------------------------------------------------
# conditioning transforms

def _rows(data):
    return data.points if isinstance(data, Dataset) else check_array(data)


def _wrap(data, out, suffix):
    if isinstance(data, Dataset):
        return Dataset(out, name=f"{data.name}|{suffix}", seed=data.seed)
    return out


def clip_l2(data, radius: float):
    """Project each row onto the Euclidean ball of ``radius``."""
    radius = check_positive(radius, "radius")
    X = _rows(data)
    norms = np.linalg.norm(X, axis=1)
    scale = np.where(norms > radius, radius / np.where(norms > 0, norms, 1.0), 1.0)
    out = X * scale[:, None]
    return _wrap(data, out, "clip_l2")


def _project_l1_row(v, radius):
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    # sorted-threshold projection of |v| onto the simplex of mass `radius`
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, u.size + 1)
    rho = np.nonzero(u * k > css - radius)[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def clip_l1(data, radius: float):
    """Project each row onto the l1 ball of ``radius``."""
    radius = check_positive(radius, "radius")
    X = _rows(data)
    out = np.vstack([_project_l1_row(row, radius) for row in X])
    return _wrap(data, out, "clip_l1")


def _images(X, h, w):
    if X.shape[1] != h * w:
        raise ValueError(f"sample dimension {X.shape[1]} != h*w = {h * w}")
    return X.reshape(X.shape[0], h, w)


def dct2(data, h: int, w: int):
    """Orthonormal type-II 2-D DCT of every sample viewed as an h x w image."""
    X = _rows(data)
    out = fft.dctn(_images(X, h, w), type=2, norm="ortho", axes=(1, 2)).reshape(X.shape)
    return _wrap(data, out, "dct2")


def idct2(data, h: int, w: int):
    X = _rows(data)
    out = fft.idctn(_images(X, h, w), type=2, norm="ortho", axes=(1, 2)).reshape(X.shape)
    return _wrap(data, out, "idct2")


def coefficient_clip(data, quantile: float):
    """Zero, per sample, the coefficients whose magnitude is below the quantile.

    The quantile of d magnitudes is the (floor(q*d) + 1)-th smallest one, so
    exactly floor(q*d) coefficients are dropped when magnitudes are distinct.
    """
    if not 0 <= quantile < 1:
        raise ValueError("quantile must lie in [0, 1)")
    X = _rows(data)
    mags = np.abs(X)
    d = X.shape[1]
    rank = int(math.floor(quantile * d))
    thresh = np.sort(mags, axis=1)[:, rank]
    out = np.where(mags < thresh[:, None], 0.0, X)
    return _wrap(data, out, "coef_clip")


# --------------------------------------------------------------------------
# estimator wrappers

class LDPPrivatizer(TransformerMixin, BaseEstimator):
    """Transformer adding calibrated Laplace or Gaussian noise.

    Parameters
    ----------
    mechanism : {"laplace", "gaussian"}
    epsilon : float
    sensitivity : float
        l1 sensitivity for Laplace, l2 sensitivity for Gaussian.
    delta : float
        Only used by the Gaussian mechanism.
    random_state : int
        Seed of the noise stream; ``transform`` is deterministic given it.
    """

    def __init__(self, mechanism="laplace", epsilon=1.0, sensitivity=1.0, delta=1e-4,
                 random_state=0):
        self.mechanism = mechanism
        self.epsilon = epsilon
        self.sensitivity = sensitivity
        self.delta = delta
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.mechanism == "laplace":
            self.mechanism_ = calibrate_laplace(self.sensitivity, self.epsilon)
        elif self.mechanism == "gaussian":
            self.mechanism_ = calibrate_gaussian(self.sensitivity, self.epsilon, self.delta)
        else:
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if X is not None:
            self.n_features_in_ = check_array(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mechanism_")
        return privatize(check_array(X), self.mechanism_, seed=self.random_state)


class BallClipper(TransformerMixin, BaseEstimator):
    """Row-wise projection onto the l1 or l2 ball (stateless)."""

    def __init__(self, norm=2, radius=1.0):
        self.norm = norm
        self.radius = radius

    def fit(self, X=None, y=None):
        if self.norm not in (1, 2):
            raise ValueError("norm must be 1 or 2")
        return self

    def transform(self, X):
        self.fit()
        return clip_l1(X, self.radius) if self.norm == 1 else clip_l2(X, self.radius)


class DCTTransformer(TransformerMixin, BaseEstimator):
    """Orthonormal 2-D DCT of flattened ``shape``-sized images."""

    def __init__(self, shape=(28, 28)):
        self.shape = shape

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return dct2(X, *self.shape)

    def inverse_transform(self, X):
        return idct2(X, *self.shape)


class CoefficientClipper(TransformerMixin, BaseEstimator):
    def __init__(self, quantile=0.8):
        self.quantile = quantile

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return coefficient_clip(X, self.quantile)
