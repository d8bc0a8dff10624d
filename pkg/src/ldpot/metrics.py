"""Evaluation measures, the sample-size study and a small SVG plotter."""

from __future__ import annotations

import html
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from ._rng import substream
from .datasets import Dataset, ManifoldSpec, as_points, synth_manifold
from .generator import MlpGenerator
from .ot import exact_ot_lp, lp_cost, sinkhorn
from .privacy import calibrate_gaussian, calibrate_laplace, privatize
from .trainer import TrainConfig, train

__all__ = [
    "empirical_w2",
    "manifold_error",
    "manifold_distances",
    "fit_loglog",
    "RateStudyConfig",
    "RateStudyResult",
    "rate_study",
    "plot_svg",
]


def empirical_w2(A, B) -> float:
    """Exact squared 2-Wasserstein distance between two uniform point clouds."""
    A, B = as_points(A), as_points(B)
    value, _ = exact_ot_lp(lp_cost(A, B, 2))
    return max(value, 0.0)


# --------------------------------------------------------------------------
# distance to manifolds

def _half_circle(P, r):
    rad = np.hypot(P[:, 0], P[:, 1])
    to_end = np.minimum(np.hypot(P[:, 0] - r, P[:, 1]), np.hypot(P[:, 0] + r, P[:, 1]))
    return np.where(P[:, 1] >= 0, np.abs(rad - r), to_end)


def _rectangle(P, w, h):
    ax, ay = np.abs(P[:, 0]), np.abs(P[:, 1])
    dx, dy = ax - w / 2, ay - h / 2
    outside = np.hypot(np.maximum(dx, 0), np.maximum(dy, 0))
    inside = np.minimum(-dx, -dy)
    return np.where((dx <= 0) & (dy <= 0), inside, outside)


def _ellipse(P, a, b):
    # first-quadrant reduction with the major axis along x
    y0, y1 = np.abs(P[:, 0]), np.abs(P[:, 1])
    if a < b:
        a, b = b, a
        y0, y1 = y1, y0
    out = np.empty_like(y0)
    gen = (y1 > 0) & (y0 > 0)
    on_minor = (y1 > 0) & (y0 == 0)
    on_major = y1 == 0
    out[on_minor] = np.abs(y1[on_minor] - b)

    numer = a * y0[on_major]
    denom = a * a - b * b
    inner = numer < denom
    xde = np.where(inner, numer / np.where(denom > 0, denom, 1.0), 0.0)
    x0 = a * xde
    x1 = b * np.sqrt(np.maximum(1 - xde**2, 0.0))
    out[on_major] = np.where(inner, np.hypot(x0 - y0[on_major], x1), np.abs(y0[on_major] - a))

    z0, z1 = y0[gen] / a, y1[gen] / b
    r0 = (a / b) ** 2
    g = z0**2 + z1**2 - 1
    lo = z1 - 1
    hi = np.where(g < 0, 0.0, np.hypot(r0 * z0, z1) - 1)
    # F(s) = (r0 z0 / (s + r0))^2 + (z1 / (s + 1))^2 - 1 is decreasing on (lo, hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        F = (r0 * z0 / (mid + r0)) ** 2 + (z1 / (mid + 1)) ** 2 - 1
        lo = np.where(F > 0, mid, lo)
        hi = np.where(F > 0, hi, mid)
    s = 0.5 * (lo + hi)
    x0 = r0 * y0[gen] / (s + r0)
    x1 = y1[gen] / (s + 1)
    out[gen] = np.where(g == 0, 0.0, np.hypot(x0 - y0[gen], x1 - y1[gen]))
    return out


def manifold_distances(points, spec: ManifoldSpec) -> np.ndarray:
    """Euclidean distance from every point to the manifold described by ``spec``."""
    P = as_points(points)
    if P.shape[1] != 2:
        raise ValueError("manifold distances are defined for planar points")
    P = P - np.asarray(spec.center, dtype=np.float64)
    if spec.kind == "half_circle":
        return _half_circle(P, spec.radius)
    if spec.kind == "rectangle":
        return _rectangle(P, *spec.sides)
    if spec.kind == "ellipse":
        return _ellipse(P, *spec.semi_axes)
    raise ValueError(f"unsupported manifold kind {spec.kind!r}")


def manifold_error(points, spec: ManifoldSpec) -> float:
    """Mean distance of the points to the manifold."""
    return float(manifold_distances(points, spec).mean())


# --------------------------------------------------------------------------
# sample-size study

def fit_loglog(n_values, gaps):
    """Least-squares line through ``(log n, log gap)``; returns ``(slope, intercept, rms residual)``."""
    x = np.log(np.asarray(n_values, dtype=np.float64))
    y = np.log(np.asarray(gaps, dtype=np.float64))
    if x.size < 2:
        raise ValueError("need at least two points to fit a slope")
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(resid**2)))


@dataclass
class RateStudyConfig:
    """Everything the sample-size study varies or holds fixed.

    ``baseline`` selects what is subtracted from the per-n distance before
    the fit: ``"reference"`` (the distance of a generator trained on
    ``reference_n`` samples), ``"asymptote"`` (0.99 times the smallest
    observed distance), ``"none"``, ``"largest_n"`` (the distance at the
    largest n) or a number.

    For one seed, the training set at size n is the first n points of a single
    privatized draw, and the held-out set is a separate draw shared by every n.
    """

    manifold: str = "half_circle:1.0"
    mechanism: str = "gaussian"
    epsilon: float = 5.0
    delta: float = 1e-4
    sensitivity: float | None = None
    hidden: tuple = (64, 64)
    latent_dim: int = 2
    train: dict = field(default_factory=lambda: {"batch": 256, "steps": 3000, "lr": 1e-3,
                                                  "lr_schedule": "cosine", "sinkhorn_iters": 100})
    holdout: int = 20000
    eval_batch: int = 200
    eval_batches: int = 100
    baseline: object = "reference"
    reference_n: int = 256000

    def mechanism_spec(self):
        spec = ManifoldSpec.parse(self.manifold)
        if self.mechanism == "laplace":
            sens = self.sensitivity if self.sensitivity is not None else 2.0 * spec.radius
            return calibrate_laplace(sens, self.epsilon)
        sens = self.sensitivity if self.sensitivity is not None else math.sqrt(2.0) * spec.radius
        return calibrate_gaussian(sens, self.epsilon, self.delta)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class RateStudyResult:
    n_values: list
    gaps: list
    slope: float
    intercept: float
    residual: float
    distances: list = field(default_factory=list)
    per_seed: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.n_values, self.n_values[1:])):
            raise ValueError("n values must be strictly increasing")

    def to_rows(self):
        return [{"n": n, "distance": d, "gap": g} for n, d, g in zip(self.n_values, self.distances, self.gaps)]


def _held_out_distance(gen, holdout, config: TrainConfig, cfg: RateStudyConfig, seed):
    rng = substream(seed, "eval")
    vals = []
    for _ in range(cfg.eval_batches):
        X = gen.sample(cfg.eval_batch, rng=rng)
        H = holdout[rng.choice(holdout.shape[0], size=cfg.eval_batch, replace=False)]
        vals.append(sinkhorn(lp_cost(X, H, 2), lam=config.lam, tol=1e-9, max_iter=10000).objective)
    return float(np.mean(vals))


def _privatized_draw(cfg: RateStudyConfig, n, seed):
    spec = ManifoldSpec.parse(cfg.manifold, n=n, seed=seed)
    return privatize(synth_manifold(spec), cfg.mechanism_spec(), seed=seed).points


def _holdout_seed(seed):
    return int(substream(seed, "holdout").integers(2**31))


def study_cell(n, seed, cfg: RateStudyConfig, pool=None, holdout=None) -> float:
    """Held-out distance of a generator trained on the first ``n`` points of ``pool``.

    ``pool`` and ``holdout`` default to the seed's draws of sizes ``n`` and
    ``cfg.holdout``; pass the larger draws to keep training sets nested.
    """
    if pool is None:
        pool = _privatized_draw(cfg, n, seed)
    if pool.shape[0] < n:
        raise ValueError(f"pool has {pool.shape[0]} points, need {n}")
    if holdout is None:
        holdout = _privatized_draw(cfg, cfg.holdout, _holdout_seed(seed))
    tcfg = TrainConfig.from_mechanism(cfg.mechanism_spec(), p=2, seed=seed, **cfg.train)
    gen = MlpGenerator((cfg.latent_dim, *cfg.hidden, 2), seed=seed)
    gen, _ = train(pool[:n], gen, tcfg)
    return _held_out_distance(gen, holdout, tcfg, cfg, seed)


def _baseline(distances, rule):
    if rule == "none":
        return 0.0
    if rule == "asymptote":
        return 0.99 * float(np.min(distances))
    if rule == "largest_n":
        return float(distances[-1])
    try:
        return float(rule)
    except ValueError:
        raise ValueError(f"baseline {rule!r} needs the study harness or a number") from None


def summarize(n_values, distances, baseline="asymptote", per_seed=None) -> RateStudyResult:
    """Fit the log-log slope of the baseline-subtracted distances."""
    n_values = [int(n) for n in n_values]
    distances = [float(d) for d in distances]
    base = _baseline(distances, baseline)
    gaps = [d - base for d in distances]
    keep = [i for i, g in enumerate(gaps) if g > 0]
    excluded = [n_values[i] for i in range(len(gaps)) if i not in keep]
    if excluded:
        warnings.warn(f"non-positive gaps at n={excluded} excluded from the fit", RuntimeWarning)
    if len(keep) < 2:
        raise ValueError("fewer than two positive gaps; slope is undefined")
    slope, intercept, resid = fit_loglog([n_values[i] for i in keep], [gaps[i] for i in keep])
    return RateStudyResult(n_values, gaps, slope, intercept, resid, distances, per_seed or {}, excluded)


def rate_study(cfg: RateStudyConfig, n_values, seeds, progress=None) -> RateStudyResult:
    """Train one generator per ``(n, seed)`` cell and fit the distance decay in n."""
    n_values = sorted(int(n) for n in n_values)
    seeds = list(seeds)
    if len(set(n_values)) < 4 or len(set(seeds)) < 3:
        raise ValueError("rate study needs at least 4 distinct n values and 3 seeds")
    use_reference = cfg.baseline == "reference"
    if use_reference and cfg.reference_n <= n_values[-1]:
        raise ValueError("reference_n must exceed the largest n")
    per_seed = {n: [] for n in n_values}
    reference = []
    for s in seeds:
        pool = _privatized_draw(cfg, cfg.reference_n if use_reference else n_values[-1], s)
        holdout = _privatized_draw(cfg, cfg.holdout, _holdout_seed(s))
        for n in n_values:
            per_seed[n].append(study_cell(n, s, cfg, pool, holdout))
            if progress is not None:
                progress(n, s, per_seed[n][-1])
        if use_reference:
            reference.append(study_cell(cfg.reference_n, s, cfg, pool, holdout))
            if progress is not None:
                progress(cfg.reference_n, s, reference[-1])
    distances = [float(np.mean(per_seed[n])) for n in n_values]
    baseline = float(np.mean(reference)) if use_reference else cfg.baseline
    return summarize(n_values, distances, baseline, per_seed)


# --------------------------------------------------------------------------
# SVG output

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _fmt(v):
    return f"{v:.6g}"


def plot_svg(series, path=None, title="", xlabel="", ylabel="", width=480, height=360, logx=False,
             logy=False) -> str:
    """Write a standalone SVG with one entry per series; returns the document.

    Each series is a dict with ``x``, ``y``, optional ``label`` and
    ``style`` ("line" or "scatter").  Output bytes depend only on the inputs.
    """
    if not series:
        raise ValueError("nothing to plot: empty series list")
    prepared = []
    for k, s in enumerate(series):
        x = np.asarray(s["x"], dtype=np.float64).ravel()
        y = np.asarray(s["y"], dtype=np.float64).ravel()
        if x.shape != y.shape or x.size == 0:
            raise ValueError(f"series {k}: x and y must be non-empty and of equal length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError(f"series {k}: values must be finite")
        if (logx and np.any(x <= 0)) or (logy and np.any(y <= 0)):
            raise ValueError(f"series {k}: log axes need positive values")
        prepared.append((np.log10(x) if logx else x, np.log10(y) if logy else y,
                         str(s.get("label", f"series {k}")), s.get("style", "line")))
    xs = np.concatenate([p[0] for p in prepared])
    ys = np.concatenate([p[1] for p in prepared])
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    ml, mr, mt, mb = 60, 20, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def sx(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for t in np.linspace(0, 1, 5):
        xv, yv = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
        xl = 10**xv if logx else xv
        yl = 10**yv if logy else yv
        out.append(f'<text x="{_fmt(sx(xv))}" y="{mt + ph + 15}" font-size="10" '
                   f'text-anchor="middle">{_fmt(xl)}</text>')
        out.append(f'<text x="{ml - 5}" y="{_fmt(sy(yv) + 3)}" font-size="10" '
                   f'text-anchor="end">{_fmt(yl)}</text>')
    if title:
        out.append(f'<text x="{width / 2}" y="18" font-size="13" text-anchor="middle">{html.escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{ml + pw / 2}" y="{height - 8}" font-size="11" '
                   f'text-anchor="middle">{html.escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{mt + ph / 2}" font-size="11" text-anchor="middle" '
                   f'transform="rotate(-90 14 {mt + ph / 2})">{html.escape(ylabel)}</text>')
    for k, (x, y, label, style) in enumerate(prepared):
        color = _PALETTE[k % len(_PALETTE)]
        if style == "scatter":
            for a, b in zip(x, y):
                out.append(f'<circle cx="{_fmt(sx(a))}" cy="{_fmt(sy(b))}" r="1.5" fill="{color}"/>')
        else:
            pts = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(x, y))
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = mt + 12 + 14 * k
        out.append(f'<rect x="{ml + pw - 110}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{ml + pw - 95}" y="{ly + 1}" font-size="10">{html.escape(label)}</text>')
    out.append("</svg>")
    doc = "\n".join(out) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(doc)
    return doc
