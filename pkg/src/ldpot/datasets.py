"""Sample containers, synthetic manifolds and the CSV interchange format.

Datasets are stored as CSV with one sample per row, written with 17
significant digits so that float64 values survive a round trip exactly.  A
JSON sidecar ``<file>.json`` holds the metadata ``{name, seed, bounds}``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from ._rng import substream
from ._validation import check_points, check_weights

__all__ = [
    "Dataset",
    "DatasetFormatError",
    "EmpiricalDistribution",
    "ManifoldSpec",
    "load_csv",
    "save_csv",
    "split",
    "synth_manifold",
]


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """An n x d sample matrix with optional provenance.

    Parameters
    ----------
    points : array-like of shape (n, d)
    name : str
    seed : int or None
        Seed that produced the samples, if any.
    bounds : array-like of shape (d, 2) or None
        Per-coordinate ``[lo, hi]`` box that must contain every point.
    """

    points: np.ndarray
    name: str = "dataset"
    seed: int | None = None
    bounds: np.ndarray | None = None

    def __post_init__(self):
        pts = check_points(self.points, "points")
        object.__setattr__(self, "points", _frozen(pts))
        if self.bounds is not None:
            b = np.asarray(self.bounds, dtype=np.float64)
            if b.shape != (pts.shape[1], 2) or np.any(b[:, 0] > b[:, 1]):
                raise ValueError(f"bounds must have shape ({pts.shape[1]}, 2) with lo <= hi")
            slack = 1e-12 * max(1.0, float(np.max(np.abs(b))))
            if np.any(pts < b[:, 0] - slack) or np.any(pts > b[:, 1] + slack):
                raise ValueError("a point lies outside the declared bounds")
            object.__setattr__(self, "bounds", _frozen(b))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.n

    def with_points(self, points, name=None) -> "Dataset":
        """New dataset sharing this one's metadata except the bounds."""
        return Dataset(points, name=name or self.name, seed=self.seed)

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "bounds": None if self.bounds is None else self.bounds.tolist(),
        }


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Weighted point cloud; weights default to uniform."""

    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        pts = check_points(self.points, "points")
        w = check_weights(self.weights, pts.shape[0])
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def from_dataset(cls, data: Dataset) -> "EmpiricalDistribution":
        return cls(data.points)

    @property
    def m(self) -> int:
        return self.points.shape[0]


def as_distribution(X) -> EmpiricalDistribution:
    """Coerce a Dataset, EmpiricalDistribution or array to a distribution."""
    if isinstance(X, EmpiricalDistribution):
        return X
    if isinstance(X, Dataset):
        return EmpiricalDistribution(X.points)
    return EmpiricalDistribution(X)


def as_points(X) -> np.ndarray:
    if isinstance(X, (Dataset, EmpiricalDistribution)):
        return np.asarray(X.points)
    return check_points(X)


# --------------------------------------------------------------------------
# synthetic manifolds

_KINDS = ("half_circle", "ellipse", "rectangle")


@dataclass(frozen=True)
class ManifoldSpec:
    """A one-dimensional curve in the plane to sample from.

    ``half_circle`` uses ``radius`` (upper half, y >= center_y), ``ellipse``
    uses ``semi_axes = (a, b)`` and ``rectangle`` uses ``sides = (w, h)`` for
    an axis-aligned rectangle boundary centred at ``center``.
    """

    kind: str = "half_circle"
    n: int = 1000
    seed: int | None = 0
    radius: float = 1.0
    semi_axes: tuple = (2.0, 1.0)
    sides: tuple = (2.0, 1.0)
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unsupported manifold kind {self.kind!r}; expected one of {_KINDS}")
        if int(self.n) < 1:
            raise ValueError("n must be >= 1")
        if len(self.center) != 2:
            raise ValueError("center must have 2 coordinates")
        if self.kind == "half_circle" and not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.kind == "ellipse":
            if len(self.semi_axes) != 2 or min(self.semi_axes) <= 0:
                raise ValueError("ellipse needs two positive semi-axes")
        if self.kind == "rectangle":
            if len(self.sides) != 2 or min(self.sides) <= 0:
                raise ValueError("rectangle needs two positive side lengths")

    @classmethod
    def parse(cls, text: str, n: int = 1000, seed: int | None = 0) -> "ManifoldSpec":
        """Parse ``"half_circle:1.0"``, ``"ellipse:2,1"`` or ``"rectangle:2,1"``."""
        kind, _, params = text.partition(":")
        values = tuple(float(v) for v in params.split(",")) if params else ()
        if kind == "half_circle":
            return cls(kind, n, seed, radius=values[0] if values else 1.0)
        if kind == "ellipse":
            return cls(kind, n, seed, semi_axes=values or (2.0, 1.0))
        if kind == "rectangle":
            return cls(kind, n, seed, sides=values or (2.0, 1.0))
        raise ValueError(f"unsupported manifold kind {kind!r}")

    def bounds(self) -> np.ndarray:
        cx, cy = self.center
        if self.kind == "half_circle":
            r = self.radius
            return np.array([[cx - r, cx + r], [cy, cy + r]])
        if self.kind == "ellipse":
            a, b = self.semi_axes
            return np.array([[cx - a, cx + a], [cy - b, cy + b]])
        w, h = self.sides
        return np.array([[cx - w / 2, cx + w / 2], [cy - h / 2, cy + h / 2]])


def _sample_ellipse_angles(a, b, n, rng):
    # rejection on the arc-length density |r'(t)| / max|r'| makes t arc-length uniform
    out = np.empty(0)
    top = max(a, b)
    while out.size < n:
        m = 2 * (n - out.size) + 16
        t = rng.uniform(0.0, 2 * np.pi, m)
        speed = np.sqrt((a * np.sin(t)) ** 2 + (b * np.cos(t)) ** 2)
        keep = rng.uniform(0.0, top, m) < speed
        out = np.concatenate([out, t[keep]])
    return out[:n]


def _rectangle_boundary(w, h, s):
    x = np.empty_like(s)
    y = np.empty_like(s)
    bottom = s < w
    right = (s >= w) & (s < w + h)
    top = (s >= w + h) & (s < 2 * w + h)
    left = s >= 2 * w + h
    x[bottom], y[bottom] = s[bottom] - w / 2, -h / 2
    x[right], y[right] = w / 2, s[right] - w - h / 2
    x[top], y[top] = w / 2 - (s[top] - w - h), h / 2
    x[left], y[left] = -w / 2, h / 2 - (s[left] - 2 * w - h)
    return x, y


def synth_manifold(spec: ManifoldSpec) -> Dataset:
    """Sample ``spec.n`` points uniformly by arc length on the manifold curve."""
    rng = substream(spec.seed, "data")
    n = int(spec.n)
    cx, cy = spec.center
    if spec.kind == "half_circle":
        t = rng.uniform(0.0, np.pi, n)
        pts = np.column_stack([cx + spec.radius * np.cos(t), cy + spec.radius * np.sin(t)])
    elif spec.kind == "ellipse":
        a, b = spec.semi_axes
        t = _sample_ellipse_angles(a, b, n, rng)
        pts = np.column_stack([cx + a * np.cos(t), cy + b * np.sin(t)])
    else:
        w, h = spec.sides
        s = rng.uniform(0.0, 2 * (w + h), n)
        x, y = _rectangle_boundary(w, h, s)
        pts = np.column_stack([cx + x, cy + y])
    pts = np.clip(pts, spec.bounds()[:, 0], spec.bounds()[:, 1])
    return Dataset(pts, name=spec.kind, seed=spec.seed, bounds=spec.bounds())


# --------------------------------------------------------------------------
# CSV interchange

def save_csv(data: Dataset, path) -> None:
    """Write ``data`` as CSV plus a ``<path>.json`` metadata sidecar."""
    path = os.fspath(path)
    header = "# " + ",".join(f"x{j}" for j in range(data.d))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(header + "\n")
        for row in data.points:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(data.metadata(), fh, sort_keys=True)


def load_csv(path, name: str | None = None) -> Dataset:
    """Read a CSV dataset; the sidecar, if present, restores name/seed/bounds."""
    path = os.fspath(path)
    rows = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DatasetFormatError(
                    f"ragged row {len(rows)} (line {lineno}): {len(cells)} cells, expected {width}"
                )
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                raise DatasetFormatError(
                    f"non-numeric cell in row {len(rows)} (line {lineno})"
                ) from None
    if not rows:
        raise DatasetFormatError("empty dataset")
    meta = {}
    if os.path.exists(path + ".json"):
        with open(path + ".json", encoding="utf-8") as fh:
            meta = json.load(fh)
    return Dataset(
        np.array(rows, dtype=np.float64),
        name=name or meta.get("name") or os.path.basename(path),
        seed=meta.get("seed"),
        bounds=meta.get("bounds"),
    )


def split(data: Dataset, fractions, seed=0) -> list:
    """Randomly partition ``data`` into disjoint parts with the given fractions.

    Part sizes use largest-remainder rounding so they always sum to n.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or fr.size == 0 or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")
    n = data.n
    raw = fr * n
    sizes = np.floor(raw).astype(int)
    # ties in the remainder go to the earlier part
    order = sorted(range(fr.size), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - int(sizes.sum())]:
        sizes[i] += 1
    if np.any(sizes == 0):
        raise ValueError(f"fractions {fr.tolist()} leave an empty part for n={n}")
    perm = substream(seed, "split").permutation(n)
    parts = []
    start = 0
    for k, size in enumerate(sizes):
        idx = np.sort(perm[start : start + size])
        parts.append(Dataset(data.points[idx], name=f"{data.name}[{k}]", seed=data.seed))
        start += size
    return parts


def l1_diameter(points) -> float:
    """Exact sup of ||x - x'||_1 over a point set (via sign vectors; small d)."""
    pts = as_points(points)
    d = pts.shape[1]
    if d > 16:
        raise ValueError("l1_diameter enumerates 2**(d-1) sign vectors; d must be <= 16")
    best = 0.0
    for mask in range(1 << max(d - 1, 0)):
        s = np.array([1.0] + [(-1.0 if mask >> j & 1 else 1.0) for j in range(d - 1)])
        proj = pts @ s
        best = max(best, float(proj.max() - proj.min()))
    return best


def max_norm(points, ord=1) -> float:
    """sup_x ||x||_ord over the point set."""
    return float(np.max(np.linalg.norm(as_points(points), ord=ord, axis=1)))

