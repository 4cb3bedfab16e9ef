"""Cost, geopotential and transform evaluation.

Everything works in *lifted* coordinates ``(x1, x2, zeta(x3))``: the cost
is bilinear in (x, lifted vertical) minus a quadratic in x alone, so the
geopotential

    P(x) = max_i ( x1 y1_i + x2 y2_i + zeta(x3) y3_i - R_i )

is a max of affine functions of the lifted point. Points passed to the
public functions are physical ``(x1, x2, x3)`` (x3 is pressure in the
compressible model) unless a name says otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measures import CostModel, DualCloud

CONVEXITY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class PotentialWeights:
    """One Kantorovich weight per particle, tied to its cloud and cost."""

    weights: np.ndarray
    cloud: DualCloud
    cost: CostModel

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != self.cloud.n:
            raise ValueError(f"{w.shape[0]} weights for {self.cloud.n} particles")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def shifted(self, delta) -> "PotentialWeights":
        return PotentialWeights(self.weights + delta, self.cloud, self.cost)


@dataclass(frozen=True, eq=False)
class GridField:
    """Scalar samples on a tensor grid given by one coordinate array per axis."""

    axes: tuple
    values: np.ndarray

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != tuple(len(a) for a in axes):
            raise ValueError(f"values shape {vals.shape} does not match axes")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "values", vals)

    @property
    def shape(self):
        return self.values.shape

    @property
    def spacing(self):
        return tuple(float(a[1] - a[0]) if len(a) > 1 else 0.0 for a in self.axes)

    def points(self) -> np.ndarray:
        """All sample points, shape (size, ndim), row-major."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    @classmethod
    def uniform(cls, lower, upper, counts, fill=0.0):
        """Node grid including both endpoints of every axis."""
        axes = tuple(np.linspace(a, b, n) for a, b, n in zip(lower, upper, counts))
        return cls(axes, np.full(tuple(counts), float(fill)))


def cost(x, y, model: CostModel = CostModel()):
    """c(x, y) = 0.5(|x1-y1|^2 + |x2-y2|^2) - zeta(x3) y3 (broadcasting)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    horiz = 0.5 * ((x[..., 0] - y[..., 0]) ** 2 + (x[..., 1] - y[..., 1]) ** 2)
    out = horiz - model.zeta(x[..., 2]) * y[..., 2]
    return out if out.ndim else float(out)


def lift(x, model: CostModel):
    x = np.asarray(x, dtype=float)
    return np.concatenate([x[..., :2], model.zeta(x[..., 2])[..., None]], axis=-1)


def affine_scores(x, w: PotentialWeights):
    """Score of every particle at every point: shape (..., N)."""
    xl = lift(x, w.cost)
    return xl @ w.cloud.positions.T - w.weights


def geopotential(x, w: PotentialWeights):
    """Return (P(x), index of the winning particle); ties go to the lowest index."""
    s = affine_scores(x, w)
    idx = np.argmax(s, axis=-1)
    val = np.take_along_axis(s, idx[..., None], axis=-1)[..., 0]
    if val.ndim == 0:
        return float(val), int(idx)
    return val, idx


def pressure(x, w: PotentialWeights):
    """p = P - 0.5(x1^2 + x2^2)."""
    x = np.asarray(x, dtype=float)
    P, _ = geopotential(x, w)
    return P - 0.5 * (x[..., 0] ** 2 + x[..., 1] ** 2)


def c_transform_of_f(f: GridField, model: CostModel, probes):
    """Grid lower-bound estimate of f^c(y) = inf_x c(x, y) - f(x).

    The infimum is taken over the grid samples only, so the result is an
    upper bound on the true infimum over the continuum.
    """
    pts = f.points()
    fv = f.values.ravel()
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    out = np.empty(len(probes))
    for q, y in enumerate(probes):
        out[q] = np.min(cost(pts, y, model) - fv)
    return out


def legendre_transform(w: PotentialWeights, probes, grid: GridField):
    """P*(y) = sup_x (x . y - P(x)) over the lifted grid points of ``grid``."""
    pts = grid.points()
    P, _ = geopotential(pts, w)
    xl = lift(pts, w.cost)
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    return np.array([np.max(xl @ y - P) for y in probes])


def _sample_box(rng, lower, upper, n):
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    return lower + (upper - lower) * rng.uniform(size=(n, len(lower)))


def _lifted_bounds(w, bounds):
    lo, hi = np.array(bounds[0], float), np.array(bounds[1], float)
    lo[2], hi[2] = w.cost.zeta(lo[2]), w.cost.zeta(hi[2])
    return lo, hi


def check_c_concavity(w: PotentialWeights, samples: int = 1000, bounds=((0, 0, 0), (1, 1, 1)),
                      seed=0) -> dict:
    """Midpoint convexity test of P on random lifted triples.

    ``bounds`` is a physical box; its vertical range is lifted through zeta.
    Returns the largest violation of P(mid) <= (P(x) + P(x'))/2.
    """
    rng = np.random.default_rng(seed)
    lo, hi = _lifted_bounds(w, bounds)
    a = _sample_box(rng, lo, hi, samples)
    b = _sample_box(rng, lo, hi, samples)
    Sa = a @ w.cloud.positions.T - w.weights
    Sb = b @ w.cloud.positions.T - w.weights
    Pa, Pb = Sa.max(axis=1), Sb.max(axis=1)
    # each score is affine, so its midpoint value is the endpoint average;
    # forming it that way keeps rounding out of the single-sheet case
    Pm = (0.5 * (Sa + Sb)).max(axis=1)
    viol = float(max(0.0, np.max(Pm - 0.5 * (Pa + Pb))))
    return {"samples": samples, "max_violation": viol, "passed": viol <= CONVEXITY_TOL}


def check_vertical_monotonicity(w: PotentialWeights, samples: int = 1000,
                                bounds=((0, 0, 0), (1, 1, 1)), seed=0) -> dict:
    """P(x1, x2, s) >= P(x1, x2, s') for s <= s' when all y3 < 0."""
    rng = np.random.default_rng(seed)
    pts = _sample_box(rng, bounds[0], bounds[1], samples)
    other = pts.copy()
    other[:, 2] = _sample_box(rng, [bounds[0][2]], [bounds[1][2]], samples)[:, 0]
    low = np.where((pts[:, 2] <= other[:, 2])[:, None], pts, other)
    high = np.where((pts[:, 2] <= other[:, 2])[:, None], other, pts)
    P_low, _ = geopotential(low, w)
    P_high, _ = geopotential(high, w)
    viol = float(max(0.0, np.max(P_high - P_low)))
    return {"samples": samples, "max_violation": viol, "passed": viol <= CONVEXITY_TOL}


def geostrophic_velocity(y, x_bar):
    """(u1g, u2g) = (x2 - y2, y1 - x1), the inverse of the geostrophic change of variables."""
    y = np.asarray(y, dtype=float)
    x_bar = np.asarray(x_bar, dtype=float)
    return np.stack([x_bar[..., 1] - y[..., 1], y[..., 0] - x_bar[..., 0]], axis=-1)
