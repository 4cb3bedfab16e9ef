"""Brute-force reference computations for tests.

None of this is on the solver path: the transport LP, lattice scans of
the dual functional and finite differences exist to check the fast
code against something obviously correct.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .geometry import cost as cost_fn
from .laguerre import dual_functional
from .measures import CostModel, DualCloud, FluidDomain

MAX_SOURCE_ATOMS = 32**3
MAX_TARGET_ATOMS = 64
MAX_PLAN_ENTRIES = 32**3 * 8
MASS_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class DiscreteMeasurePair:
    source_points: np.ndarray
    source_masses: np.ndarray
    target_points: np.ndarray
    target_masses: np.ndarray

    def __post_init__(self):
        for name in ("source_points", "target_points"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), float)))
        for name in ("source_masses", "target_masses"):
            m = np.asarray(getattr(self, name), float).reshape(-1)
            if np.any(m < 0):
                raise ValueError(f"{name} must be nonnegative")
            if abs(m.sum() - 1.0) > MASS_TOL:
                raise ValueError(f"{name} sum to {m.sum():.17g}, expected 1")
            object.__setattr__(self, name, m)
        if len(self.source_points) != len(self.source_masses):
            raise ValueError("source points and masses differ in length")
        if len(self.target_points) != len(self.target_masses):
            raise ValueError("target points and masses differ in length")

    @classmethod
    def from_cloud(cls, points, masses, cloud: DualCloud):
        return cls(points, masses, cloud.positions, cloud.masses)


@dataclass
class TransportResult:
    plan: np.ndarray
    cost: float
    marginal_error: float


def voxelize(domain: FluidDomain, cost: CostModel, n_vertical: int, heights=None):
    """Midpoint atoms of the fluid region on the solver's columns.

    Rigid-lid: the whole box. Free surface: each column is cut at its
    height ``heights[k]`` and split into ``n_vertical`` equal slabs.
    Atom masses are slab volumes, normalized to 1.
    """
    centers = domain.column_centers()
    base = cost.base
    if heights is None:
        if domain.free_surface:
            raise ValueError("free-surface voxelization needs column heights")
        heights = np.full(len(centers), base + domain.lid_height)
    heights = np.asarray(heights, float).reshape(-1)
    frac = (np.arange(n_vertical) + 0.5) / n_vertical
    depth = heights - base
    z = base + depth[:, None] * frac[None, :]
    pts = np.column_stack([
        np.repeat(centers, n_vertical, axis=0),
        z.ravel(),
    ])
    mass = np.repeat(domain.column_area * depth / n_vertical, n_vertical)
    keep = mass > 0
    pts, mass = pts[keep], mass[keep]
    return pts, mass / mass.sum()


def lp_transport(pair: DiscreteMeasurePair, cost=None) -> TransportResult:
    """Exact discrete Kantorovich problem.

    ``cost`` is a CostModel, a callable ``c(X, Y) -> matrix``, or None for
    the squared Euclidean distance. Solved with HiGHS interior point plus
    crossover, which returns a vertex (basic) optimal plan.
    """
    X, a = pair.source_points, pair.source_masses
    Y, b = pair.target_points, pair.target_masses
    M, N = len(a), len(b)
    if M > MAX_SOURCE_ATOMS or N > MAX_TARGET_ATOMS or M * N > MAX_PLAN_ENTRIES:
        raise ValueError(f"problem size {M} x {N} exceeds the oracle cap")
    if cost is None:
        C = np.sum((X[:, None, :] - Y[None, :, :]) ** 2, axis=2)
    elif isinstance(cost, CostModel):
        C = cost_fn(X[:, None, :], Y[None, :, :], cost)
    else:
        C = np.asarray(cost(X, Y), float)
    C = np.asarray(C, float).reshape(M, N)
    if M == 1 or N == 1:
        plan = a[:, None] * b[None, :]
        return TransportResult(plan, float(np.sum(plan * C)), 0.0)
    idx = np.arange(M * N)
    rows = np.concatenate([idx // N, M + idx % N])
    A = sp.csr_matrix((np.ones(2 * M * N), (rows, np.concatenate([idx, idx]))), shape=(M + N, M * N))
    rhs = np.concatenate([a, b])
    # one marginal constraint is redundant given equal totals
    res = linprog(C.ravel(), A_eq=A[:-1], b_eq=rhs[:-1], bounds=(0, None), method="highs-ipm",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = np.maximum(res.x.reshape(M, N), 0.0)
    err = max(float(np.max(np.abs(plan.sum(axis=1) - a))), float(np.max(np.abs(plan.sum(axis=0) - b))))
    return TransportResult(plan, float(np.sum(plan * C)), err)


def exact_w2(pair: DiscreteMeasurePair) -> float:
    if len(pair.source_masses) > 64 or len(pair.target_masses) > 64:
        raise ValueError("exact_w2 is limited to 64 atoms per side")
    return float(np.sqrt(max(lp_transport(pair).cost, 0.0)))


def finite_difference_gradient(f, x, step=1e-6) -> np.ndarray:
    """Central differences of a scalar function."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, float)
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


@dataclass
class ScanResult:
    weights: np.ndarray
    value: float
    spacing: float
    lower: np.ndarray
    upper: np.ndarray


def weight_scan(cloud: DualCloud, domain: FluidDomain, cost: CostModel, center, half_width,
                points=21, passes=1) -> ScanResult:
    """Maximize the dual functional over a square lattice of weight vectors.

    Each pass recenters on the best lattice point and halves the half
    width, so the bracket halves every pass. In rigid-lid mode the last
    weight is pinned to the gauge R_0 + R_1 = 0 for N = 2.
    """
    N = cloud.n
    if N > 2:
        raise ValueError("weight_scan supports at most two particles")
    c = np.array(center, float).reshape(N)
    hw = float(half_width)
    rigid = not domain.free_surface
    free_dims = 1 if (rigid and N == 2) else N
    best_val = -np.inf
    best = c.copy()
    for _ in range(passes):
        axes = [np.linspace(c[d] - hw, c[d] + hw, points) for d in range(free_dims)]
        for pt in itertools.product(*axes):
            R = np.array(pt) if free_dims == N else np.array([pt[0], -pt[0]])
            val = dual_functional(cloud, domain, cost, R)
            if val > best_val:
                best_val, best = val, R
        c = best.copy()
        spacing = 2 * hw / (points - 1)
        lower, upper = c - hw, c + hw
        hw *= 0.5
    return ScanResult(best, float(best_val), spacing, lower, upper)
