"""Semidiscrete Kantorovich solve with a vacuum phase.

The fluid box is cut into vertical columns. Each column is represented
by its midpoint ``(x1, x2)`` and footprint area; along the column every
particle contributes an affine function of the lifted vertical coordinate
``z = zeta(s)``

    f_i(z) = x1 y1_i + x2 y2_i - R_i + y3_i z

and, in free-surface mode, the vacuum contributes the constant
``0.5 (x1^2 + x2^2)``. Fluid is wherever the particle envelope reaches the
vacuum level (p >= 0). Because every y3_i < 0 the vacuum line has the
largest slope, so vacuum is automatically the top segment of each column
and the surface is single valued. Vertical integrals along each envelope
segment are closed form, so the only discretization is the midpoint rule
across columns.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import GridField, PotentialWeights, geopotential, pressure
from .measures import CostModel, DualCloud, FluidDomain, SolverConfig

VACUUM = -1
CHUNK_COLUMNS = 512
STALL_WINDOW = 10

_num_threads = 1


def set_num_threads(n: int) -> None:
    """Worker threads used for column chunks; results do not depend on it."""
    global _num_threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _num_threads = int(n)


def get_num_threads() -> int:
    return _num_threads


class SolverError(RuntimeError):
    """Weight ascent failed to reach the mass tolerance."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class CapTooLowError(SolverError):
    """The free surface touches the vertical cap."""


class ConsistencyError(RuntimeError):
    """Two independent computations of the same quantity disagree."""


@dataclass(eq=False)
class Tessellation:
    """Column decomposition of the fluid into generalized Laguerre cells.

    Segment arrays have shape (columns, N + vacuum); ``labels`` gives the
    particle index of each segment slot (``VACUUM`` for the vacuum slot).
    Segment endpoints are physical vertical coordinates.
    """

    volumes: np.ndarray
    barycenters: np.ndarray
    heights: GridField
    seg_lo: np.ndarray
    seg_hi: np.ndarray
    labels: np.ndarray
    column_centers: np.ndarray
    column_area: float
    base: float
    top: float
    free_surface: bool
    fluid_term: float
    transport_cost: float
    hessian: np.ndarray
    cost_integrals: np.ndarray = field(repr=False, default=None)

    @property
    def n_columns(self) -> int:
        return self.seg_lo.shape[0]

    @property
    def fluid_volume(self) -> float:
        return float(np.sum(self.volumes))

    @property
    def column_heights(self) -> np.ndarray:
        return self.heights.values.ravel()

    def column_segments(self, k: int):
        """Nonempty segments of column k as (lo, hi, label), bottom to top."""
        lo, hi = self.seg_lo[k], self.seg_hi[k]
        keep = hi > lo
        order = np.argsort(lo[keep], kind="stable")
        return [(float(a), float(b), int(c)) for a, b, c in
                zip(lo[keep][order], hi[keep][order], self.labels[keep][order])]

    def surface_violations(self) -> int:
        """Columns whose fluid is not exactly [base, h] with vacuum above."""
        nonempty = self.seg_hi > self.seg_lo
        order = np.argsort(np.where(nonempty, self.seg_lo, np.inf), axis=1, kind="stable")
        lo = np.take_along_axis(self.seg_lo, order, axis=1)
        hi = np.take_along_axis(self.seg_hi, order, axis=1)
        lab = np.broadcast_to(self.labels, self.seg_lo.shape)
        lab = np.take_along_axis(lab, order, axis=1)
        valid = np.take_along_axis(nonempty, order, axis=1)  # nonempty slots come first
        count = valid.sum(axis=1)
        rows = np.arange(self.n_columns)
        # gap-free stack from base to top
        prev = np.concatenate([np.full((self.n_columns, 1), self.base), hi[:, :-1]], axis=1)
        bad = np.any(valid & (lo != prev), axis=1)
        last_hi = hi[rows, np.maximum(count - 1, 0)]
        bad |= (count > 0) & (last_hi != self.top)
        # no fluid above a vacuum segment
        vac = valid & (lab == VACUUM)
        above = np.cumsum(vac, axis=1) - vac > 0
        bad |= np.any(valid & above & (lab != VACUUM), axis=1)
        fluid_top = np.max(np.where(valid & (lab != VACUUM), hi, -np.inf), axis=1)
        fluid_top = np.where(np.isfinite(fluid_top), fluid_top, self.base)
        bad |= fluid_top != self.column_heights
        return int(np.sum(bad))


def _lines(cloud: DualCloud, weights, centers, free_surface):
    Y = cloud.positions
    b = centers @ Y[:, :2].T - weights[None, :]
    a = Y[:, 2].copy()
    labels = np.arange(cloud.n)
    if free_surface:
        vac = 0.5 * np.sum(centers**2, axis=1)
        b = np.concatenate([b, vac[:, None]], axis=1)
        a = np.append(a, 0.0)
        labels = np.append(labels, VACUUM)
    return a, b, labels


def _envelope_chunk(a_s, rank, b_s, z_lo, z_hi):
    """Envelope partition of [z_lo, z_hi] for lines sorted by slope.

    Returns the boundary array B (K, L): line l owns [B[l-1], B[l]].
    """
    K, L = b_s.shape
    da = a_s[None, :] - a_s[:, None]  # da[i, j] = a_j - a_i
    db = b_s[:, :, None] - b_s[:, None, :]  # db[k, i, j] = b_i - b_j
    with np.errstate(divide="ignore", invalid="ignore"):
        cross = db / da[None]
    upper = np.where((da > 0)[None], cross, np.inf).min(axis=2)
    lower = np.where((da < 0)[None], cross, -np.inf).max(axis=2)
    hi = np.minimum(upper, z_hi)
    lo = np.maximum(lower, z_lo)
    same = (da == 0) & ~np.eye(L, dtype=bool)
    beaten = (db < 0) | ((db == 0) & (rank[None, :] < rank[:, None])[None])
    dominated = np.any(same[None] & beaten, axis=2)
    nonempty = (lo < hi) & ~dominated
    B = np.maximum.accumulate(np.where(nonempty, hi, z_lo), axis=1)
    # the topmost nonempty line owns everything up to z_hi
    idx = np.where(nonempty, np.arange(L)[None, :], -1)
    last = idx.max(axis=1)
    B = np.where(np.arange(L)[None, :] >= last[:, None], z_hi, B)
    return B, nonempty


def _column_partition(a, b, z_lo, z_hi):
    order = np.argsort(a, kind="stable")
    a_s = a[order]
    b_s = b[:, order]
    rank = order  # original index breaks ties among equal slopes
    K = b.shape[0]
    starts = list(range(0, K, CHUNK_COLUMNS))

    def work(s):
        return _envelope_chunk(a_s, rank, b_s[s:s + CHUNK_COLUMNS], z_lo, z_hi)

    if _num_threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=_num_threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    B = np.concatenate([p[0] for p in parts], axis=0)
    nonempty = np.concatenate([p[1] for p in parts], axis=0)
    return order, a_s, B, nonempty


def _vertical_range(domain: FluidDomain, cost: CostModel):
    base = cost.base
    top = domain.cap if domain.free_surface else base + domain.lid_height
    if not top > base:
        raise CapTooLowError(f"vertical range [{base}, {top}] is empty")
    if domain.free_surface and not domain.area * (top - base) > 1.0:
        raise CapTooLowError(
            f"cap too low: fluid room {domain.area * (top - base):.6g} does not exceed unit volume"
        )
    return base, top


def tessellate(cloud: DualCloud, domain: FluidDomain, cost: CostModel, w) -> Tessellation:
    """Column-envelope decomposition for the given weights."""
    weights = np.asarray(w.weights if isinstance(w, PotentialWeights) else w, dtype=float)
    if weights.shape != (cloud.n,):
        raise ValueError(f"expected {cloud.n} weights, got shape {weights.shape}")
    if domain.free_surface and np.any(cloud.positions[:, 2] >= 0):
        raise ValueError("free-surface mode requires every y3 < 0")
    base, top = _vertical_range(domain, cost)
    z_lo, z_hi = float(cost.zeta(base)), float(cost.zeta(top))
    centers = domain.column_centers()
    A = domain.column_area
    N = cloud.n

    a, b, labels = _lines(cloud, weights, centers, domain.free_surface)
    order, a_s, B, nonempty_s = _column_partition(a, b, z_lo, z_hi)
    L = len(a)
    K = centers.shape[0]

    zlo_s = np.concatenate([np.full((K, 1), z_lo), B[:, :-1]], axis=1)
    s_hi_s = cost.zeta_inv(B)
    s_lo_s = cost.zeta_inv(zlo_s)
    # pin the column ends so no rounding leaks through zeta_inv
    s_lo_s[:, 0] = base
    s_hi_s = np.where(B == z_hi, top, s_hi_s)
    s_lo_s = np.where(zlo_s == z_hi, top, np.where(zlo_s == z_lo, base, s_lo_s))

    inv = np.empty(L, dtype=int)
    inv[order] = np.arange(L)
    seg_lo = s_lo_s[:, inv]
    seg_hi = s_hi_s[:, inv]

    length = seg_hi - seg_lo
    zint = cost.zeta_integral(seg_lo, seg_hi)
    sint = 0.5 * (seg_hi**2 - seg_lo**2)

    fl = slice(0, N)
    vol = A * np.sum(length[:, fl], axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        bary = np.column_stack([
            A * (centers[:, 0] @ length[:, fl]) / vol,
            A * (centers[:, 1] @ length[:, fl]) / vol,
            A * np.sum(sint[:, fl], axis=0) / vol,
        ])
    bary[vol <= 0] = np.nan

    Y = cloud.positions
    theta = 0.5 * np.sum(centers**2, axis=1)
    fluid_term = A * float(np.sum((theta[:, None] - b[:, fl]) * length[:, fl] - Y[:, 2][None, :] * zint[:, fl]))
    horiz = 0.5 * ((centers[:, 0:1] - Y[None, :, 0]) ** 2 + (centers[:, 1:2] - Y[None, :, 1]) ** 2)
    cost_int = A * np.sum(horiz * length[:, fl] - Y[:, 2][None, :] * zint[:, fl], axis=0)

    if domain.free_surface:
        h = seg_lo[:, N].copy()
    else:
        h = np.full(K, top)
    heights = GridField(domain.column_axes(), h.reshape(domain.grid))

    hess = _hessian(a_s, order, labels, B, nonempty_s, cost, A, N, z_lo, z_hi)

    return Tessellation(
        volumes=vol,
        barycenters=bary,
        heights=heights,
        seg_lo=seg_lo,
        seg_hi=seg_hi,
        labels=labels,
        column_centers=centers,
        column_area=A,
        base=base,
        top=top,
        free_surface=domain.free_surface,
        fluid_term=fluid_term,
        transport_cost=float(np.sum(cost_int)),
        hessian=hess,
        cost_integrals=cost_int,
    )


def _hessian(a_s, order, labels, B, nonempty, cost, A, N, z_lo, z_hi):
    """dV/dR from the interior breakpoints of every column."""
    K, L = B.shape
    idx = np.where(nonempty, np.arange(L)[None, :], L)
    # next nonempty slot above each slot
    nxt = np.minimum.accumulate(idx[:, ::-1], axis=1)[:, ::-1]
    nxt = np.concatenate([nxt[:, 1:], np.full((K, 1), L)], axis=1)
    kk, ll = np.nonzero(nonempty & (nxt < L))
    jj = nxt[kk, ll]
    z = B[kk, ll]
    inside = (z > z_lo) & (z < z_hi)
    kk, ll, jj, z = kk[inside], ll[inside], jj[inside], z[inside]
    s = cost.zeta_inv(z)
    if cost.kappa == 1.0:
        ds_dz = np.ones_like(z)
    else:
        ds_dz = s / (cost.kappa * z)
    coef = A * ds_dz / (a_s[jj] - a_s[ll])
    lab_i = labels[order[ll]]
    lab_j = labels[order[jj]]
    H = np.zeros(N * N)
    both = lab_j != VACUUM
    rows = np.concatenate([lab_i * N + lab_i, lab_j[both] * N + lab_j[both],
                           lab_i[both] * N + lab_j[both], lab_j[both] * N + lab_i[both]])
    vals = np.concatenate([-coef, -coef[both], coef[both], coef[both]])
    H += np.bincount(rows, weights=vals, minlength=N * N)
    return H.reshape(N, N)


def dual_functional(cloud, domain, cost, w, tess: Optional[Tessellation] = None) -> float:
    """F(R) = sum_i m_i (0.5|y_h|^2 - R_i) + integral over the fluid of (0.5|x_h|^2 - P)."""
    R = np.asarray(w.weights if isinstance(w, PotentialWeights) else w, dtype=float)
    t = tess if tess is not None else tessellate(cloud, domain, cost, R)
    Y = cloud.positions
    first = float(np.sum(cloud.masses * (0.5 * (Y[:, 0] ** 2 + Y[:, 1] ** 2) - R)))
    return first + t.fluid_term


def dual_gradient(cloud, domain, cost, w, tess: Optional[Tessellation] = None) -> np.ndarray:
    """dF/dR_i = V_i(R) - m_i."""
    t = tess if tess is not None else tessellate(cloud, domain, cost, w)
    return t.volumes - cloud.masses


def initial_weights(cloud: DualCloud, domain: FluidDomain, cost: CostModel) -> np.ndarray:
    """R_i = 0.5|y_h|^2 - c0 with c0 giving roughly unit fluid volume."""
    Y = cloud.positions
    base_w = 0.5 * (Y[:, 0] ** 2 + Y[:, 1] ** 2)
    if not domain.free_surface:
        return base_w - np.mean(base_w)

    def volume(c0):
        return tessellate(cloud, domain, cost, base_w - c0).fluid_volume

    lo, hi = 0.0, 1.0
    while volume(lo) > 1.0:
        lo -= 2.0 * (hi - lo)
    while volume(hi) < 1.0:
        hi += 2.0 * (hi - lo)
    # only a starting point for Newton, so a coarse bracket suffices
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        v = volume(mid)
        if abs(v - 1.0) < 1e-3:
            return base_w - mid
        if v < 1.0:
            lo = mid
        else:
            hi = mid
    return base_w - 0.5 * (lo + hi)


@dataclass
class SolveStats:
    iterations: int
    residual: float
    evaluations: int
    newton_steps: int
    fill_steps: int


def _fill_empty_cells(cloud, domain, cost, R, max_rounds=100, levels=33):
    """Lower the weights of empty cells until every cell holds fluid.

    Each empty cell gets just enough to win at one sampled point of the
    box (column midpoints times ``levels`` heights), plus a small margin.
    """
    t = tessellate(cloud, domain, cost, R)
    base, top = _vertical_range(domain, cost)
    centers = domain.column_centers()
    z = cost.zeta(np.linspace(base, top, levels))
    margin = 1e-3 * (1.0 + float(np.max(np.abs(cloud.positions)))) * domain.diameter(cost.base)
    rounds = 0
    while np.any(t.volumes <= 0):
        if rounds >= max_rounds:
            raise SolverError("could not give every particle a nonempty cell",
                              residual=float(np.max(np.abs(t.volumes - cloud.masses))))
        a, b, _ = _lines(cloud, R, centers, domain.free_surface)
        scores = b[:, None, :] + z[None, :, None] * a[None, None, :]  # (K, levels, L)
        best = scores.max(axis=2)
        for i in np.flatnonzero(t.volumes <= 0):
            R[i] -= float(np.min(best - scores[:, :, i])) + margin
        t = tessellate(cloud, domain, cost, R)
        rounds += 1
    return R, t, rounds, rounds


def _coordinate_sweeps(cloud, domain, cost, R, target, max_sweeps=200):
    """Gauss-Seidel bisection on one weight at a time.

    V_i is nonincreasing in R_i even where it is a step function of R
    (cells split by vertical planes when particles share y3), so 1-D
    bisection still lands on a flat stretch with V_i = m_i when one exists.
    """
    m = cloud.masses
    evals = 0

    def resid(i, r):
        nonlocal evals
        Rt = R.copy()
        Rt[i] = r
        t = tessellate(cloud, domain, cost, Rt)
        evals += 1
        return t.volumes[i] - m[i], t

    t = tessellate(cloud, domain, cost, R)
    for _ in range(max_sweeps):
        res = np.abs(t.volumes - m)
        if np.max(res) <= target:
            return R, t, evals, True
        for i in np.argsort(-res, kind="stable"):
            phi, t = resid(i, R[i])
            if abs(phi) <= 0.5 * target:
                continue
            # bracket: phi decreases as R_i grows
            step = max(abs(phi), 1e-6)
            lo = hi = R[i]
            if phi > 0:
                while phi > 0:
                    lo, hi = hi, hi + step
                    phi, t = resid(i, hi)
                    step *= 2.0
            else:
                while phi < 0:
                    hi, lo = lo, lo - step
                    phi, t = resid(i, lo)
                    step *= 2.0
            best_r, best_phi, best_t = (hi, phi, t) if phi <= 0 else (lo, phi, t)
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if not lo < mid < hi:
                    break
                phi, tm = resid(i, mid)
                if abs(phi) < abs(best_phi):
                    best_r, best_phi, best_t = mid, phi, tm
                if abs(phi) <= 0.5 * target:
                    break
                if phi > 0:
                    lo = mid
                else:
                    hi = mid
            R[i] = best_r
            t = best_t
    return R, t, evals, bool(np.max(np.abs(t.volumes - m)) <= target)


def solve_weights(cloud: DualCloud, domain: FluidDomain, cost: CostModel,
                  config: SolverConfig = SolverConfig(), initial_w=None):
    """Maximize the concave dual functional F over the weights.

    Damped Newton on the exact column Hessian. A step is accepted once
    every cell keeps at least half the smallest starting volume (or mass)
    and the residual norm |V - m| drops by the factor (1 - alpha/2).
    Stops when max_i |V_i - m_i| <= tol * max_i m_i.

    Returns (PotentialWeights, Tessellation, SolveStats).
    """
    if domain.free_surface and np.any(cloud.positions[:, 2] >= 0):
        raise ValueError("free-surface mode requires every y3 < 0")
    if initial_w is None:
        R = initial_weights(cloud, domain, cost)
    else:
        R = np.array(initial_w.weights if isinstance(initial_w, PotentialWeights) else initial_w, float)
    m = cloud.masses
    target = config.mass_tolerance * float(np.max(m))
    rigid = not domain.free_surface
    if rigid:
        R = R - np.mean(R)

    R, t, evals, fills = _fill_empty_cells(cloud, domain, cost, R.copy())
    evals += 1
    floor = 0.5 * min(float(np.min(t.volumes)), float(np.min(m)))
    newton = it = 0
    history = []
    while True:
        g = t.volumes - m
        res = float(np.max(np.abs(g)))
        if res <= target:
            break
        history.append(res)
        stalled = len(history) > STALL_WINDOW and res > 0.5 * history[-STALL_WINDOW - 1]
        if stalled or it >= config.max_ascent_iterations:
            # Newton sees no curvature across vertical interfaces; fall back
            R, t, extra, ok = _coordinate_sweeps(cloud, domain, cost, R.copy(), target)
            evals += extra
            res = float(np.max(np.abs(t.volumes - m)))
            if ok:
                break
            raise SolverError(
                f"weight solve did not converge after {it} Newton iterations and coordinate sweeps "
                f"(residual {res:.3e})",
                residual=res, iterations=it)
        it += 1
        H = t.hessian
        scale = max(float(np.max(np.abs(np.diag(H)))), 1e-300)
        H = H - config.regularization * scale * np.eye(len(R))
        try:
            d = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular Newton system: {exc}", residual=res, iterations=it) from exc
        if rigid:
            d = d - np.mean(d)
        gnorm = float(np.linalg.norm(g))
        alpha = 1.0
        for _ in range(config.max_backtracks):
            R_try = R + alpha * d
            t_try = tessellate(cloud, domain, cost, R_try)
            evals += 1
            g_try = t_try.volumes - m
            if (np.min(t_try.volumes) >= floor
                    and np.linalg.norm(g_try) <= (1.0 - 0.5 * alpha) * gnorm):
                break
            alpha *= config.backtrack
        else:
            history.extend([res] * (STALL_WINDOW + 1))
            continue
        newton += 1
        R, t = R_try, t_try

    if rigid:
        R = R - np.mean(R)
        t = tessellate(cloud, domain, cost, R)
    if domain.free_surface and np.any(t.column_heights >= t.top):
        raise CapTooLowError("free surface reaches the vertical cap", residual=res, iterations=it)
    stats = SolveStats(iterations=it, residual=res, evaluations=evals,
                       newton_steps=newton, fill_steps=fills)
    return PotentialWeights(R, cloud, cost), t, stats


def _column_pi_minimizer(x, theta, w: PotentialWeights, base, top):
    """Minimize Pi_P(s) = int_base^s (theta - P) over [base, top] for one column.

    Independent of the envelope partition: breakpoints come from all
    pairwise crossings, and the winner on each piece from geopotential.
    """
    cost = w.cost
    Y = w.cloud.positions
    b = x[0] * Y[:, 0] + x[1] * Y[:, 1] - w.weights
    a = Y[:, 2]
    z_lo, z_hi = float(cost.zeta(base)), float(cost.zeta(top))
    with np.errstate(divide="ignore", invalid="ignore"):
        pair = (b[:, None] - b[None, :]) / (a[None, :] - a[:, None])
        level = (theta - b) / a
    cand = np.concatenate([[z_lo, z_hi], pair[np.isfinite(pair)], level[np.isfinite(level)]])
    z = np.unique(np.clip(cand, z_lo, z_hi))
    s = cost.zeta_inv(z)
    s[0], s[-1] = base, top
    s0, s1 = s[:-1], s[1:]
    keep = s1 > s0
    s0, s1 = s0[keep], s1[keep]
    mids = np.column_stack([np.full(len(s0), x[0]), np.full(len(s0), x[1]), 0.5 * (s0 + s1)])
    _, win = geopotential(mids, w)
    bi, ai = b[win], a[win]
    # the integrand theta - bi - ai zeta(s) is nondecreasing on each piece
    piece = (theta - bi) * (s1 - s0) - ai * cost.zeta_integral(s0, s1)
    acc = np.concatenate([[0.0], np.cumsum(piece)])
    g1 = theta - bi - ai * cost.zeta(s1)
    g0 = theta - bi - ai * cost.zeta(s0)
    roots = np.clip(cost.zeta_inv((theta - bi) / ai), s0, s1)
    crossing = (g0 < 0) & (g1 >= 0)
    root_val = acc[:-1] + (theta - bi) * (roots - s0) - ai * cost.zeta_integral(s0, roots)
    cand_s = np.concatenate([[base], s1, roots[crossing]])
    cand_v = np.concatenate([[0.0], acc[1:], root_val[crossing]])
    best = np.flatnonzero(cand_v == cand_v.min())
    return float(np.min(cand_s[best]))


def surface_height_crosscheck(w: PotentialWeights, domain: FluidDomain, tess: Tessellation,
                              tol: float = 1e-10):
    """Recompute h per column by minimizing Pi_P and compare with the tessellation.

    Returns (GridField of recomputed heights, max height residual, max |p(x, h)|).
    Raises ConsistencyError if either residual exceeds ``tol``.
    """
    if not domain.free_surface:
        raise ValueError("surface cross-check applies to free-surface mode only")
    centers = tess.column_centers
    theta = 0.5 * np.sum(centers**2, axis=1)
    h_ref = tess.column_heights
    h_new = np.empty_like(h_ref)
    for k in range(len(centers)):
        h_new[k] = _column_pi_minimizer(centers[k], theta[k], w, tess.base, tess.top)
    h_res = float(np.max(np.abs(h_new - h_ref)))
    wet = (h_ref > tess.base) & (h_ref < tess.top)
    if np.any(wet):
        pts = np.column_stack([centers[wet], h_ref[wet]])
        p_res = float(np.max(np.abs(pressure(pts, w))))
    else:
        p_res = 0.0
    field = GridField(tess.heights.axes, h_new.reshape(tess.heights.shape))
    if h_res > tol or p_res > tol:
        raise ConsistencyError(
            f"surface mismatch: height residual {h_res:.3e}, surface pressure residual {p_res:.3e}")
    return field, h_res, p_res


def height_gradient_residual(w: PotentialWeights, tess: Tessellation) -> float:
    """Grid residual of grad2 p = rho grad2 h at the surface (max norm).

    Uses centered differences of h on interior wet columns; rho is the
    density -y3 of the particle owning the fluid just below the surface.
    """
    h = tess.heights.values
    if h.shape[0] < 3 or h.shape[1] < 3:
        return 0.0
    d1, d2 = tess.heights.spacing
    Y = w.cloud.positions
    worst = 0.0
    n1, n2 = h.shape
    centers = tess.column_centers.reshape(n1, n2, 2)
    eps = 1e-7
    for i in range(1, n1 - 1):
        for j in range(1, n2 - 1):
            block = h[i - 1:i + 2, j - 1:j + 2]
            if np.any(block <= tess.base) or np.any(block >= tess.top):
                continue
            x = np.array([*centers[i, j], h[i, j] - eps])
            _, win = geopotential(x, w)
            rho = -Y[win, 2]
            gh = np.array([(h[i + 1, j] - h[i - 1, j]) / (2 * d1), (h[i, j + 1] - h[i, j - 1]) / (2 * d2)])
            xs = np.array([[*centers[i, j], h[i, j] - eps]])
            gp = np.array([
                (pressure(xs + [d1, 0, 0], w) - pressure(xs - [d1, 0, 0], w))[0] / (2 * d1),
                (pressure(xs + [0, d2, 0], w) - pressure(xs - [0, d2, 0], w))[0] / (2 * d2),
            ])
            worst = max(worst, float(np.max(np.abs(gp - rho * gh))))
    return worst


def height_lipschitz(tess: Tessellation) -> float:
    """Largest neighbour slope of the discrete height field."""
    h = tess.heights.values
    d1, d2 = tess.heights.spacing
    out = 0.0
    if h.shape[0] > 1:
        out = max(out, float(np.max(np.abs(np.diff(h, axis=0))) / d1))
    if h.shape[1] > 1:
        out = max(out, float(np.max(np.abs(np.diff(h, axis=1))) / d2))
    return out


def write_heights_csv(path, tess: Tessellation, schema="sgfree.heights/1"):
    centers = tess.column_centers
    h = tess.column_heights
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={schema}\n")
        fh.write("column,x1,x2,h\n")
        for k in range(len(h)):
            fh.write(f"{k},{centers[k, 0]:.17g},{centers[k, 1]:.17g},{h[k]:.17g}\n")


def write_cells_csv(path, tess: Tessellation, w: PotentialWeights, schema="sgfree.cells/1"):
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={schema}\n")
        fh.write("particle,volume,xbar1,xbar2,xbar3,weight\n")
        for i in range(len(tess.volumes)):
            xb = tess.barycenters[i]
            fh.write(f"{i},{tess.volumes[i]:.17g},{xb[0]:.17g},{xb[1]:.17g},{xb[2]:.17g},"
                     f"{w.weights[i]:.17g}\n")
