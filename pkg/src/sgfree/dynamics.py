"""Particle evolution of the dual measure.

Each particle moves with w_i = J(y_i - xbar_i), where xbar_i is the
barycenter of its cell and J rotates the horizontal part counterclockwise
by a quarter turn (the vertical row of J is zero, so y3 never changes).
With xbar frozen over a step the motion is an exact rotation about xbar.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .geometry import PotentialWeights
from .laguerre import Tessellation, solve_weights
from .measures import CostModel, DualCloud, FluidDomain, SolverConfig, second_moment, support_radius

STEPPERS = ("exact-rotation", "exact-rotation-start", "rk4")


class HorizonWarning(UserWarning):
    """The run horizon exceeds the a-priori support bound."""


@dataclass
class DiagnosticsRecord:
    step: int
    time: float
    energy: float
    drift: float
    mass_residual: float
    mass_total_error: float
    support_radius: float
    max_speed: float
    w2_increment: float
    h_min: float
    h_max: float
    solver_iterations: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SimState:
    time: float
    cloud: DualCloud
    weights: PotentialWeights
    tess: Tessellation
    residual: float = 0.0
    iterations: int = 0
    step_index: int = 0
    history: list = field(default_factory=list)


def tilde_j(v):
    """Apply J: (v1, v2, v3) -> (-v2, v1, 0)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


def rotate_about(y, center, angle):
    """Rotate the horizontal part of y counterclockwise about ``center`` (y3 untouched)."""
    y = np.array(y, dtype=float)
    c, s = math.cos(angle), math.sin(angle)
    d1 = y[..., 0] - center[..., 0]
    d2 = y[..., 1] - center[..., 1]
    y[..., 0] = center[..., 0] + c * d1 - s * d2
    y[..., 1] = center[..., 1] + s * d1 + c * d2
    return y


def solve_state(cloud, domain, cost, config, time=0.0, initial_w=None, step_index=0) -> SimState:
    w, tess, stats = solve_weights(cloud, domain, cost, config, initial_w)
    return SimState(time, cloud, w, tess, stats.residual, stats.iterations, step_index)


def _check_converged(state: SimState, config: SolverConfig):
    if not state.residual <= config.mass_tolerance * float(np.max(state.cloud.masses)):
        raise ValueError(f"state is not converged (residual {state.residual:.3e})")


def dual_velocity(state: SimState, config: SolverConfig = SolverConfig()) -> np.ndarray:
    """w_i = J(y_i - xbar_i); the third component is exactly zero."""
    _check_converged(state, config)
    return tilde_j(state.cloud.positions - state.tess.barycenters)


def energy(state: SimState) -> float:
    """Sum over cells of the integral of c(x, y_i)."""
    return state.tess.transport_cost


def _velocity_at(positions, state, domain, cost, config):
    cloud = state.cloud.with_positions(positions)
    st = solve_state(cloud, domain, cost, config, state.time, state.weights)
    return tilde_j(positions - st.tess.barycenters), st


def step(state: SimState, domain: FluidDomain, cost: CostModel, config: SolverConfig,
         dt: Optional[float] = None) -> SimState:
    """Advance by one step and re-converge the weights at the new positions.

    ``exact-rotation`` rotates each particle about a barycenter frozen over
    the step: it is first predicted at the half rotation, then re-taken at
    the midpoint of the start and end positions. The result is second order
    and nearly symmetric in time. ``exact-rotation-start``
    freezes the barycenter at the start of the step. ``rk4`` re-solves the
    weights at every stage.
    """
    _check_converged(state, config)
    dt = config.time_step if dt is None else dt
    Y = state.cloud.positions
    kind = config.stepper
    if kind == "exact-rotation-start":
        new = rotate_about(Y, state.tess.barycenters, dt)
    elif kind == "exact-rotation":
        # predictor: half rotation about the current barycenter
        probe = rotate_about(Y, state.tess.barycenters, 0.5 * dt)
        w = state.weights
        for _ in range(2):
            mid = solve_state(state.cloud.with_positions(probe), domain, cost, config,
                              state.time, w)
            w = mid.weights
            new = rotate_about(Y, mid.tess.barycenters, dt)
            # corrector: barycenter at the chord midpoint, which makes the step symmetric
            probe = 0.5 * (Y + new)
    elif kind == "rk4":
        k1 = tilde_j(Y - state.tess.barycenters)
        k2, _ = _velocity_at(Y + 0.5 * dt * k1, state, domain, cost, config)
        k3, _ = _velocity_at(Y + 0.5 * dt * k2, state, domain, cost, config)
        k4, _ = _velocity_at(Y + dt * k3, state, domain, cost, config)
        new = Y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        new[:, 2] = Y[:, 2]
    else:
        raise ValueError(f"unknown stepper {kind!r}")
    cloud = state.cloud.with_positions(new)
    out = solve_state(cloud, domain, cost, config, state.time + dt, state.weights,
                      state.step_index + 1)
    out.history = state.history
    return out


def diagnostics(state: SimState, e0: float, previous: Optional[SimState] = None) -> DiagnosticsRecord:
    E = energy(state)
    w = tilde_j(state.cloud.positions - state.tess.barycenters)
    if previous is None:
        inc = 0.0
    else:
        dy = state.cloud.positions - previous.cloud.positions
        inc = math.sqrt(float(np.sum(state.cloud.masses * np.sum(dy**2, axis=1))))
    h = state.tess.column_heights
    return DiagnosticsRecord(
        step=state.step_index,
        time=state.time,
        energy=E,
        drift=(E - e0) / abs(e0) if e0 != 0 else E - e0,
        mass_residual=state.residual,
        mass_total_error=abs(float(np.sum(state.cloud.masses)) - 1.0),
        support_radius=support_radius(state.cloud),
        max_speed=float(np.max(np.linalg.norm(w, axis=1))),
        w2_increment=inc,
        h_min=float(np.min(h)),
        h_max=float(np.max(h)),
        solver_iterations=state.iterations,
    )


def _step_times(horizon, dt):
    n = max(0, math.ceil(horizon / dt - 1e-9))
    return [min((k + 1) * dt, horizon) for k in range(n)]


def run(cloud: DualCloud, domain: FluidDomain, cost: CostModel, config: SolverConfig,
        on_step: Optional[Callable] = None, checks: bool = True):
    """Integrate to ``config.horizon``; returns (records, final state, check reports).

    ``on_step(state, record)`` is called for the initial state and after
    every step. Each weight solve is warm-started from the previous one.
    """
    state = solve_state(cloud, domain, cost, config)
    e0 = energy(state)
    rec = diagnostics(state, e0)
    records = [rec]
    constants = HamiltonianConstants.from_initial(state, domain, cost, config)
    reports = []
    if checks:
        reports.append(hamiltonian_checks(state, constants, config))
    if on_step is not None:
        on_step(state, rec)
    for t_next in _step_times(config.horizon, config.time_step):
        dt = t_next - state.time
        new = step(state, domain, cost, config, dt)
        new.time = t_next
        rec = diagnostics(new, e0, state)
        records.append(rec)
        if checks:
            reports.append(hamiltonian_checks(new, constants, config))
        state = new
        if on_step is not None:
            on_step(state, rec)
    return records, state, reports


@dataclass(frozen=True)
class HamiltonianConstants:
    c0: float
    support_bound: float
    second_moment: float
    radius: float
    horizon_bound: float

    @classmethod
    def from_initial(cls, state: SimState, domain: FluidDomain, cost: CostModel,
                     config: SolverConfig) -> "HamiltonianConstants":
        diam = domain.diameter(cost.base)
        c0 = 1.0 + diam
        S = support_radius(state.cloud) + diam
        tau = config.horizon
        R0 = config.w2_radius if config.w2_radius is not None else S * (1.0 + tau)
        m2 = second_moment(state.cloud)
        return cls(c0, S, m2, R0, horizon_limit(c0, m2, R0))


def _support_growth(c0, m2, tau):
    # a-priori support radius reached by time tau
    expo = (25.0 * c0 * c0 + 1.0) * tau
    if expo > 700:
        return math.inf
    return c0 * tau * math.sqrt(24.0 * (1.0 + math.exp(expo) * (1.0 + m2)))


def horizon_limit(c0, m2, radius):
    """Largest tau whose a-priori support growth stays below ``radius``."""
    if _support_growth(c0, m2, 0.0) >= radius:
        return 0.0
    lo, hi = 0.0, 1.0
    while _support_growth(c0, m2, hi) < radius:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _support_growth(c0, m2, mid) < radius:
            lo = mid
        else:
            hi = mid
    return lo


def hamiltonian_checks(state: SimState, constants: HamiltonianConstants,
                       config: SolverConfig = SolverConfig()) -> dict:
    """Velocity growth and support bounds for the current state.

    Violations are counted, never raised. A ``HorizonWarning`` is emitted
    when the configured horizon exceeds the a-priori bound.
    """
    Y = state.cloud.positions
    w = tilde_j(Y - state.tess.barycenters)
    speed = np.linalg.norm(w, axis=1)
    limit = constants.c0 * (1.0 + np.linalg.norm(Y, axis=1))
    velocity_violations = int(np.sum(speed > limit))
    radius = support_radius(state.cloud)
    support_ok = radius <= constants.support_bound * (1.0 + state.time)
    horizon_ok = config.horizon <= constants.horizon_bound
    if not horizon_ok:
        warnings.warn(
            f"horizon {config.horizon:.6g} exceeds the a-priori bound {constants.horizon_bound:.6g}",
            HorizonWarning, stacklevel=2)
    return {
        "time": state.time,
        "velocity_violations": velocity_violations,
        "max_speed_ratio": float(np.max(speed / limit)),
        "support_radius": radius,
        "support_limit": constants.support_bound * (1.0 + state.time),
        "support_ok": bool(support_ok),
        "horizon_bound": constants.horizon_bound,
        "horizon_ok": bool(horizon_ok),
        "passed": velocity_violations == 0 and bool(support_ok),
    }


def write_particles_csv(path, state: SimState, schema="sgfree.particles/1"):
    Y = state.cloud.positions
    w = tilde_j(Y - state.tess.barycenters)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={schema}\n")
        fh.write("step,particle,y1,y2,y3,w1,w2\n")
        for i in range(len(Y)):
            fh.write(f"{state.step_index},{i},{Y[i, 0]:.17g},{Y[i, 1]:.17g},{Y[i, 2]:.17g},"
                     f"{w[i, 0]:.17g},{w[i, 1]:.17g}\n")


def with_stepper(config: SolverConfig, stepper: str) -> SolverConfig:
    return replace(config, stepper=stepper)
