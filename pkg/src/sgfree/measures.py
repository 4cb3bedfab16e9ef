"""Dual measures, physical domains and cost configuration.

A dual state is a finite cloud of weighted particles in geostrophic
coordinates ``y = (y1, y2, y3)`` with ``y3 = -rho`` (incompressible) or
``y3 = -c_p theta / p_ref**kappa`` (compressible, pressure coordinates).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

FREE_SURFACE = "free-surface"
RIGID_LID = "rigid-lid"
INCOMPRESSIBLE = "incompressible"
COMPRESSIBLE = "compressible"

DEFAULT_DENSITY_BAND = 0.1


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DualCloud:
    """Weighted particles representing the potential density.

    positions: (N, 3) array of dual points; masses: (N,) array.
    """

    positions: np.ndarray
    masses: np.ndarray
    density_band: float = DEFAULT_DENSITY_BAND

    def __post_init__(self):
        pos = _frozen(self.positions).reshape(-1, 3)
        m = _frozen(self.masses).reshape(-1)
        if pos.shape[0] != m.shape[0]:
            raise ValueError(
                f"positions ({pos.shape[0]}) and masses ({m.shape[0]}) differ in length"
            )
        if not 0.0 < self.density_band < 1.0:
            raise ValueError("density_band must lie in (0, 1)")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "masses", m)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def with_positions(self, positions) -> "DualCloud":
        return DualCloud(positions, self.masses, self.density_band)

    def normalized(self) -> "DualCloud":
        """Rescale masses to unit total (ingestion rule)."""
        total = float(np.sum(self.masses))
        if not total > 0.0:
            raise ValueError("total mass must be positive to normalize")
        return DualCloud(self.positions, self.masses / total, self.density_band)

    @classmethod
    def from_csv(cls, path, density_band=DEFAULT_DENSITY_BAND, normalize=True):
        """Read a cloud from CSV with mandatory header ``y1,y2,y3,mass``.

        Lines starting with ``#`` before the header are skipped.
        """
        rows = []
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.reader(lines)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty cloud file") from None
        if header != ["y1", "y2", "y3", "mass"]:
            raise ValueError(f"{path}: header must be y1,y2,y3,mass, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 columns")
            rows.append([float(c) for c in row])
        if not rows:
            raise ValueError(f"{path}: no particles")
        arr = np.array(rows)
        cloud = cls(arr[:, :3], arr[:, 3], density_band)
        if normalize and np.sum(cloud.masses) > 0:
            cloud = cloud.normalized()
        return cloud

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("y1,y2,y3,mass\n")
            for y, m in zip(self.positions, self.masses):
                fh.write(",".join(format(v, ".17g") for v in (*y, m)) + "\n")


@dataclass(frozen=True)
class FluidDomain:
    """Rectangular footprint [0, L1] x [0, L2] with a vertical extent.

    In free-surface mode ``cap`` bounds the admissible surface from above.
    In rigid-lid mode the fluid fills the whole box up to ``lid_height``.
    """

    footprint: tuple = (1.0, 1.0)
    cap: float = 2.0
    grid: tuple = (32, 32)
    mode: str = FREE_SURFACE
    lid_height: Optional[float] = None

    def __post_init__(self):
        L1, L2 = (float(v) for v in self.footprint)
        n1, n2 = (int(v) for v in self.grid)
        object.__setattr__(self, "footprint", (L1, L2))
        object.__setattr__(self, "grid", (n1, n2))
        if not (L1 > 0 and L2 > 0):
            raise ValueError("footprint lengths must be positive")
        if n1 < 1 or n2 < 1:
            raise ValueError("grid counts must be >= 1")
        if self.mode == FREE_SURFACE:
            if not self.cap > 0:
                raise ValueError("cap must be positive")
            if not L1 * L2 * self.cap > 1.0:
                raise ValueError(
                    f"cap too low: L1*L2*H = {L1 * L2 * self.cap:.6g} must exceed unit fluid volume"
                )
        elif self.mode == RIGID_LID:
            lid = self.lid_height if self.lid_height is not None else 1.0 / (L1 * L2)
            object.__setattr__(self, "lid_height", float(lid))
            if abs(L1 * L2 * lid - 1.0) > 1e-9:
                raise ValueError(f"rigid lid: L1*L2*h_lid = {L1 * L2 * lid:.12g} must equal 1")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def free_surface(self) -> bool:
        return self.mode == FREE_SURFACE

    @property
    def area(self) -> float:
        return self.footprint[0] * self.footprint[1]

    @property
    def column_area(self) -> float:
        return self.area / (self.grid[0] * self.grid[1])

    @property
    def spacing(self):
        return (self.footprint[0] / self.grid[0], self.footprint[1] / self.grid[1])

    def column_axes(self):
        """Column midpoint coordinates along x1 and x2."""
        (L1, L2), (n1, n2) = self.footprint, self.grid
        return (L1 * (np.arange(n1) + 0.5) / n1, L2 * (np.arange(n2) + 0.5) / n2)

    def column_centers(self) -> np.ndarray:
        """(n1*n2, 2) column midpoints in row-major order (x1 index slowest)."""
        a1, a2 = self.column_axes()
        X1, X2 = np.meshgrid(a1, a2, indexing="ij")
        return np.column_stack([X1.ravel(), X2.ravel()])

    def vertical_extent(self) -> float:
        return self.cap if self.free_surface else self.lid_height

    def diameter(self, base: float = 0.0) -> float:
        """Diameter of the ambient box [0, L1] x [0, L2] x [base, top]."""
        L1, L2 = self.footprint
        height = self.cap - base if self.free_surface else self.lid_height
        return math.sqrt(L1 * L1 + L2 * L2 + height * height)


@dataclass(frozen=True)
class CostModel:
    """Transport cost ``0.5|x_h - y_h|^2 - zeta(x3) y3``.

    ``zeta(v) = v`` for the incompressible cost; ``zeta(v) = v**kappa`` in
    pressure coordinates. The incompressible model is stored with
    ``kappa = 1`` and ``p_h = 0`` so both share one code path.
    """

    kind: str = INCOMPRESSIBLE
    kappa: float = 1.0
    p_h: float = 0.0
    c_p: float = 1.0
    p_ref: float = 1.0
    f_cor: float = 1.0

    def __post_init__(self):
        if self.kind == INCOMPRESSIBLE:
            object.__setattr__(self, "kappa", 1.0)
            object.__setattr__(self, "p_h", 0.0)
        elif self.kind == COMPRESSIBLE:
            # kappa = 1 is admitted: it reduces exactly to the incompressible cost
            if not self.kappa >= 1.0:
                raise ValueError("kappa must be >= 1")
            if not self.p_h >= 0.0:
                raise ValueError("p_h must be nonnegative")
            if not (self.c_p > 0 and self.p_ref > 0):
                raise ValueError("c_p and p_ref must be positive")
        else:
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if self.f_cor != 1.0:
            raise ValueError("only f_cor = 1 is supported")

    @property
    def compressible(self) -> bool:
        return self.kind == COMPRESSIBLE

    @property
    def base(self) -> float:
        """Lower end of the vertical coordinate (x3 = 0 or p = p_h)."""
        return self.p_h

    def zeta(self, v):
        v = np.asarray(v, dtype=float)
        if self.compressible and np.any(v < 0):
            raise ValueError("negative vertical coordinate in compressible mode")
        return v if self.kappa == 1.0 else np.power(v, self.kappa)

    def zeta_inv(self, z):
        z = np.maximum(z, 0.0)
        return z if self.kappa == 1.0 else np.power(z, 1.0 / self.kappa)

    def zeta_integral(self, a, b):
        """Closed form of the integral of zeta over [a, b]."""
        k1 = self.kappa + 1.0
        return (np.power(b, k1) - np.power(a, k1)) / k1

    def potential_temperature(self, y3):
        """theta recovered from y3 = -c_p theta / p_ref**kappa."""
        return -np.asarray(y3) * self.p_ref**self.kappa / self.c_p


@dataclass(frozen=True)
class SolverConfig:
    mass_tolerance: float = 1e-6
    max_ascent_iterations: int = 200
    backtrack: float = 0.5
    max_backtracks: int = 60
    regularization: float = 1e-9
    time_step: float = 0.01
    horizon: float = 1.0
    stepper: str = "exact-rotation"
    output_cadence: int = 1
    w2_radius: Optional[float] = None

    def __post_init__(self):
        for name in ("mass_tolerance", "regularization", "time_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack must lie in (0, 1)")
        if self.max_ascent_iterations < 1 or self.max_backtracks < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if self.horizon > 0 and self.time_step > self.horizon:
            raise ValueError("time_step must not exceed horizon")
        if self.stepper not in ("exact-rotation", "exact-rotation-start", "rk4"):
            raise ValueError(f"unknown stepper {self.stepper!r}")
        if self.output_cadence < 1:
            raise ValueError("output_cadence must be >= 1")
        if self.w2_radius is not None and not self.w2_radius > 0:
            raise ValueError("w2_radius must be positive")


@dataclass
class ValidationReport:
    checks: dict = field(default_factory=dict)

    def add(self, name, passed, detail=""):
        self.checks[name] = (bool(passed), detail)

    @property
    def passed(self) -> bool:
        return all(ok for ok, _ in self.checks.values())

    def failures(self):
        return [name for name, (ok, _) in self.checks.items() if not ok]

    def __str__(self):
        return "\n".join(
            f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else "")
            for name, (ok, detail) in self.checks.items()
        )


def validate_cloud(cloud: DualCloud, cost: CostModel = CostModel()) -> ValidationReport:
    """Check the cloud invariants; never raises."""
    rep = ValidationReport()
    rep.add("nonempty", cloud.n > 0, f"{cloud.n} particles")
    finite = bool(np.all(np.isfinite(cloud.positions)) and np.all(np.isfinite(cloud.masses)))
    rep.add("finite", finite)
    total = float(np.sum(cloud.masses)) if cloud.n else 0.0
    rep.add("mass_sum", abs(total - 1.0) <= 1e-12, f"mass sum {total:.17g}")
    rep.add("positive_masses", bool(np.all(cloud.masses > 0)) if cloud.n else False)
    y3 = cloud.positions[:, 2]
    if cost.compressible:
        rep.add("negative_y3", bool(np.all(y3 < 0)), f"max y3 {y3.max() if cloud.n else float('nan'):.6g}")
    else:
        d = cloud.density_band
        inside = bool(np.all((y3 >= -1.0 / d) & (y3 <= -d))) if cloud.n else False
        detail = f"y3 range [{y3.min():.6g}, {y3.max():.6g}] vs [{-1 / d:.6g}, {-d:.6g}]" if cloud.n else ""
        rep.add("density_band", inside, detail)
    return rep


def support_radius(cloud: DualCloud) -> float:
    """Largest Euclidean norm among the particle positions."""
    if cloud.n == 0:
        raise ValueError("empty ensemble")
    return float(np.max(np.linalg.norm(cloud.positions, axis=1)))


def second_moment(cloud: DualCloud) -> float:
    return float(np.sum(cloud.masses * np.sum(cloud.positions**2, axis=1)))


# -- analytic generators -----------------------------------------------------

def _equal_masses(n):
    return np.full(n, 1.0 / n)


def uniform_block(n, footprint=(1.0, 1.0), y3_range=(-1.5, -0.5), seed=0,
                  density_band=DEFAULT_DENSITY_BAND):
    """Particles uniform in the footprint with y3 uniform in ``y3_range``."""
    rng = np.random.default_rng(seed)
    L1, L2 = footprint
    pos = np.column_stack([
        rng.uniform(0.1 * L1, 0.9 * L1, n),
        rng.uniform(0.1 * L2, 0.9 * L2, n),
        rng.uniform(*y3_range, n),
    ])
    return DualCloud(pos, _equal_masses(n), density_band)


def two_blob(n, footprint=(1.0, 1.0), spread=0.08, seed=0, density_band=DEFAULT_DENSITY_BAND):
    """Two clusters: a light blob and a dense blob at opposite quarter points."""
    rng = np.random.default_rng(seed)
    L1, L2 = footprint
    k = n // 2
    centers = np.array([[0.3 * L1, 0.4 * L2, -0.8], [0.7 * L1, 0.6 * L2, -1.4]])
    label = np.r_[np.zeros(k, int), np.ones(n - k, int)]
    pos = centers[label] + rng.normal(0.0, spread, (n, 3)) * np.array([L1, L2, 1.0])
    return DualCloud(pos, _equal_masses(n), density_band)


def sheared_band(n, footprint=(1.0, 1.0), shear=0.3, seed=0, density_band=DEFAULT_DENSITY_BAND):
    """Particles along x1 whose y2 offset grows with density (a frontal zone)."""
    rng = np.random.default_rng(seed)
    L1, L2 = footprint
    y3 = np.linspace(-0.6, -1.6, n) + rng.uniform(-0.02, 0.02, n)
    y1 = L1 * (0.15 + 0.7 * rng.uniform(size=n))
    y2 = 0.5 * L2 + shear * (y3 + 1.1)
    return DualCloud(np.column_stack([y1, y2, y3]), _equal_masses(n), density_band)


GENERATORS = {
    "uniform-block": uniform_block,
    "two-blob": two_blob,
    "sheared-band": sheared_band,
}


def generate_cloud(name, n, footprint=(1.0, 1.0), seed=0, density_band=DEFAULT_DENSITY_BAND):
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown generator {name!r}") from None
    return gen(n, footprint=footprint, seed=seed, density_band=density_band)


def load_cloud(path: Path | str, density_band=DEFAULT_DENSITY_BAND) -> DualCloud:
    return DualCloud.from_csv(path, density_band=density_band)
