import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sgfree import RIGID_LID, CostModel, DualCloud, FluidDomain, SolverConfig
from sgfree.geometry import cost as cost_fn
from sgfree.laguerre import dual_functional, dual_gradient, solve_weights
from sgfree.oracle import (
    DiscreteMeasurePair, exact_w2, finite_difference_gradient, lp_transport, voxelize, weight_scan,
)

from conftest import random_cloud


def pair(X, a, Y, b):
    return DiscreteMeasurePair(np.asarray(X, float), np.asarray(a, float),
                               np.asarray(Y, float), np.asarray(b, float))


def random_pair(rng, M, N, dim=3):
    a = rng.random(M) + 0.1
    b = rng.random(N) + 0.1
    return pair(rng.normal(size=(M, dim)), a / a.sum(), rng.normal(size=(N, dim)), b / b.sum())


def test_single_atoms():
    p = pair([[0.1, 0.2, 0.3]], [1.0], [[0.5, 0.0, -1.0]], [1.0])
    res = lp_transport(p, CostModel())
    assert res.plan.tolist() == [[1.0]]
    assert res.cost == pytest.approx(float(cost_fn(p.source_points[0], p.target_points[0], CostModel())))


def test_diagonal_assignment():
    p = pair([[0, 0, 0], [1, 0, 0]], [0.5, 0.5], [[0, 0, -1], [1, 0, -1]], [0.5, 0.5])
    res = lp_transport(p, CostModel())
    assert res.cost == pytest.approx(0.0, abs=1e-10)
    np.testing.assert_allclose(res.plan, np.diag([0.5, 0.5]), atol=1e-10)
    C = cost_fn(p.source_points[:, None], p.target_points[None], CostModel())
    assert 0.5 * (C[0, 1] + C[1, 0]) == pytest.approx(0.5)


def test_masses_must_sum_to_one():
    with pytest.raises(ValueError):
        pair([[0, 0, 0]], [0.9], [[0, 0, 0]], [1.0])
    with pytest.raises(ValueError):
        pair([[0, 0, 0], [1, 1, 1]], [1.5, -0.5], [[0, 0, 0]], [1.0])


def test_size_cap():
    big = pair(np.zeros((2, 3)), [0.5, 0.5], np.zeros((65, 3)), np.full(65, 1 / 65))
    with pytest.raises(ValueError):
        lp_transport(big)


@pytest.mark.parametrize("seed", range(5))
def test_marginals(seed):
    rng = np.random.default_rng(seed)
    res = lp_transport(random_pair(rng, 40, 7))
    assert res.marginal_error <= 1e-10
    assert np.all(res.plan >= 0)


@given(st.integers(0, 10_000))
def test_relabel_invariance(seed):
    rng = np.random.default_rng(seed)
    p = random_pair(rng, 12, 5)
    ps, pt = rng.permutation(12), rng.permutation(5)
    q = pair(p.source_points[ps], p.source_masses[ps], p.target_points[pt], p.target_masses[pt])
    assert lp_transport(q).cost == pytest.approx(lp_transport(p).cost, abs=1e-9)


@given(st.integers(0, 10_000))
def test_certificate_property(seed):
    rng = np.random.default_rng(seed)
    p = random_pair(rng, 10, 4)
    C = np.sum((p.source_points[:, None] - p.target_points[None]) ** 2, axis=2)
    # the independent coupling and a northwest-corner plan are both feasible
    product = p.source_masses[:, None] * p.target_masses[None]
    nw = np.zeros_like(C)
    a, b = p.source_masses.copy(), p.target_masses.copy()
    i = j = 0
    while i < len(a) and j < len(b):
        q = min(a[i], b[j])
        nw[i, j] = q
        a[i] -= q
        b[j] -= q
        if a[i] <= 1e-15:
            i += 1
        else:
            j += 1
    best = lp_transport(p).cost
    assert best <= np.sum(product * C) + 1e-9
    assert best <= np.sum(nw * C) + 1e-9


def test_voxel_cost_matches_solver_free_surface(rng):
    cloud = random_cloud(rng, 3)
    dom = FluidDomain(grid=(16, 16), cap=3.0)
    w, t, _ = solve_weights(cloud, dom, CostModel(), SolverConfig(mass_tolerance=1e-12))
    pts, m = voxelize(dom, CostModel(), 16, t.column_heights)
    lp = lp_transport(DiscreteMeasurePair.from_cloud(pts, m, cloud), CostModel())
    assert abs(lp.cost - t.transport_cost) / abs(lp.cost) <= 0.02


def test_voxelize_rigid_box():
    dom = FluidDomain(mode=RIGID_LID, grid=(4, 4))
    pts, m = voxelize(dom, CostModel(), 4)
    assert pts.shape == (64, 3)
    np.testing.assert_allclose(m, 1 / 64)
    np.testing.assert_allclose(np.sort(np.unique(pts[:, 2])), [0.125, 0.375, 0.625, 0.875])
    with pytest.raises(ValueError):
        voxelize(FluidDomain(grid=(4, 4)), CostModel(), 4)


def test_w2_point_masses():
    a, b = np.array([0.1, 0.2, 0.3]), np.array([1.0, -1.0, 2.0])
    assert exact_w2(pair([a], [1.0], [b], [1.0])) == pytest.approx(np.linalg.norm(a - b), rel=1e-14)


def test_w2_identical_measures(rng):
    X = rng.normal(size=(6, 3))
    m = np.full(6, 1 / 6)
    assert exact_w2(pair(X, m, X, m)) == pytest.approx(0.0, abs=1e-6)


def test_w2_two_atom_enumeration():
    X = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    Y = np.array([[0.9, 0.2, 0], [0.1, -0.3, 0]])
    m = np.array([0.5, 0.5])
    C = np.sum((X[:, None] - Y[None]) ** 2, axis=2)
    # plans [[t, 1/2-t], [1/2-t, t]] for t in [0, 1/2]; the cost is linear in t
    family = [t * (C[0, 0] + C[1, 1]) + (0.5 - t) * (C[0, 1] + C[1, 0]) for t in np.linspace(0, 0.5, 101)]
    assert exact_w2(pair(X, m, Y, m)) ** 2 == pytest.approx(min(family), abs=1e-9)


@given(st.integers(0, 10_000))
def test_w2_triangle(seed):
    rng = np.random.default_rng(seed)
    mus = []
    for _ in range(3):
        n = int(rng.integers(1, 6))
        w = rng.random(n) + 0.1
        mus.append((rng.normal(size=(n, 3)), w / w.sum()))
    d = lambda p, q: exact_w2(pair(p[0], p[1], q[0], q[1]))  # noqa: E731
    assert d(mus[0], mus[2]) <= d(mus[0], mus[1]) + d(mus[1], mus[2]) + 1e-9


def test_fd_quadratic():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = np.array([0.3, -0.7])
    g = finite_difference_gradient(lambda v: 0.5 * v @ A @ v + v.sum(), x, 1e-3)
    np.testing.assert_allclose(g, A @ x + 1, atol=1e-10)


def test_fd_constant():
    assert np.array_equal(finite_difference_gradient(lambda v: 4.0, np.ones(3)), np.zeros(3))
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda v: 0.0, np.ones(2), 0.0)


def test_fd_matches_dual_gradient(rng):
    cloud = random_cloud(rng, 4)
    dom = FluidDomain(grid=(24, 24), cap=3.0)
    R = rng.normal(-0.8, 0.2, 4)
    fd = finite_difference_gradient(lambda r: dual_functional(cloud, dom, CostModel(), r), R, 1e-6)
    g = dual_gradient(cloud, dom, CostModel(), R)
    assert np.max(np.abs(fd - g)) <= 1e-6 * np.max(np.abs(g))


def test_scan_brackets_single_root():
    cloud = DualCloud(np.array([[0.0, 0.0, -1.0]]), np.array([1.0]))
    dom = FluidDomain(grid=(16, 16))
    scan = weight_scan(cloud, dom, CostModel(), [-1.0], 0.8, points=33)
    w, _, _ = solve_weights(cloud, dom, CostModel(), SolverConfig(mass_tolerance=1e-12))
    assert abs(scan.weights[0] - w.weights[0]) <= scan.spacing
    g = lambda r: dual_gradient(cloud, dom, CostModel(), [r])[0]  # noqa: E731
    assert g(scan.weights[0] - scan.spacing) * g(scan.weights[0] + scan.spacing) < 0


def test_scan_symmetric_pair():
    # mirrored across the diagonal, so |y_h| agrees and the weights must too
    cloud = DualCloud(np.array([[0.5, 0.2, -1.0], [0.2, 0.5, -1.0]]), np.array([0.5, 0.5]))
    scan = weight_scan(cloud, FluidDomain(grid=(16, 16), cap=3.0), CostModel(), [-0.8, -0.8], 0.3,
                       points=21, passes=2)
    assert abs(scan.weights[0] - scan.weights[1]) <= scan.spacing


def test_scan_refinement_halves_bracket():
    cloud = DualCloud(np.array([[0.0, 0.0, -1.0]]), np.array([1.0]))
    dom = FluidDomain(grid=(8, 8))
    widths = [weight_scan(cloud, dom, CostModel(), [-1.0], 0.8, points=9, passes=k) for k in (1, 2, 3)]
    spans = [float(s.upper[0] - s.lower[0]) for s in widths]
    assert spans[1] == pytest.approx(0.5 * spans[0]) and spans[2] == pytest.approx(0.5 * spans[1])
    assert widths[2].value >= widths[0].value


def test_scan_rigid_gauge():
    cloud = DualCloud(np.array([[0.5, 0.25, -1.0], [0.5, 0.75, -1.2]]), np.array([0.5, 0.5]))
    scan = weight_scan(cloud, FluidDomain(mode=RIGID_LID, grid=(8, 8)), CostModel(), [0.0, 0.0], 0.5,
                       points=11)
    assert scan.weights[0] == -scan.weights[1]


def test_scan_rejects_three_particles(rng):
    with pytest.raises(ValueError):
        weight_scan(random_cloud(rng, 3), FluidDomain(grid=(4, 4)), CostModel(), np.zeros(3), 0.1)


def test_lp_callable_cost():
    p = pair([[0, 0, 0], [1, 0, 0]], [0.5, 0.5], [[0, 0, 0], [1, 0, 0]], [0.5, 0.5])
    res = lp_transport(p, lambda X, Y: np.abs(X[:, None, 0] - Y[None, :, 0]))
    assert res.cost == pytest.approx(0.0, abs=1e-10)
    assert list(itertools.chain(*np.round(res.plan, 10))) == [0.5, 0.0, 0.0, 0.5]
