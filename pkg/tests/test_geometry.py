import numpy as np
import pytest

from safecut.constraints import AffineStateConstraint
from safecut.errors import (
    DegenerateCorrection,
    DimensionError,
    EmptyBox,
    InfeasiblePolytope,
    UnboundedPolytope,
)
from safecut.geometry import (
    Cut,
    Ellipsoid,
    Polytope,
    _MveNewton,
    apply_cut,
    build_cut,
    contains,
    initial_box,
    mve,
    mve_containment_residual,
    polygon_area_2d,
    polygon_vertices_2d,
)
from safecut.trajopt import SolverOptions, rollout, solve_barrier_mpc

from conftest import integrator_affine_problem


def with_row(poly: Polytope, normal, offset) -> Polytope:
    return Polytope(np.vstack([poly.normals, normal]), np.append(poly.offsets, offset))


# -- boxes and membership ----------------------------------------------------


def test_initial_box_paper_bounds():
    box = initial_box([-6.0, -6.0], [2.0, 2.0])
    assert box.num_rows == 4
    assert contains(box, [-2.0, -2.0])
    assert not contains(box, [3.0, 0.0])


def test_initial_box_interval():
    box = initial_box([0.0], [1.0])
    assert contains(box, [0.5]) and not contains(box, [1.5])


def test_initial_box_empty_raises():
    with pytest.raises(EmptyBox):
        initial_box([1.0], [0.0])


def test_contains_slack_semantics():
    box = initial_box([-6.0, -6.0], [2.0, 2.0])
    assert contains(box, [2.0 + 5e-10, 0.0], slack=1e-9)
    assert not contains(box, [2.0 + 5e-10, 0.0], slack=0.0)
    with pytest.raises(DimensionError):
        contains(box, [0.0, 0.0, 0.0])


# -- cut construction --------------------------------------------------------


def test_build_cut_zero_cost_case():
    # with a flat task cost the primary row reduces to the feature gradients
    problem = integrator_affine_problem([0.0, 0.0], gamma=0.25)
    from conftest import zero_cost

    cost = zero_cost(1, 2, 2)
    plan = rollout(problem.dynamics, np.zeros(2), np.array([[0.3, -0.1]]))
    a = np.array([1.0, -1.0])
    cut = build_cut(plan, a, 0.25, problem.constraint, cost)
    # features are x_1 = u_0, so dphi/du = I and the row is gamma * a
    assert np.allclose(cut.primary_normal, 0.25 * a, atol=1e-14)
    assert cut.primary_offset == pytest.approx(0.0, abs=1e-14)
    assert np.allclose(cut.feasibility_normal, [0.3, -0.1])
    assert cut.feasibility_offset == pytest.approx(3.0)


def test_build_cut_integrator_symbolic_oracle():
    # J = ||u0||^2, g = -3 + theta . u0: at the solved plan,
    # h = -(2 u*.a) u* + gamma a and b = -6 u*.a
    theta = np.array([0.6, 1.0])
    problem = integrator_affine_problem(theta, gamma=0.4)
    plan = solve_barrier_mpc(
        problem, np.zeros(2), np.array([0.1, 0.1]), SolverOptions(gradient_tolerance=1e-12)
    )
    u_star = plan.controls[0]
    for a in (np.array([1.0, 0.0]), np.array([-1.0, 1.0]), np.array([0.5, 2.0])):
        cut = build_cut(plan, a, problem.gamma, problem.constraint, problem.cost)
        coeff = 2.0 * float(u_star @ a)
        assert np.allclose(cut.primary_normal, -coeff * u_star + problem.gamma * a, atol=1e-12)
        assert cut.primary_offset == pytest.approx(-3.0 * coeff, abs=1e-12)
        # stationarity puts theta itself on the cut boundary
        assert abs(theta @ cut.primary_normal - cut.primary_offset) <= 1e-6
        assert float(theta @ cut.feasibility_normal) < cut.feasibility_offset


def test_build_cut_rejects_zero_correction():
    problem = integrator_affine_problem([0.6, 1.0])
    plan = rollout(problem.dynamics, np.zeros(2), np.array([[0.1, 0.1]]))
    with pytest.raises(DegenerateCorrection):
        build_cut(plan, np.zeros(2), problem.gamma, problem.constraint, problem.cost)


def test_apply_cut_redundant_keeps_center():
    box = initial_box([-1.0, -1.0], [1.0, 1.0])
    cut = Cut(
        primary_normal=np.array([1.0, 0.0]),
        primary_offset=5.0,
        feasibility_normal=np.array([0.0, 1.0]),
        feasibility_offset=7.0,
    )
    grown = apply_cut(box, cut)
    assert grown.num_rows == 6
    c0 = mve(box).center
    c1 = mve(grown).center
    assert np.max(np.abs(c1 - c0)) <= 1e-6


def test_apply_cut_halves_unit_square():
    box = initial_box([-0.5, -0.5], [0.5, 0.5])
    cut = Cut(np.array([1.0, 0.0]), 0.0, np.array([0.0, 1.0]), 10.0)
    half = apply_cut(box, cut)
    assert polygon_area_2d(half) / polygon_area_2d(box) == pytest.approx(0.5, abs=0.0)


def test_apply_cut_monotone_nesting():
    rng = np.random.default_rng(2)
    box = initial_box([-2.0, -2.0], [2.0, 2.0])
    poly = box
    for _ in range(5):
        n = rng.normal(size=2)
        cut = Cut(n, float(n @ rng.uniform(-1, 1, 2)), rng.normal(size=2), 5.0)
        new = apply_cut(poly, cut)
        pts = rng.uniform(-2, 2, size=(300, 2))
        inside_new = np.all(pts @ new.normals.T <= new.offsets, axis=1)
        inside_old = np.all(pts @ poly.normals.T <= poly.offsets, axis=1)
        assert not np.any(inside_new & ~inside_old)
        poly = new


def test_opposing_cuts_empty_downstream():
    box = initial_box([-0.5, -0.5], [0.5, 0.5])
    poly = with_row(with_row(box, [1.0, 0.0], -1.0), [-1.0, 0.0], -1.0)
    with pytest.raises(InfeasiblePolytope):
        mve(poly)


# -- 2D area oracle ----------------------------------------------------------


def test_area_unit_square():
    assert polygon_area_2d(initial_box([0.0, 0.0], [1.0, 1.0])) == pytest.approx(1.0, abs=0.0)


def test_area_paper_box():
    assert polygon_area_2d(initial_box([-6.0, -6.0], [2.0, 2.0])) == pytest.approx(64.0, abs=0.0)


def test_area_diagonal_cut():
    poly = with_row(initial_box([0.0, 0.0], [1.0, 1.0]), [1.0, 1.0], 1.0)
    assert polygon_area_2d(poly) == pytest.approx(0.5, abs=1e-12)


def test_area_empty_is_zero():
    poly = with_row(initial_box([0.0, 0.0], [1.0, 1.0]), [1.0, 0.0], -1.0)
    assert polygon_area_2d(poly) == 0.0


def test_area_matches_monte_carlo():
    rng = np.random.default_rng(11)
    poly = initial_box([-3.0, -1.0], [2.0, 4.0])
    for _ in range(6):
        n = rng.normal(size=2)
        n /= np.linalg.norm(n)
        poly = with_row(poly, n, float(n @ rng.uniform(-1, 2, 2)))
        area = polygon_area_2d(poly)
        if area == 0.0:
            break
        verts = np.array(polygon_vertices_2d(poly))
        lo, hi = verts.min(0) - 0.1, verts.max(0) + 0.1
        pts = rng.uniform(lo, hi, size=(120_000, 2))
        frac = np.all(pts @ poly.normals.T <= poly.offsets, axis=1).mean()
        mc = frac * np.prod(hi - lo)
        assert area == pytest.approx(mc, rel=0.05)


def test_vertices_unbounded_raises():
    poly = Polytope(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0, 1.0]))
    with pytest.raises(UnboundedPolytope):
        polygon_vertices_2d(poly)


def test_area_requires_dim_two():
    with pytest.raises(DimensionError):
        polygon_area_2d(initial_box([0.0], [1.0]))


# -- maximum-volume ellipsoid -------------------------------------------------


def test_mve_axis_box_analytic():
    box = initial_box([-6.0, -6.0], [2.0, 2.0])
    ell = mve(box)
    assert np.max(np.abs(ell.center - [-2.0, -2.0])) <= 1e-5
    assert np.max(np.abs(ell.shape - 4.0 * np.eye(2))) <= 1e-4
    assert abs(ell.log_det - np.log(16.0)) <= 1e-4
    assert mve_containment_residual(box, ell) <= 1e-7


def test_mve_triangle_center_is_centroid():
    tri = Polytope(np.array([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]]), np.array([0.0, 0.0, 1.0]))
    ell = mve(tri)
    assert np.max(np.abs(ell.center - 1.0 / 3.0)) <= 1e-5
    # the maximal inscribed ellipse of a triangle has area pi/(6 sqrt 3) here
    assert abs(ell.log_det - np.log(1.0 / (6.0 * np.sqrt(3.0)))) <= 1e-4
    assert mve_containment_residual(tri, ell) <= 1e-7


def test_mve_polygonal_disc():
    ang = np.linspace(0.0, 2.0 * np.pi, 64, endpoint=False)
    poly = Polytope(np.column_stack([np.cos(ang), np.sin(ang)]), np.ones(64))
    ell = mve(poly)
    assert np.max(np.abs(ell.center)) <= 2e-2
    assert np.max(np.abs(ell.shape - np.eye(2))) <= 2e-2
    assert mve_containment_residual(poly, ell) <= 1e-7


def test_mve_matches_brute_force_on_triangle():
    # coarse rejection-sampled volume maximization as an independent oracle
    tri = Polytope(np.array([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]]), np.array([0.0, 0.0, 1.0]))
    rng = np.random.default_rng(0)
    best = (-np.inf, None)
    for _ in range(4000):
        d = rng.uniform(0.05, 0.6, 2)
        L = np.array([[rng.uniform(0.05, 0.6), 0.0], [rng.normal(0, 0.2), rng.uniform(0.05, 0.6)]])
        H = L @ L.T
        resid = np.linalg.norm(tri.normals @ H, axis=1) + tri.normals @ d - tri.offsets
        if np.all(resid <= 0):
            logdet = np.linalg.slogdet(H)[1]
            if logdet > best[0]:
                best = (logdet, d)
    ell = mve(tri)
    assert best[0] <= ell.log_det + 1e-9
    assert np.max(np.abs(best[1] - ell.center)) <= 0.15


def test_mve_scale_equivariance():
    rng = np.random.default_rng(3)
    box = initial_box([-1.0, -2.0], [3.0, 1.0])
    poly = box
    for _ in range(3):
        n = rng.normal(size=2)
        n /= np.linalg.norm(n)
        poly = with_row(poly, n, float(n @ [0.5, -0.5]) + 0.5)
    ell = mve(poly)
    for scale in (0.5, 2.0, 7.0):
        scaled = Polytope(poly.normals, poly.offsets * scale)
        ell_s = mve(scaled)
        assert np.max(np.abs(ell_s.center - scale * ell.center)) <= 1e-6 * max(1.0, scale)
        assert abs(ell_s.log_det - (ell.log_det + 2.0 * np.log(scale))) <= 1e-6


def test_mve_unbounded_raises():
    slab = Polytope(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]), np.array([1.0, 1.0, 1.0]))
    with pytest.raises(UnboundedPolytope):
        mve(slab)


def test_mve_warm_start_agrees_with_fresh():
    box = initial_box([-6.0, -6.0], [2.0, 2.0])
    fresh = mve(box)
    poly = with_row(box, np.array([1.0, 0.0]), -1.0)
    cold = mve(poly)
    warm = mve(poly, warm=fresh)
    assert np.max(np.abs(cold.center - warm.center)) <= 1e-7
    assert abs(cold.log_det - warm.log_det) <= 1e-7


def test_mve_high_dimensional_box():
    r = 8
    box = initial_box(np.full(r, -1.5), np.full(r, 2.5))
    ell = mve(box)
    assert np.max(np.abs(ell.center - 0.5)) <= 1e-6
    assert np.max(np.abs(ell.shape - 2.0 * np.eye(r))) <= 1e-5


def test_newton_derivatives_match_finite_differences():
    # analytic gradient/Hessian of the barrier against central differences
    rng = np.random.default_rng(9)
    A = rng.normal(size=(7, 3))
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    b = rng.uniform(1.0, 2.0, 7)
    solver = _MveNewton(A, b)
    H = np.eye(3) * 0.3
    d = np.zeros(3)
    t = 3.7
    grad, hess, L, s = solver.grad_hess(H, d, t)
    z0 = np.concatenate([H[solver.P, solver.Q], d])

    def value_at(z):
        Hm = np.zeros((3, 3))
        Hm[solver.P, solver.Q] = z[: solver.dim_h]
        Hm[solver.Q, solver.P] = z[: solver.dim_h]
        _, _, sv = solver.slacks(Hm, z[solver.dim_h :])
        return float(-t * np.linalg.slogdet(Hm)[1] - np.log(sv).sum())

    h = 1e-6
    fd_grad = np.zeros_like(z0)
    for i in range(z0.size):
        zp, zm = z0.copy(), z0.copy()
        zp[i] += h
        zm[i] -= h
        fd_grad[i] = (value_at(zp) - value_at(zm)) / (2 * h)
    assert np.max(np.abs(grad - fd_grad)) / max(1.0, np.max(np.abs(fd_grad))) <= 1e-5
    fd_hess = np.zeros_like(hess)
    for i in range(z0.size):
        zp, zm = z0.copy(), z0.copy()
        zp[i] += h
        zm[i] -= h
        gp = np.zeros_like(z0)
        gm = np.zeros_like(z0)
        for j in range(z0.size):
            zpp, zpm = zp.copy(), zp.copy()
            zpp[j] += h
            zpm[j] -= h
            gp[j] = (value_at(zpp) - value_at(zpm)) / (2 * h)
            zmp, zmm = zm.copy(), zm.copy()
            zmp[j] += h
            zmm[j] -= h
            gm[j] = (value_at(zmp) - value_at(zmm)) / (2 * h)
        fd_hess[i] = (gp - gm) / (2 * h)
    assert np.max(np.abs(hess - fd_hess)) / max(1.0, np.max(np.abs(fd_hess))) <= 1e-3


def test_ellipsoid_log_det():
    ell = Ellipsoid(shape=np.diag([2.0, 3.0]), center=np.zeros(2))
    assert ell.log_det == pytest.approx(np.log(6.0))


def test_polytope_row_round_trip():
    box = initial_box([-1.0, 0.5], [2.0, 3.5])
    again = Polytope.from_rows(box.to_rows())
    assert np.array_equal(again.normals, box.normals)
    assert np.array_equal(again.offsets, box.offsets)
