import numpy as np
import pytest

from safecut.constraints import (
    AffineStateConstraint,
    RbfAccumulatedConstraint,
    decaying_weight_schedule,
    evaluate_g,
    feature_values_and_gradients,
)
from safecut.errors import DimensionError
from safecut.trajopt import rollout

from conftest import make_integrator


def integrator_affine():
    dyn = make_integrator(2)
    return dyn, AffineStateConstraint(bound=3.0, state_index=1).build(dyn)


def small_rbf(dynamics, horizon):
    centers = np.column_stack([np.full(4, 5.0), np.linspace(0.0, 10.0, 4)])
    return RbfAccumulatedConstraint(centers=centers, width=0.45).build(dynamics, horizon)


def test_affine_value_at_origin_is_negative_bound():
    dyn, constraint = integrator_affine()
    traj = rollout(dyn, [0.0, 0.0], np.zeros((1, 2)))
    assert evaluate_g(constraint, np.array([0.6, 1.0]), traj) == pytest.approx(-3.0)


def test_affine_value_on_boundary():
    dyn, constraint = integrator_affine()
    traj = rollout(dyn, [0.0, 0.0], np.array([[5.0, 0.0]]))
    assert evaluate_g(constraint, np.array([0.6, 1.0]), traj) == pytest.approx(0.0, abs=1e-14)


def test_rbf_value_with_zero_weights(planar):
    traj = rollout(planar.dynamics, [2.0, 3.0, 0.5, 0.0], np.zeros((planar.horizon, 2)))
    assert evaluate_g(planar.constraint, np.zeros(planar.constraint.dim), traj) == pytest.approx(-1.0)


def test_dimension_mismatch_raises():
    dyn, constraint = integrator_affine()
    traj = rollout(dyn, [0.0, 0.0], np.zeros((1, 2)))
    with pytest.raises(DimensionError):
        evaluate_g(constraint, np.zeros(3), traj)


@pytest.mark.parametrize("family", ["affine", "rbf"])
def test_linearity_in_theta(family, planar):
    rng = np.random.default_rng(4)
    if family == "affine":
        dyn, constraint = integrator_affine()
        traj = rollout(dyn, rng.normal(size=2), rng.normal(size=(1, 2)))
    else:
        constraint = planar.constraint
        traj = rollout(planar.dynamics, [1.0, 4.0, 2.0, 0.3], rng.normal(size=(planar.horizon, 2)))
    t1 = rng.normal(size=constraint.dim)
    t2 = rng.normal(size=constraint.dim)
    for a in (0.0, 0.25, 0.5, 1.0):
        mixed = evaluate_g(constraint, a * t1 + (1 - a) * t2, traj)
        split = a * evaluate_g(constraint, t1, traj) + (1 - a) * evaluate_g(constraint, t2, traj)
        assert abs(mixed - split) <= 1e-12


def test_theta_slope_equals_features(planar):
    # two-point secant of theta -> g equals the feature vector
    rng = np.random.default_rng(5)
    traj = rollout(planar.dynamics, [1.0, 5.0, 1.5, 0.0], rng.normal(size=(planar.horizon, 2)))
    constraint = planar.constraint
    phi = constraint.features(traj)
    t0 = rng.normal(size=constraint.dim)
    for k in range(constraint.dim):
        e = np.zeros(constraint.dim)
        e[k] = 1.0
        secant = evaluate_g(constraint, t0 + e, traj) - evaluate_g(constraint, t0, traj)
        assert secant == pytest.approx(phi[k], abs=1e-12)


def test_affine_control_gradients_are_identity():
    dyn, constraint = integrator_affine()
    traj = rollout(dyn, [0.0, 0.0], np.array([[0.7, -0.2]]))
    phi0, grad_phi0, phi, dphi = feature_values_and_gradients(constraint, traj)
    assert phi0 == pytest.approx(-3.0)
    assert np.allclose(grad_phi0, 0.0)
    assert np.allclose(phi, [0.7, -0.2])
    assert np.allclose(dphi, np.eye(2))


def test_rbf_far_from_centers_vanishes(planar):
    # park the robot far from the gate line: bumps and gradients ~ 0
    state = np.array([0.2, 0.2, 0.0, 0.0])
    traj = rollout(planar.dynamics, state, np.zeros((planar.horizon, 2)))
    phi0, grad_phi0, phi, dphi = feature_values_and_gradients(planar.constraint, traj)
    assert np.max(np.abs(phi)) <= 0.1  # tails only at ~5 units from the line
    centers_far = np.column_stack([np.full(3, 50.0), np.linspace(0, 10, 3)])
    far = RbfAccumulatedConstraint(centers=centers_far, width=0.45).build(planar.dynamics, planar.horizon)
    _, _, phi_far, dphi_far = feature_values_and_gradients(far, traj)
    assert np.max(np.abs(phi_far)) <= 1e-8
    assert np.max(np.abs(dphi_far)) <= 1e-8


@pytest.mark.parametrize("family", ["affine_pendulum", "rbf_planar"])
def test_feature_gradients_match_finite_differences(family, pendulum, planar):
    rng = np.random.default_rng(0)
    if family == "affine_pendulum":
        env, m = pendulum, 1
        x0 = np.array([0.4, 0.1])
    else:
        env, m = planar, 2
        x0 = np.array([3.5, 4.0, 1.0, 0.2])
    constraint = env.constraint
    u = rng.normal(0.0, 0.5, env.horizon * m)
    traj = rollout(env.dynamics, x0, u.reshape(-1, m))
    _, grad_phi0, _, dphi = feature_values_and_gradients(constraint, traj)
    h = 1e-6
    for k in range(constraint.dim):
        fd = np.zeros(u.size)
        for i in range(u.size):
            up, um = u.copy(), u.copy()
            up[i] += h
            um[i] -= h
            fp = constraint.features(rollout(env.dynamics, x0, up.reshape(-1, m)))[k]
            fm = constraint.features(rollout(env.dynamics, x0, um.reshape(-1, m)))[k]
            fd[i] = (fp - fm) / (2 * h)
        denom = max(1e-8, np.max(np.abs(fd)))
        assert np.max(np.abs(dphi[k] - fd)) / denom <= 1e-4


def test_decaying_weight_schedule_values():
    beta = decaying_weight_schedule(20)
    assert np.allclose(beta[:5], 0.0)
    assert beta[5] == pytest.approx(1.0)
    assert beta[7] == pytest.approx(0.81)
    assert beta.shape == (21,)


def test_pointwise_affine_matches_direct():
    dyn, constraint = integrator_affine()
    theta = np.array([0.6, 1.0])
    assert constraint.pointwise(theta, np.array([5.0, 0.0])) == pytest.approx(0.0)
    assert constraint.pointwise(theta, np.array([0.0, 0.0])) == pytest.approx(-3.0)


def test_pointwise_rbf_uses_constant_trajectory(planar):
    # pointwise value equals evaluating the features with every state pinned
    theta = np.random.default_rng(6).normal(size=planar.constraint.dim)
    point = np.array([5.0, 4.2])
    state = np.array([point[0], point[1], 0.0, 0.0])
    traj = rollout(planar.dynamics, state, np.zeros((planar.horizon, 2)))
    pinned = evaluate_g(planar.constraint, theta, traj)
    assert planar.constraint.pointwise(theta, point) == pytest.approx(pinned, abs=1e-12)
