import numpy as np
import pytest

from safecut.constraints import AffineStateConstraint
from safecut.envs import PendulumEnv, PlanarGateEnv
from safecut.trajopt import CostSpec, DynamicsModel


@pytest.fixture
def pendulum():
    return PendulumEnv(noise_enabled=False)


@pytest.fixture
def planar():
    return PlanarGateEnv()


def make_integrator(n: int) -> DynamicsModel:
    """One-step integrator x_{t+1} = u_t (state and control share dim)."""

    def step(x, u):
        return u.copy()

    def jac(x, u):
        return np.zeros((n, n)), np.eye(n)

    return DynamicsModel(state_dim=n, control_dim=n, step=step, step_jacobians=jac)


def quadratic_cost(horizon: int, n: int, target=None) -> CostSpec:
    """J = sum ||u_t||^2 (+ ||x_T - target||^2 when a target is given)."""
    target = np.zeros(n) if target is None else np.asarray(target, dtype=float)

    def stage(x, u):
        return float(u @ u)

    def stage_gradients(x, u):
        return np.zeros(n), 2.0 * u

    def terminal(x):
        e = x - target
        return float(e @ e)

    def terminal_gradient(x):
        return 2.0 * (x - target)

    return CostSpec(
        horizon=horizon,
        stage=stage,
        terminal=terminal,
        stage_gradients=stage_gradients,
        terminal_gradient=terminal_gradient,
    )


def control_only_cost(horizon: int, n: int) -> CostSpec:
    def stage(x, u):
        return float(u @ u)

    def stage_gradients(x, u):
        return np.zeros(n), 2.0 * u

    def terminal(x):
        return 0.0

    def terminal_gradient(x):
        return np.zeros(n)

    return CostSpec(
        horizon=horizon,
        stage=stage,
        terminal=terminal,
        stage_gradients=stage_gradients,
        terminal_gradient=terminal_gradient,
    )


def zero_cost(horizon: int, n: int, m: int) -> CostSpec:
    def stage(x, u):
        return 0.0

    def stage_gradients(x, u):
        return np.zeros(n), np.zeros(m)

    def terminal(x):
        return 0.0

    def terminal_gradient(x):
        return np.zeros(n)

    return CostSpec(
        horizon=horizon,
        stage=stage,
        terminal=terminal,
        stage_gradients=stage_gradients,
        terminal_gradient=terminal_gradient,
    )


def integrator_affine_problem(theta, gamma=0.1, bound=3.0):
    """1-step integrator with g = -bound + theta . x_1 and J = ||u_0||^2."""
    from safecut.trajopt import BarrierProblem

    dyn = make_integrator(2)
    constraint = AffineStateConstraint(bound=bound, state_index=1).build(dyn)
    cost = control_only_cost(1, 2)
    return BarrierProblem(
        dynamics=dyn,
        cost=cost,
        constraint=constraint,
        theta=np.asarray(theta, dtype=float),
        gamma=gamma,
    )
