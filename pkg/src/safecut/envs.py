"""Concrete environments: the pendulum benchmark and a planar gate task.

Each environment bundles dynamics, task cost, a learnable constraint
family, reset rules and (where available) the ground truth used by
simulated correctors.  Process noise is applied to the executed state
only; the prediction model inside the planner is noise-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .constraints import (
    AffineStateConstraint,
    FeatureConstraint,
    RbfAccumulatedConstraint,
    decaying_weight_schedule,
)
from .errors import InfeasibleStart, NotSupervised
from .trajopt import BarrierProblem, CostSpec, DynamicsModel, rollout


@dataclass(frozen=True)
class EpisodeEvent:
    kind: str  # "stepped" | "reset" | "violated_truth" | "reached_target"
    state: np.ndarray


def env_step(env, u: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, EpisodeEvent]:
    """Advance the environment one control step (module-level alias)."""
    return env.step(u, rng)


def truth_violated(env, state: np.ndarray) -> bool:
    return env.truth_violated(state)


# --------------------------------------------------------------------------
# pendulum
# --------------------------------------------------------------------------


@dataclass
class PendulumEnv:
    """Torque-controlled pendulum with an affine safety bound on [angle, rate]."""

    mass: float = 1.0
    length: float = 1.0
    damping: float = 0.4
    gravity: float = 10.0
    dt: float = 0.02
    horizon: int = 40
    control_weight: float = 0.1
    terminal_weights: tuple[float, float] = (25.0, 10.0)
    target: tuple[float, float] = (np.pi, 0.0)
    bound: float = 3.0
    truth_theta: tuple[float, float] = (0.6, 1.0)
    gamma_default: float = 0.1
    noise_std: tuple[float, float] = (np.sqrt(1e-5), np.sqrt(4e-5))
    noise_enabled: bool = True
    reset_low: tuple[float, float] = (0.0, 0.0)
    reset_high: tuple[float, float] = (2.0 * np.pi / 3.0, 3.0)
    reset_margin: float = 0.25
    near_target_radius: float = 0.1

    state: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        self._coef = 3.0 / (self.mass * self.length**2)
        self._grav = 0.5 * self.mass * self.gravity * self.length
        self.dynamics = self._build_dynamics()
        self.cost = self._build_cost()
        self.constraint_family = AffineStateConstraint(bound=self.bound, state_index=1)
        self.constraint: FeatureConstraint = self.constraint_family.build(self.dynamics)
        if self.state is None:
            self.state = np.zeros(2)

    # -- model ------------------------------------------------------------
    def _build_dynamics(self) -> DynamicsModel:
        dt, coef, grav, damping = self.dt, self._coef, self._grav, self.damping

        def step(x: np.ndarray, u: np.ndarray) -> np.ndarray:
            alpha, rate = x
            accel = coef * (-grav * np.sin(alpha) + u[0] - damping * rate)
            return np.array([alpha + dt * rate, rate + dt * accel])

        def jacobians(x: np.ndarray, u: np.ndarray):
            alpha = x[0]
            A = np.array(
                [
                    [1.0, dt],
                    [dt * coef * (-grav * np.cos(alpha)), 1.0 - dt * coef * damping],
                ]
            )
            B = np.array([[0.0], [dt * coef]])
            return A, B

        return DynamicsModel(state_dim=2, control_dim=1, step=step, step_jacobians=jacobians)

    def _build_cost(self) -> CostSpec:
        q = self.control_weight
        R = np.diag(self.terminal_weights)
        target = np.asarray(self.target, dtype=float)

        def stage(x, u):
            return q * float(u[0] ** 2)

        def stage_gradients(x, u):
            return np.zeros(2), np.array([2.0 * q * u[0]])

        def terminal(x):
            e = x - target
            return float(e @ R @ e)

        def terminal_gradient(x):
            return 2.0 * R @ (x - target)

        return CostSpec(
            horizon=self.horizon,
            stage=stage,
            terminal=terminal,
            stage_gradients=stage_gradients,
            terminal_gradient=terminal_gradient,
        )

    def problem(self, theta: np.ndarray, gamma: float | None = None) -> BarrierProblem:
        return BarrierProblem(
            dynamics=self.dynamics,
            cost=self.cost,
            constraint=self.constraint,
            theta=np.asarray(theta, dtype=float),
            gamma=self.gamma_default if gamma is None else gamma,
        )

    # -- simulation -------------------------------------------------------
    def reset(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform state in the reset box, rejection-sampled to keep a
        safety margin to the ground-truth boundary (corrections are only
        meaningful from inside the intended safe set)."""
        low = np.asarray(self.reset_low)
        high = np.asarray(self.reset_high)
        truth = np.asarray(self.truth_theta)
        for _ in range(10_000):
            cand = rng.uniform(low, high)
            if truth @ cand <= self.bound - self.reset_margin:
                self.state = cand
                return cand.copy()
        raise RuntimeError("reset sampling failed; margin leaves no room in the box")

    def step(self, u: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, EpisodeEvent]:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        nxt = self.dynamics.step(self.state, u)
        if self.noise_enabled:
            nxt = nxt + rng.normal(0.0, self.noise_std)
        self.state = nxt
        if self.truth_violated(nxt):
            return nxt.copy(), EpisodeEvent(kind="violated_truth", state=nxt.copy())
        if self.near_target(nxt):
            return nxt.copy(), EpisodeEvent(kind="reached_target", state=nxt.copy())
        return nxt.copy(), EpisodeEvent(kind="stepped", state=nxt.copy())

    def truth_violated(self, state: np.ndarray) -> bool:
        return float(np.asarray(self.truth_theta) @ state) > self.bound

    def near_target(self, state: np.ndarray) -> bool:
        return float(np.linalg.norm(state - np.asarray(self.target))) <= self.near_target_radius

    def fallback_controls(self, state: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Strictly feasible control sequence from ``state`` under ``theta``.

        Only the first predicted state enters the constraint, so it is
        enough to pick the least-magnitude first torque that restores a
        margin; the remaining controls are zero.
        """
        theta = np.asarray(theta, dtype=float)
        controls = np.zeros((self.horizon, 1))
        traj = rollout(self.dynamics, state, controls)
        if self.constraint.value(theta, traj) < 0:
            return controls
        alpha, rate = state
        alpha1 = alpha + self.dt * rate
        base = rate + self.dt * self._coef * (-self._grav * np.sin(alpha) - self.damping * rate)
        gain = self.dt * self._coef * theta[1]
        if abs(gain) < 1e-12:
            raise InfeasibleStart("constraint insensitive to the first torque")
        u0 = (self.bound - 0.1 - theta[0] * alpha1 - theta[1] * base) / gain
        controls[0, 0] = u0
        traj = rollout(self.dynamics, state, controls)
        if self.constraint.value(theta, traj) >= 0:
            raise InfeasibleStart("no strictly feasible fallback from this state")
        return controls


# --------------------------------------------------------------------------
# planar gate navigation
# --------------------------------------------------------------------------


@dataclass
class PlanarGateEnv:
    """Planar double-integrator point robot that must pass a walled gate.

    The wall sits on a vertical line with one opening; the learnable
    constraint accumulates Gaussian bumps along the planned positions of
    centers placed on that line.  Ground truth (for scripted correctors)
    is the wall geometry itself.
    """

    dt: float = 0.1
    horizon: int = 20
    workspace: tuple[float, float] = (0.0, 10.0)
    gate_x: float = 5.0
    opening: tuple[float, float] = (3.2, 6.8)
    wall_y_range: tuple[float, float] = (1.5, 8.5)
    wall_half_width: float = 0.4
    rbf_count: int = 20
    rbf_width: float = 0.45
    rbf_decay_start: int = 5
    rbf_decay: float = 0.9
    phi0_value: float = -1.0
    gamma_default: float = 50.0
    control_weight: float = 1.0
    velocity_weight: float = 0.2
    terminal_pos_weight: float = 12.0
    terminal_vel_weight: float = 2.0
    targets: tuple = ((9.5, 1.0), (9.5, 5.0), (9.5, 9.0))
    start_x: float = 0.5
    start_y_range: tuple[float, float] = (2.5, 7.5)
    near_target_radius: float = 0.3
    noise_enabled: bool = False

    state: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    target: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        self.dynamics = self._build_dynamics()
        centers_y = np.linspace(self.workspace[0], self.workspace[1], self.rbf_count)
        centers = np.column_stack([np.full(self.rbf_count, self.gate_x), centers_y])
        self.constraint_family = RbfAccumulatedConstraint(
            centers=centers,
            width=self.rbf_width,
            weights_schedule=decaying_weight_schedule(
                self.horizon, start=self.rbf_decay_start, decay=self.rbf_decay
            ),
            phi0_value=self.phi0_value,
            position_indices=(0, 1),
        )
        self.constraint: FeatureConstraint = self.constraint_family.build(self.dynamics, self.horizon)
        if self.target is None:
            self.target = np.asarray(self.targets[0], dtype=float)
        self.cost = self._build_cost()
        if self.state is None:
            self.state = np.array([self.start_x, 5.0, 0.0, 0.0])

    def _build_dynamics(self) -> DynamicsModel:
        dt = self.dt
        A = np.eye(4)
        A[0, 2] = dt
        A[1, 3] = dt
        B = np.zeros((4, 2))
        B[2, 0] = dt
        B[3, 1] = dt

        def step(x: np.ndarray, u: np.ndarray) -> np.ndarray:
            return A @ x + B @ u

        def jacobians(x: np.ndarray, u: np.ndarray):
            return A, B

        return DynamicsModel(state_dim=4, control_dim=2, step=step, step_jacobians=jacobians)

    def _build_cost(self) -> CostSpec:
        ru = self.control_weight
        rv = self.velocity_weight
        wp = self.terminal_pos_weight
        wv = self.terminal_vel_weight
        env = self

        def stage(x, u):
            return ru * float(u @ u) + rv * float(x[2:] @ x[2:])

        def stage_gradients(x, u):
            gx = np.zeros(4)
            gx[2:] = 2.0 * rv * x[2:]
            return gx, 2.0 * ru * u

        def terminal(x):
            e = x[:2] - env.target
            return wp * float(e @ e) + wv * float(x[2:] @ x[2:])

        def terminal_gradient(x):
            g = np.zeros(4)
            g[:2] = 2.0 * wp * (x[:2] - env.target)
            g[2:] = 2.0 * wv * x[2:]
            return g

        return CostSpec(
            horizon=self.horizon,
            stage=stage,
            terminal=terminal,
            stage_gradients=stage_gradients,
            terminal_gradient=terminal_gradient,
        )

    def problem(self, theta: np.ndarray, gamma: float | None = None) -> BarrierProblem:
        return BarrierProblem(
            dynamics=self.dynamics,
            cost=self.cost,
            constraint=self.constraint,
            theta=np.asarray(theta, dtype=float),
            gamma=self.gamma_default if gamma is None else gamma,
        )

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        y0 = rng.uniform(*self.start_y_range)
        self.state = np.array([self.start_x, y0, 0.0, 0.0])
        self.target = np.asarray(self.targets[int(rng.integers(len(self.targets)))], dtype=float)
        return self.state.copy()

    def step(self, u: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, EpisodeEvent]:
        u = np.asarray(u, dtype=float)
        nxt = self.dynamics.step(self.state, u)
        self.state = nxt
        if self.truth_violated(nxt):
            return nxt.copy(), EpisodeEvent(kind="violated_truth", state=nxt.copy())
        if self.near_target(nxt):
            return nxt.copy(), EpisodeEvent(kind="reached_target", state=nxt.copy())
        return nxt.copy(), EpisodeEvent(kind="stepped", state=nxt.copy())

    def truth_violated(self, state: np.ndarray) -> bool:
        px, py = state[0], state[1]
        inside_band = abs(px - self.gate_x) <= self.wall_half_width
        on_wall = self.wall_y_range[0] <= py <= self.wall_y_range[1]
        in_opening = self.opening[0] < py < self.opening[1]
        return bool(inside_band and on_wall and not in_opening)

    def near_target(self, state: np.ndarray) -> bool:
        return float(np.linalg.norm(state[:2] - self.target)) <= self.near_target_radius

    def opening_clearance(self, point: np.ndarray) -> float:
        """Signed distance to the wall region: positive means clear of it."""
        px, py = point[0], point[1]
        dx = abs(px - self.gate_x) - self.wall_half_width
        if self.opening[0] < py < self.opening[1]:
            return max(dx, min(py - self.opening[0], self.opening[1] - py))
        if py < self.wall_y_range[0] or py > self.wall_y_range[1]:
            return max(dx, min(abs(py - self.wall_y_range[0]), abs(py - self.wall_y_range[1])))
        return dx

    def fallback_controls(self, state: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Brake to a stop; the frozen position keeps the features constant."""
        theta = np.asarray(theta, dtype=float)
        for brake_steps in (1, 2, 4):
            controls = np.zeros((self.horizon, 2))
            v = state[2:].copy()
            for t in range(brake_steps):
                controls[t] = -v / (self.dt * (brake_steps - t))
                v = v + self.dt * controls[t]
            traj = rollout(self.dynamics, state, controls)
            if self.constraint.value(theta, traj) < 0:
                return controls
        raise InfeasibleStart("no strictly feasible fallback from this state")


_ENV_BUILDERS = {
    "pendulum": PendulumEnv,
    "planar_gate": PlanarGateEnv,
}


def build_environment(env_id: str, overrides: dict | None = None):
    if env_id not in _ENV_BUILDERS:
        raise KeyError(f"unknown environment id {env_id!r}")
    return _ENV_BUILDERS[env_id](**(overrides or {}))
