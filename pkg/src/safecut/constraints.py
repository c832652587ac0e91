"""Weighted-feature safety constraints g(theta, xi) = phi0(xi) + theta . phi(xi).

Two concrete families are provided: an affine constraint on one predicted
state (pendulum benchmark) and temporally accumulated Gaussian RBFs over
planar positions (gate navigation).  Feature gradients w.r.t. controls go
through the dynamics with the same backward accumulation as the planner.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionError
from .trajopt import DynamicsModel, Trajectory, control_gradient


@dataclass(frozen=True)
class FeatureConstraint:
    """Callable bundle describing one weighted-feature constraint family.

    ``phi0`` and ``features`` evaluate the offset feature and the feature
    vector on a trajectory; ``phi0_state_partials``/``feature_state_partials``
    give their direct partials w.r.t. each state (shapes (T+1, n) and
    (r, T+1, n)); ``pointwise`` evaluates g on a single workspace point with
    every trajectory state pinned there, which is the convention used for
    heat-map style grid exports.
    """

    dim: int
    dynamics: DynamicsModel
    phi0: Callable[[Trajectory], float]
    features: Callable[[Trajectory], np.ndarray]
    phi0_state_partials: Callable[[Trajectory], np.ndarray]
    feature_state_partials: Callable[[Trajectory], np.ndarray]
    pointwise: Callable[[np.ndarray, np.ndarray], float]

    def value(self, theta: np.ndarray, traj: Trajectory) -> float:
        return evaluate_g(self, theta, traj)

    def state_partials(self, theta: np.ndarray, traj: Trajectory) -> np.ndarray:
        """Direct partials of g w.r.t. every state, (T+1, n)."""
        theta = np.asarray(theta, dtype=float)
        gx = self.phi0_state_partials(traj).copy()
        fx = self.feature_state_partials(traj)
        gx += np.tensordot(theta, fx, axes=(0, 0))
        return gx

    def feature_control_gradients(self, traj: Trajectory) -> np.ndarray:
        """d(phi)/d(controls) through the dynamics, shape (r, m*T)."""
        fx = self.feature_state_partials(traj)
        rows = [control_gradient(self.dynamics, traj, fx[k]) for k in range(self.dim)]
        return np.asarray(rows)

    def phi0_control_gradient(self, traj: Trajectory) -> np.ndarray:
        return control_gradient(self.dynamics, traj, self.phi0_state_partials(traj))


def evaluate_g(constraint: FeatureConstraint, theta: np.ndarray, traj: Trajectory) -> float:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (constraint.dim,):
        raise DimensionError(f"theta has shape {theta.shape}, expected ({constraint.dim},)")
    return float(constraint.phi0(traj) + theta @ constraint.features(traj))


def feature_values_and_gradients(
    constraint: FeatureConstraint, traj: Trajectory
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Return (phi0, d phi0/du, phi, d phi/du) at the trajectory."""
    phi0 = float(constraint.phi0(traj))
    grad_phi0 = constraint.phi0_control_gradient(traj)
    phi = np.asarray(constraint.features(traj), dtype=float)
    dphi = constraint.feature_control_gradients(traj)
    return phi0, grad_phi0, phi, dphi


# --------------------------------------------------------------------------
# affine family: g = -bound + theta . x[state_index]
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineStateConstraint:
    """Affine constraint on one predicted state; features are that state."""

    bound: float = 3.0
    state_index: int = 1

    def build(self, dynamics: DynamicsModel) -> FeatureConstraint:
        idx = self.state_index
        n = dynamics.state_dim

        def phi0(traj: Trajectory) -> float:
            return -self.bound

        def features(traj: Trajectory) -> np.ndarray:
            return traj.states[idx].copy()

        def phi0_partials(traj: Trajectory) -> np.ndarray:
            return np.zeros_like(traj.states)

        def feature_partials(traj: Trajectory) -> np.ndarray:
            fx = np.zeros((n, traj.states.shape[0], n))
            for k in range(n):
                fx[k, idx, k] = 1.0
            return fx

        def pointwise(theta: np.ndarray, point: np.ndarray) -> float:
            return float(-self.bound + np.asarray(theta) @ np.asarray(point))

        return FeatureConstraint(
            dim=n,
            dynamics=dynamics,
            phi0=phi0,
            features=features,
            phi0_state_partials=phi0_partials,
            feature_state_partials=feature_partials,
            pointwise=pointwise,
        )


# --------------------------------------------------------------------------
# accumulated-RBF family over planar positions
# --------------------------------------------------------------------------


def decaying_weight_schedule(horizon: int, start: int = 5, decay: float = 0.9) -> np.ndarray:
    """Per-step weights: zero before ``start``, then decay**(t-start)."""
    t = np.arange(horizon + 1)
    beta = np.where(t < start, 0.0, decay ** np.clip(t - start, 0, None))
    return beta.astype(float)


@dataclass(frozen=True)
class RbfAccumulatedConstraint:
    """Features accumulate Gaussian bumps along the planned positions.

    phi_i(xi) = sum_t beta_t * exp(-width^2 * ||pos_t - center_i||^2),
    with phi0 fixed to a constant to remove the scale ambiguity of theta.
    """

    centers: np.ndarray  # (N, 2)
    width: float = 0.45
    weights_schedule: np.ndarray | None = None  # (T+1,)
    phi0_value: float = -1.0
    position_indices: tuple[int, int] = (0, 1)

    def build(self, dynamics: DynamicsModel, horizon: int) -> FeatureConstraint:
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        beta = self.weights_schedule
        if beta is None:
            beta = decaying_weight_schedule(horizon)
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (horizon + 1,):
            raise DimensionError(f"weights schedule has shape {beta.shape}, expected ({horizon + 1},)")
        eps2 = float(self.width) ** 2
        pos = list(self.position_indices)
        r = centers.shape[0]

        def _bumps(traj: Trajectory) -> np.ndarray:
            # (T+1, r) matrix of exp(-eps2 * squared distance)
            p = traj.states[:, pos]
            d2 = ((p[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            return np.exp(-eps2 * d2)

        def phi0(traj: Trajectory) -> float:
            return self.phi0_value

        def features(traj: Trajectory) -> np.ndarray:
            return beta @ _bumps(traj)

        def phi0_partials(traj: Trajectory) -> np.ndarray:
            return np.zeros_like(traj.states)

        def feature_partials(traj: Trajectory) -> np.ndarray:
            p = traj.states[:, pos]
            diff = p[:, None, :] - centers[None, :, :]  # (T+1, r, 2)
            vals = np.exp(-eps2 * (diff**2).sum(axis=2))  # (T+1, r)
            dpos = -2.0 * eps2 * beta[:, None, None] * vals[:, :, None] * diff
            fx = np.zeros((r, traj.states.shape[0], traj.states.shape[1]))
            fx[:, :, pos[0]] = dpos[:, :, 0].T
            fx[:, :, pos[1]] = dpos[:, :, 1].T
            return fx

        beta_total = float(beta.sum())

        def pointwise(theta: np.ndarray, point: np.ndarray) -> float:
            d2 = ((centers - np.asarray(point, dtype=float)) ** 2).sum(axis=1)
            return float(self.phi0_value + beta_total * (np.asarray(theta) @ np.exp(-eps2 * d2)))

        return FeatureConstraint(
            dim=r,
            dynamics=dynamics,
            phi0=phi0,
            features=features,
            phi0_state_partials=phi0_partials,
            feature_state_partials=feature_partials,
            pointwise=pointwise,
        )


def constant_constraint(dynamics: DynamicsModel, value: float = -1.0, dim: int = 1) -> FeatureConstraint:
    """A never-active constraint (g == value < 0); useful for tests."""

    def phi0(traj: Trajectory) -> float:
        return value

    def features(traj: Trajectory) -> np.ndarray:
        return np.zeros(dim)

    def phi0_partials(traj: Trajectory) -> np.ndarray:
        return np.zeros_like(traj.states)

    def feature_partials(traj: Trajectory) -> np.ndarray:
        return np.zeros((dim, traj.states.shape[0], traj.states.shape[1]))

    def pointwise(theta: np.ndarray, point: np.ndarray) -> float:
        return value

    return FeatureConstraint(
        dim=dim,
        dynamics=dynamics,
        phi0=phi0,
        features=features,
        phi0_state_partials=phi0_partials,
        feature_state_partials=feature_partials,
        pointwise=pointwise,
    )
