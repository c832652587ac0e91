"""Barrier-penalized trajectory optimization for safe MPC.

The planner minimizes J(xi) - gamma*ln(-g(xi)) over a stacked control
sequence, with gradients propagated through the dynamics by backward
(adjoint) accumulation.  The log barrier keeps every accepted iterate
strictly feasible, so the returned plan always satisfies g < 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from .errors import DomainViolation, InfeasibleStart, NumericalDivergence

if TYPE_CHECKING:  # pragma: no cover
    from .constraints import FeatureConstraint


@dataclass(frozen=True)
class DynamicsModel:
    """Discrete-time dynamics x_{t+1} = step(x_t, u_t) with Jacobians."""

    state_dim: int
    control_dim: int
    step: Callable[[np.ndarray, np.ndarray], np.ndarray]
    step_jacobians: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class CostSpec:
    """Stage plus terminal cost over a fixed horizon, with gradients."""

    horizon: int
    stage: Callable[[np.ndarray, np.ndarray], float]
    terminal: Callable[[np.ndarray], float]
    stage_gradients: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
    terminal_gradient: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Trajectory:
    """A control sequence and its rollout: len(states) == len(controls)+1."""

    states: np.ndarray  # (T+1, n)
    controls: np.ndarray  # (T, m)

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    def flat_controls(self) -> np.ndarray:
        return self.controls.reshape(-1)


@dataclass(frozen=True)
class BarrierProblem:
    """One safe-MPC instance: dynamics, task cost, constraint and weights.

    ``theta`` selects the member of the weighted-feature constraint family;
    ``gamma`` weighs the log barrier against the task cost.
    """

    dynamics: DynamicsModel
    cost: CostSpec
    constraint: "FeatureConstraint"
    theta: np.ndarray
    gamma: float

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    line_search_shrink: float = 0.5
    initial_step: float = 1.0
    memory: int = 10  # quasi-Newton pairs kept by the two-loop recursion

    def __post_init__(self):
        if self.max_iterations <= 0 or self.gradient_tolerance <= 0:
            raise ValueError("max_iterations and gradient_tolerance must be positive")
        if not 0.0 < self.line_search_shrink < 1.0:
            raise ValueError("line_search_shrink must lie strictly inside (0, 1)")
        if self.initial_step <= 0:
            raise ValueError("initial_step must be positive")


def rollout(dynamics: DynamicsModel, x0: np.ndarray, controls: Sequence[np.ndarray]) -> Trajectory:
    """Integrate the dynamics from x0 under the given control sequence."""
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 1:
        controls = controls.reshape(-1, dynamics.control_dim)
    if controls.shape[0] == 0:
        raise ValueError("controls must be nonempty")
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise NumericalDivergence("non-finite initial state")
    states = np.empty((controls.shape[0] + 1, dynamics.state_dim))
    states[0] = x0
    with np.errstate(all="ignore"):
        for t in range(controls.shape[0]):
            states[t + 1] = dynamics.step(states[t], controls[t])
    if not np.all(np.isfinite(states)):
        raise NumericalDivergence("non-finite state produced during rollout")
    return Trajectory(states=states, controls=controls)


def control_gradient(
    dynamics: DynamicsModel,
    traj: Trajectory,
    state_partials: np.ndarray,
    control_partials: np.ndarray | None = None,
) -> np.ndarray:
    """Backward accumulation of d(scalar)/d(controls) through the rollout.

    ``state_partials[t]`` is the direct partial of the scalar w.r.t. x_t,
    ``control_partials[t]`` (optional) w.r.t. u_t.  Returns a flat (m*T,)
    gradient.
    """
    T = traj.horizon
    grads = np.empty_like(traj.controls)
    lam = np.array(state_partials[T], dtype=float)
    for t in range(T - 1, -1, -1):
        A, B = dynamics.step_jacobians(traj.states[t], traj.controls[t])
        grads[t] = B.T @ lam
        if control_partials is not None:
            grads[t] += control_partials[t]
        lam = state_partials[t] + A.T @ lam
    return grads.reshape(-1)


def cost_value(cost: CostSpec, traj: Trajectory) -> float:
    total = 0.0
    for t in range(traj.horizon):
        total += cost.stage(traj.states[t], traj.controls[t])
    return total + cost.terminal(traj.states[-1])


def _cost_partials(cost: CostSpec, traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    T = traj.horizon
    sx = np.zeros_like(traj.states)
    su = np.zeros_like(traj.controls)
    for t in range(T):
        cx, cu = cost.stage_gradients(traj.states[t], traj.controls[t])
        sx[t] = cx
        su[t] = cu
    sx[T] = cost.terminal_gradient(traj.states[-1])
    return sx, su


def cost_gradient(dynamics: DynamicsModel, cost: CostSpec, traj: Trajectory) -> np.ndarray:
    """Flat gradient of the task cost w.r.t. the control sequence."""
    sx, su = _cost_partials(cost, traj)
    return control_gradient(dynamics, traj, sx, su)


def barrier_value(problem: BarrierProblem, traj: Trajectory) -> float:
    """J(xi) - gamma*ln(-g(xi)); defined only on strictly feasible plans."""
    g = problem.constraint.value(problem.theta, traj)
    if g >= 0:
        raise DomainViolation(f"g = {g:.6g} >= 0: barrier undefined")
    return cost_value(problem.cost, traj) - problem.gamma * np.log(-g)


def barrier_gradient(problem: BarrierProblem, traj: Trajectory) -> np.ndarray:
    """Flat gradient of the barrier objective w.r.t. the control sequence."""
    g = problem.constraint.value(problem.theta, traj)
    if g >= 0:
        raise DomainViolation(f"g = {g:.6g} >= 0: barrier undefined")
    sx, su = _cost_partials(problem.cost, traj)
    gx = problem.constraint.state_partials(problem.theta, traj)
    sx = sx + (problem.gamma / (-g)) * gx
    return control_gradient(problem.dynamics, traj, sx, su)


# --------------------------------------------------------------------------
# solver
# --------------------------------------------------------------------------

_INFEASIBLE = float("inf")


@dataclass
class _Eval:
    traj: Trajectory
    value: float
    gradient: np.ndarray | None = None


def _evaluate(problem: BarrierProblem, x0: np.ndarray, u_flat: np.ndarray) -> _Eval | None:
    """Rollout + barrier value; None when the point is outside the domain."""
    try:
        traj = rollout(problem.dynamics, x0, u_flat.reshape(-1, problem.dynamics.control_dim))
    except NumericalDivergence:
        return None
    g = problem.constraint.value(problem.theta, traj)
    if not np.isfinite(g) or g >= 0:
        return None
    value = cost_value(problem.cost, traj) - problem.gamma * np.log(-g)
    if not np.isfinite(value):
        return None
    return _Eval(traj=traj, value=value)


def _two_loop_direction(grad: np.ndarray, s_list: list[np.ndarray], y_list: list[np.ndarray]) -> np.ndarray:
    q = grad.copy()
    alphas = []
    rhos = [1.0 / float(y @ s) for s, y in zip(s_list, y_list)]
    for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rhos)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(zip(s_list, y_list, rhos), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


@dataclass
class SolveInfo:
    iterations: int = 0
    accepted_values: list[float] = field(default_factory=list)
    gradient_norm: float = float("nan")
    converged: bool = False


def solve_barrier_mpc(
    problem: BarrierProblem,
    x0: np.ndarray,
    warm_start: np.ndarray,
    options: SolverOptions = SolverOptions(),
    info: SolveInfo | None = None,
) -> Trajectory:
    """Minimize the barrier objective over the control sequence.

    The warm start must be strictly feasible.  Line search rejects any
    trial step whose rollout leaves the barrier domain, so every accepted
    iterate (and the returned plan) satisfies g < 0.  Near the numerical
    floor, where the objective no longer resolves a decrease, steps are
    accepted on gradient-norm reduction provided the value does not
    increase; this lets the solver polish the stationarity residual well
    below sqrt(eps) when a tight gradient tolerance is requested.
    """
    x0 = np.asarray(x0, dtype=float)
    u = np.asarray(warm_start, dtype=float).reshape(-1).copy()
    current = _evaluate(problem, x0, u)
    if current is None:
        raise InfeasibleStart("warm start is not strictly feasible")
    grad = barrier_gradient(problem, current.traj)
    if info is None:
        info = SolveInfo()
    info.accepted_values.append(current.value)

    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    c1 = 1e-4
    stagnant = 0
    best_gnorm = float(np.linalg.norm(grad))

    def _search(d: np.ndarray, slope: float, first: bool):
        step = options.initial_step if not first else min(options.initial_step, 1.0 / max(1.0, float(np.linalg.norm(d))))
        d_scale = float(np.max(np.abs(d)))
        u_scale = 1.0 + float(np.max(np.abs(u)))
        for _ in range(60):
            if step * d_scale < 1e-18 * u_scale:
                return None  # steps no longer representable against u
            cand = _evaluate(problem, x0, u + step * d)
            # near the float floor the Armijo offset underflows against the
            # objective, which turns this into a tie-tolerant acceptance
            if cand is not None and cand.value <= current.value + c1 * step * slope:
                return u + step * d, cand
            step *= options.line_search_shrink
        return None

    for it in range(options.max_iterations):
        gnorm = float(np.linalg.norm(grad))
        info.iterations = it
        info.gradient_norm = gnorm
        if gnorm <= options.gradient_tolerance:
            info.converged = True
            break

        d = _two_loop_direction(grad, s_list, y_list)
        slope = float(grad @ d)
        if not np.isfinite(slope) or slope >= 0:
            d = -grad
            slope = -gnorm * gnorm
        accepted = _search(d, slope, first=not s_list)
        if accepted is None and s_list:
            # stale curvature pairs can spoil the direction; retry steepest
            s_list.clear()
            y_list.clear()
            accepted = _search(-grad, -gnorm * gnorm, first=True)
        if accepted is None:
            break  # numerical floor reached

        new_u, nxt = accepted
        new_grad = barrier_gradient(problem, nxt.traj)
        s = new_u - u
        y = new_grad - grad
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_list.append(s)
            y_list.append(y)
            if len(s_list) > options.memory:
                s_list.pop(0)
                y_list.pop(0)
        improvement = current.value - nxt.value
        u, current, grad = new_u, nxt, new_grad
        info.accepted_values.append(current.value)
        new_gnorm = float(np.linalg.norm(grad))
        # the objective freezes at float resolution well before the gradient
        # bottoms out; keep polishing while either quantity improves
        if improvement > 1e-13 * (1.0 + abs(current.value)) or new_gnorm < 0.7 * best_gnorm:
            stagnant = 0
        else:
            stagnant += 1
            if stagnant >= 10:
                break
        best_gnorm = min(best_gnorm, new_gnorm)

    info.gradient_norm = float(np.linalg.norm(grad))
    if not np.all(np.isfinite(u)):
        raise NumericalDivergence("solver produced non-finite controls")
    return current.traj


def mpc_policy_step(
    problem: BarrierProblem,
    x_current: np.ndarray,
    warm_start: np.ndarray,
    options: SolverOptions = SolverOptions(),
) -> tuple[np.ndarray, Trajectory]:
    """Solve the receding-horizon problem and return (first action, plan)."""
    plan = solve_barrier_mpc(problem, x_current, warm_start, options)
    return plan.controls[0].copy(), plan


def shifted_warm_start(plan: Trajectory) -> np.ndarray:
    """Shift the previous plan one step and repeat the last control."""
    controls = np.vstack([plan.controls[1:], plan.controls[-1:]])
    return controls.reshape(-1)
