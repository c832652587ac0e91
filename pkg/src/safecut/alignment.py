"""The certifiable alignment loop.

Every directional correction cuts the parameter hypothesis space with two
half-spaces; the next MPC parameter is the center of the maximum-volume
ellipsoid inscribed in what remains.  The loop terminates on convergence
(corrector-declared), human satisfaction, or after the correction budget,
at which point closeness to the initial box boundary is interpreted as
hypothesis misspecification.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import mpmath
import numpy as np

from .errors import (
    AlignmentAborted,
    DegenerateCorrection,
    EmptyHypothesis,
    InfeasiblePolytope,
    InfeasibleStart,
    InvalidBudget,
)
from .geometry import (
    Ellipsoid,
    Polytope,
    apply_cut,
    build_cut,
    initial_box,
    mve,
    mve_containment_residual,
    polygon_area_2d,
)
from .trajopt import (
    BarrierProblem,
    SolverOptions,
    Trajectory,
    mpc_policy_step,
    rollout,
    shifted_warm_start,
)


@dataclass(frozen=True)
class AlignmentConfig:
    c_l: np.ndarray
    c_h: np.ndarray
    rho_H: float
    gamma: float
    epsilon_misspec: float = 0.05
    rng_seed: int = 0
    solver: SolverOptions = field(default_factory=SolverOptions)
    mve_gap_tol: float = 1e-11
    average_burst: bool = False
    max_env_steps: int = 200_000
    max_steps_per_episode: int = 2_000
    # corrections allowed past the budget checkpoint before giving up; the
    # budget is where misspecification is decided, not a hard stop (the
    # nominal per-cut volume factor is not a worst-case guarantee, so
    # well-specified runs may legitimately need a few extra corrections)
    overrun_factor: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "c_l", np.asarray(self.c_l, dtype=float))
        object.__setattr__(self, "c_h", np.asarray(self.c_h, dtype=float))
        if self.rho_H <= 0:
            raise ValueError("rho_H must be positive")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    correction: np.ndarray
    log_det_H: float
    theta: np.ndarray
    distance_to_truth: float | None = None
    # diagnostics beyond the required schema
    step_index: int = 0
    area_2d: float | None = None
    cut_residual: float = 0.0
    cut_offset: float = 0.0
    feasibility_margin: float = 0.0
    mve_residual: float = 0.0
    wall_time_ms: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "correction": [float(v) for v in np.atleast_1d(self.correction)],
            "log_det_H": float(self.log_det_H),
            "theta": [float(v) for v in np.atleast_1d(self.theta)],
            "distance_to_truth": None if self.distance_to_truth is None else float(self.distance_to_truth),
            "step_index": int(self.step_index),
            "area_2d": None if self.area_2d is None else float(self.area_2d),
            "cut_residual": float(self.cut_residual),
            "cut_offset": float(self.cut_offset),
            "feasibility_margin": float(self.feasibility_margin),
            "mve_residual": float(self.mve_residual),
            "wall_time_ms": float(self.wall_time_ms),
        }


@dataclass
class AlignmentState:
    polytope: Polytope
    ellipsoid: Ellipsoid
    theta: np.ndarray
    iteration: int
    budget: int
    trace: list[TraceRecord] = field(default_factory=list)


@dataclass(frozen=True)
class AlignmentOutcome:
    kind: str  # "converged" | "satisfied_by_human" | "misspecified" | "budget_exhausted"
    final_theta: np.ndarray
    corrections_used: int
    stats: dict = field(default_factory=dict)


def unit_ball_volume(r: int) -> float:
    """Volume of the unit ball in r dimensions."""
    return float(math.pi ** (r / 2.0) / math.gamma(r / 2.0 + 1.0))


def budget_exponent(box_volume: float, rho_H: float, r: int) -> float:
    """ln(tau_r rho^r / volume) / ln(1 - 1/r), evaluated in extended
    precision and rounded once to float (the downstream ceiling is
    sensitive at the ulp level)."""
    with mpmath.workdps(50):
        tau = mpmath.pi ** (mpmath.mpf(r) / 2) / mpmath.gamma(mpmath.mpf(r) / 2 + 1)
        ratio = tau * mpmath.mpf(rho_H) ** r / mpmath.mpf(box_volume)
        value = mpmath.log(ratio) / mpmath.log(1 - mpmath.mpf(1) / r)
        return float(value)


def max_corrections(box_volume: float, rho_H: float, r: int) -> int:
    """Correction budget: ceil of the volume-reduction exponent."""
    if r < 2:
        raise InvalidBudget("budget formula requires parameter dimension >= 2")
    if box_volume <= 0 or rho_H <= 0:
        raise InvalidBudget("volumes must be positive")
    ball = unit_ball_volume(r) * rho_H**r
    if ball >= box_volume:
        raise InvalidBudget(
            f"termination ball volume {ball:.6g} is not below the box volume {box_volume:.6g}"
        )
    with mpmath.workdps(50):
        tau = mpmath.pi ** (mpmath.mpf(r) / 2) / mpmath.gamma(mpmath.mpf(r) / 2 + 1)
        ratio = tau * mpmath.mpf(rho_H) ** r / mpmath.mpf(box_volume)
        value = mpmath.log(ratio) / mpmath.log(1 - mpmath.mpf(1) / r)
        return int(mpmath.ceil(value))


def check_misspecification(theta: np.ndarray, c_l: np.ndarray, c_h: np.ndarray, epsilon: float) -> bool:
    """Componentwise closeness of theta to either box face."""
    theta = np.asarray(theta, dtype=float)
    near_low = float(np.min(np.abs(np.asarray(c_l, dtype=float) - theta)))
    near_high = float(np.min(np.abs(np.asarray(c_h, dtype=float) - theta)))
    return near_low <= epsilon or near_high <= epsilon


def align_step(
    state: AlignmentState,
    plan: Trajectory,
    correction: np.ndarray,
    problem: BarrierProblem,
    *,
    step_index: int = 0,
    distance_to_truth: float | None = None,
    mve_gap_tol: float = 1e-11,
    iteration_cap: int | None = None,
) -> AlignmentState:
    """Apply one correction: cut, intersect, recenter, record."""
    cap = state.budget if iteration_cap is None else iteration_cap
    if state.iteration >= cap:
        raise AlignmentAborted("correction budget already exhausted")
    t0 = time.perf_counter()
    cut = build_cut(plan, correction, problem.gamma, problem.constraint, problem.cost)
    residual = abs(float(state.theta @ cut.primary_normal) - cut.primary_offset)
    feas_margin = cut.feasibility_offset - float(state.theta @ cut.feasibility_normal)
    poly = apply_cut(state.polytope, cut)
    try:
        ell = mve(poly, gap_tol=mve_gap_tol, warm=state.ellipsoid)
    except InfeasiblePolytope as exc:
        raise EmptyHypothesis(f"cut emptied the hypothesis space: {exc}") from exc
    area = polygon_area_2d(poly) if poly.dim == 2 else None
    record = TraceRecord(
        iteration=state.iteration + 1,
        correction=np.asarray(correction, dtype=float).copy(),
        log_det_H=ell.log_det,
        theta=ell.center.copy(),
        distance_to_truth=distance_to_truth,
        step_index=step_index,
        area_2d=area,
        cut_residual=residual,
        cut_offset=cut.primary_offset,
        feasibility_margin=feas_margin,
        mve_residual=mve_containment_residual(poly, ell),
        wall_time_ms=(time.perf_counter() - t0) * 1e3,
    )
    return AlignmentState(
        polytope=poly,
        ellipsoid=ell,
        theta=ell.center.copy(),
        iteration=state.iteration + 1,
        budget=state.budget,
        trace=state.trace + [record],
    )


def initial_state(config: AlignmentConfig, r: int) -> AlignmentState:
    box = initial_box(config.c_l, config.c_h)
    box_volume = float(np.prod(config.c_h - config.c_l))
    budget = max_corrections(box_volume, config.rho_H, r)
    ell = mve(box, gap_tol=config.mve_gap_tol)
    return AlignmentState(polytope=box, ellipsoid=ell, theta=ell.center.copy(), iteration=0, budget=budget, trace=[])


def run_alignment(env, corrector, config: AlignmentConfig) -> tuple[AlignmentOutcome, AlignmentState]:
    """Run the full interaction loop until convergence, satisfaction, or
    the correction budget.

    Emergency restarts (truth violation, target reached, or loss of a
    feasible warm start after a parameter update) reset the environment
    without touching the hypothesis space.
    """
    r = env.constraint.dim
    state = initial_state(config, r)
    rng = np.random.default_rng(config.rng_seed)
    env.reset(rng)

    stats = {
        "solver_calls": 0,
        "infeasible_solutions": 0,
        "env_steps": 0,
        "resets": 1,
        "emergency_restarts": 0,
        "warm_shift_attempts": 0,
        "warm_shift_feasible": 0,
        "max_mve_residual": mve_containment_residual(state.polytope, state.ellipsoid),
    }
    prev_plan: Trajectory | None = None
    episode_steps = 0
    theta_truth = getattr(corrector, "theta_H", None)

    def finish(kind: str) -> tuple[AlignmentOutcome, AlignmentState]:
        outcome = AlignmentOutcome(
            kind=kind,
            final_theta=state.theta.copy(),
            corrections_used=state.iteration,
            stats=dict(stats),
        )
        return outcome, state

    misspec_checked = False
    hard_cap = int(math.ceil(config.overrun_factor * state.budget))

    while True:
        if corrector.is_converged(state.theta):
            return finish("converged")
        if corrector.satisfied():
            return finish("satisfied_by_human")
        if state.iteration >= state.budget - 1 and not misspec_checked:
            # budget checkpoint: a parameter hugging the initial box face
            # means the intent lies outside the box
            misspec_checked = True
            if check_misspecification(state.theta, config.c_l, config.c_h, config.epsilon_misspec):
                return finish("misspecified")
        if state.iteration >= hard_cap:
            return finish("budget_exhausted")
        if stats["env_steps"] >= config.max_env_steps:
            raise AlignmentAborted(f"exceeded {config.max_env_steps} environment steps")

        problem = env.problem(state.theta, config.gamma)

        warm = None
        if prev_plan is not None:
            stats["warm_shift_attempts"] += 1
            shifted = shifted_warm_start(prev_plan)
            if _is_feasible(problem, env.state, shifted):
                stats["warm_shift_feasible"] += 1
                warm = shifted
        if warm is None:
            zeros = np.zeros((env.horizon, env.dynamics.control_dim)).reshape(-1)
            if _is_feasible(problem, env.state, zeros):
                warm = zeros
            else:
                try:
                    warm = env.fallback_controls(env.state, state.theta).reshape(-1)
                except InfeasibleStart:
                    # no safe plan from here under the updated parameter:
                    # emergency restart, hypothesis untouched
                    env.reset(rng)
                    stats["resets"] += 1
                    stats["emergency_restarts"] += 1
                    prev_plan = None
                    episode_steps = 0
                    continue

        u0, plan = mpc_policy_step(problem, env.state, warm, config.solver)
        stats["solver_calls"] += 1
        if problem.constraint.value(state.theta, plan) >= 0:
            stats["infeasible_solutions"] += 1

        event = corrector.poll(plan, problem, step_index=episode_steps)
        if event is not None:
            try:
                state = align_step(
                    state,
                    plan,
                    event.direction,
                    problem,
                    step_index=event.step_index,
                    mve_gap_tol=config.mve_gap_tol,
                    iteration_cap=hard_cap,
                )
            except DegenerateCorrection:
                event = None  # uninformative cut; keep executing instead
            if event is not None:
                if theta_truth is not None:
                    state.trace[-1] = _with_distance(
                        state.trace[-1], float(np.linalg.norm(state.theta - theta_truth))
                    )
                stats["max_mve_residual"] = max(
                    stats["max_mve_residual"], state.trace[-1].mve_residual
                )
                prev_plan = None  # parameter changed; replan before executing
                continue

        _, ev = env.step(u0, rng)
        stats["env_steps"] += 1
        episode_steps += 1
        if ev.kind in ("violated_truth", "reached_target") or episode_steps >= config.max_steps_per_episode:
            env.reset(rng)
            stats["resets"] += 1
            prev_plan = None
            episode_steps = 0
        else:
            prev_plan = plan


def _with_distance(record: TraceRecord, distance: float) -> TraceRecord:
    from dataclasses import replace

    return replace(record, distance_to_truth=distance)


def _is_feasible(problem: BarrierProblem, x0: np.ndarray, flat_controls: np.ndarray) -> bool:
    try:
        traj = rollout(problem.dynamics, x0, flat_controls.reshape(-1, problem.dynamics.control_dim))
    except Exception:
        return False
    g = problem.constraint.value(problem.theta, traj)
    return bool(np.isfinite(g) and g < 0)
