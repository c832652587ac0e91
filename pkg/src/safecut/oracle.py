"""Simulated correction sources.

The sign-gradient oracle reproduces the benchmark generation rule: when
the solved plan runs close to the intended safety boundary, it emits (with
fixed probability) the sign of the first control block of the descent
direction of the penalized objective evaluated under the intended
parameter.  Such a correction always satisfies both halves of the cutting
hypothesis at the intended parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .trajopt import BarrierProblem, Trajectory, barrier_gradient


@dataclass(frozen=True)
class OracleConfig:
    theta_H: np.ndarray
    intent_radius: float = 0.02
    epsilon_g: float = 0.25
    p_correct: float = 0.3
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "theta_H", np.asarray(self.theta_H, dtype=float))
        if not 0.0 < self.p_correct <= 1.0:
            raise ValueError("p_correct must lie in (0, 1]")
        if self.epsilon_g <= 0 or self.intent_radius <= 0:
            raise ValueError("epsilon_g and intent_radius must be positive")


@dataclass(frozen=True)
class CorrectionEvent:
    direction: np.ndarray  # entries in {-1, 0, +1} for the sign oracle
    step_index: int


def maybe_correct(
    config: OracleConfig,
    plan: Trajectory,
    problem: BarrierProblem,
    rng: np.random.Generator,
    step_index: int = 0,
) -> CorrectionEvent | None:
    """Emit a sign correction when the plan nears the intended boundary.

    No event is emitted when the plan is comfortably safe (margin gate),
    already unsafe under the intended parameter (the environment resets
    instead), the probability draw fails, or the gradient block is exactly
    zero (a sign correction would carry no information).
    """
    truth_problem = replace(problem, theta=config.theta_H)
    g_truth = truth_problem.constraint.value(config.theta_H, plan)
    if g_truth >= 0 or g_truth <= -config.epsilon_g:
        return None
    if rng.random() >= config.p_correct:
        return None
    m = plan.controls.shape[1]
    grad = barrier_gradient(truth_problem, plan)
    direction = np.sign(-grad[:m])
    if not np.any(direction):
        return None
    return CorrectionEvent(direction=direction, step_index=step_index)


def is_converged(config: OracleConfig, theta: np.ndarray) -> bool:
    """Inside the (closed) intent ball around the intended parameter."""
    return float(np.linalg.norm(np.asarray(theta, dtype=float) - config.theta_H)) <= config.intent_radius


class SignGradientOracle:
    """Correction source driven by the intended parameter's descent sign."""

    def __init__(self, config: OracleConfig):
        self.config = config
        self.rng = np.random.default_rng(config.rng_seed)
        self.theta_H = config.theta_H

    def poll(self, plan: Trajectory, problem: BarrierProblem, step_index: int) -> CorrectionEvent | None:
        return maybe_correct(self.config, plan, problem, self.rng, step_index)

    def is_converged(self, theta: np.ndarray) -> bool:
        return is_converged(self.config, theta)

    def satisfied(self) -> bool:
        return False


class NeverCorrects:
    """A source that never corrects and reports satisfaction after a budget
    of polled steps; exercises the no-op path of the learning loop."""

    def __init__(self, satisfied_after: int = 50):
        self.satisfied_after = satisfied_after
        self.polled = 0
        self.theta_H = None

    def poll(self, plan, problem, step_index) -> CorrectionEvent | None:
        self.polled += 1
        return None

    def is_converged(self, theta) -> bool:
        return False

    def satisfied(self) -> bool:
        return self.polled >= self.satisfied_after


class ClearanceCorrector:
    """Scripted corrector for the planar gate task.

    Watches the plan for positions that enter the wall band outside the
    opening and pushes the robot toward the opening center along the
    vertical axis (the keyboard analog of "up"/"down").  Convergence is
    declared once the learned zero-level contour blocks the wall while
    keeping the opening corridor negative.
    """

    def __init__(
        self,
        env,
        approach_margin: float = 0.8,
        opening_inset: float = 0.3,
        plan_window: int = 10,
        cooldown_steps: int = 2,
        p_correct: float = 1.0,
        rng_seed: int = 0,
    ):
        self.env = env
        self.approach_margin = approach_margin
        self.opening_inset = opening_inset
        self.plan_window = plan_window
        self.cooldown_steps = cooldown_steps
        self.p_correct = p_correct
        self.rng = np.random.default_rng(rng_seed)
        self.theta_H = None
        self._last_step: int | None = None
        self._theta_ok_cache: tuple[bytes, bool] | None = None

    def poll(self, plan: Trajectory, problem: BarrierProblem, step_index: int) -> CorrectionEvent | None:
        # human-like pacing: react only to imminent crossings and leave a
        # few control steps between key presses
        if self._last_step is not None and 0 <= step_index - self._last_step < self.cooldown_steps:
            return None
        env = self.env
        band = env.wall_half_width + self.approach_margin
        lo = env.opening[0] + self.opening_inset
        hi = env.opening[1] - self.opening_inset
        wall_lo, wall_hi = env.wall_y_range
        center = 0.5 * (env.opening[0] + env.opening[1])
        for pos in plan.states[1 : 1 + self.plan_window, :2]:
            on_wall = wall_lo - self.opening_inset <= pos[1] <= wall_hi + self.opening_inset
            if abs(pos[0] - env.gate_x) <= band and on_wall and not (lo < pos[1] < hi):
                if self.p_correct < 1.0 and self.rng.random() >= self.p_correct:
                    return None
                # push toward the nearest clear passage: the opening, or
                # around the closer end of the wall
                y = pos[1]
                d_open = (env.opening[0] - y) if y < env.opening[0] else (y - env.opening[1])
                d_low = y - wall_lo
                d_high = wall_hi - y
                if d_low < min(d_open, d_high):
                    sign = -1.0
                elif d_high < min(d_open, d_low):
                    sign = 1.0
                else:
                    sign = 1.0 if y <= center else -1.0
                direction = np.array([0.0, sign])
                self._last_step = step_index
                return CorrectionEvent(direction=direction, step_index=step_index)
        return None

    def is_converged(self, theta: np.ndarray) -> bool:
        key = np.asarray(theta, dtype=float).tobytes()
        if self._theta_ok_cache is not None and self._theta_ok_cache[0] == key:
            return self._theta_ok_cache[1]
        ok = contour_blocks_wall(self.env, theta)
        self._theta_ok_cache = (key, ok)
        return ok

    def satisfied(self) -> bool:
        return False


def gate_check_points(env, samples: int = 9, inset_frac: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Wall-interior and opening-corridor probe points on the gate line."""
    lo, hi = env.opening
    wall_min, wall_max = env.wall_y_range
    margin = inset_frac * (hi - lo)
    wall_lo = np.linspace(wall_min + margin, lo - margin, samples)
    wall_hi = np.linspace(hi + margin, wall_max - margin, samples)
    wall = np.column_stack([np.full(2 * samples, env.gate_x), np.concatenate([wall_lo, wall_hi])])
    corridor_y = np.linspace(lo + margin, hi - margin, samples)
    corridor = np.column_stack([np.full(samples, env.gate_x), corridor_y])
    return wall, corridor


def contour_blocks_wall(env, theta: np.ndarray) -> bool:
    """True when the pointwise constraint is positive across the wall and
    negative along the opening corridor."""
    wall, corridor = gate_check_points(env)
    pointwise = env.constraint.pointwise
    if not all(pointwise(theta, p) > 0 for p in wall):
        return False
    return all(pointwise(theta, p) < 0 for p in corridor)
