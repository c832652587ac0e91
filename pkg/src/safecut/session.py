"""Interactive alignment service.

One WebSocket connection drives one live environment plus its learning
loop.  The service streams state frames at the control rate; correction
messages are applied atomically between control steps, against exactly the
plan most recently shown to the client, and each one is answered by a
cut_applied (or error) frame before the next state frame.  Emergency stop
and reset act on the robot only; the hypothesis space is never touched by
them.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import os
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import __version__
from .alignment import align_step, check_misspecification, run_alignment  # noqa: F401  (run_alignment re-exported for embedding)
from .cli import build_run, load_config
from .errors import ConfigError, DegenerateCorrection, EmptyHypothesis, SafecutError
from .trajopt import mpc_policy_step, rollout, shifted_warm_start

PROTOCOL_VERSION = 1

DEFAULT_KEY_MAP = {
    "up": (0.0, 1.0),
    "down": (0.0, -1.0),
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
}


def contour_segments(env, theta: np.ndarray, resolution: int = 41) -> list[list[float]]:
    """Zero-level segments of the pointwise constraint over the workspace.

    Plain marching squares on cell edges; returns [x1, y1, x2, y2] rows.
    Environments without a planar workspace yield no contour.
    """
    workspace = getattr(env, "workspace", None)
    if workspace is None:
        return []
    lo, hi = workspace
    xs = np.linspace(lo, hi, resolution)
    ys = np.linspace(lo, hi, resolution)
    values = np.empty((resolution, resolution))
    pointwise = env.constraint.pointwise
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            values[i, j] = pointwise(theta, np.array([x, y]))
    segments: list[list[float]] = []

    def interp(pa, pb, va, vb):
        t = va / (va - vb)
        return pa + t * (pb - pa)

    for i in range(resolution - 1):
        for j in range(resolution - 1):
            corners = (
                (xs[i], ys[j], values[i, j]),
                (xs[i + 1], ys[j], values[i + 1, j]),
                (xs[i + 1], ys[j + 1], values[i + 1, j + 1]),
                (xs[i], ys[j + 1], values[i, j + 1]),
            )
            crossings = []
            for k in range(4):
                xa, ya, va = corners[k]
                xb, yb, vb = corners[(k + 1) % 4]
                if (va <= 0.0) != (vb <= 0.0) and va != vb:
                    t = va / (va - vb)
                    crossings.append((xa + t * (xb - xa), ya + t * (yb - ya)))
            if len(crossings) >= 2:
                (x1, y1), (x2, y2) = crossings[0], crossings[1]
                segments.append([float(x1), float(y1), float(x2), float(y2)])
    return segments


class Session:
    """Sequential loop for one connection; messages are drained at step
    boundaries from the socket."""

    def __init__(self, config: dict, rate_hz: float | None = None):
        seeds = config.get("seeds") or [0]
        run_config = dict(config)
        run_config["corrector"] = {"kind": "never"}
        self.env, _, self.acfg = build_run(run_config, seeds[0])
        session_cfg = config.get("session") or {}
        self.key_map = {k: np.asarray(v, dtype=float) for k, v in (session_cfg.get("key_map") or DEFAULT_KEY_MAP).items()}
        self.rate_hz = float(session_cfg.get("control_rate_hz", 10.0)) if rate_hz is None else rate_hz
        self.contour_resolution = int(session_cfg.get("contour_resolution", 41))
        from .alignment import initial_state

        self.state = initial_state(self.acfg, self.env.constraint.dim)
        self.rng = np.random.default_rng(self.acfg.rng_seed)
        self.env.reset(self.rng)
        self.prev_plan = None
        self.episode_steps = 0
        self.estopped = False
        self.started = False
        self.misspec_checked = False
        self._contour_cache: tuple[bytes, list] | None = None

    # -- message handling ---------------------------------------------------

    def handle(self, message: dict) -> list[dict]:
        """Apply one inbound message; returns outbound frames."""
        mtype = message.get("type")
        if mtype == "start":
            self.started = True
            return []
        if mtype == "reset":
            self.env.reset(self.rng)
            self.prev_plan = None
            self.episode_steps = 0
            self.estopped = False
            return []
        if mtype == "estop":
            self.estopped = True
            self.prev_plan = None
            return []
        if mtype == "satisfied":
            return [self.outcome_frame("satisfied_by_human")]
        if mtype == "correct":
            return self.apply_correction(message)
        return [{"v": PROTOCOL_VERSION, "type": "error", "message": f"unknown message type {mtype!r}"}]

    def apply_correction(self, message: dict) -> list[dict]:
        key = message.get("dir")
        if key not in self.key_map:
            return [{"v": PROTOCOL_VERSION, "type": "error", "message": f"unknown correction key {key!r}"}]
        if self.prev_plan is None:
            return [
                {
                    "v": PROTOCOL_VERSION,
                    "type": "error",
                    "message": "no active plan to correct (start or reset first)",
                }
            ]
        direction = self.key_map[key]
        problem = self.env.problem(self.state.theta, self.acfg.gamma)
        try:
            self.state = align_step(
                self.state,
                self.prev_plan,
                direction,
                problem,
                step_index=self.episode_steps,
                mve_gap_tol=self.acfg.mve_gap_tol,
                iteration_cap=10**9,
            )
        except (DegenerateCorrection, EmptyHypothesis) as exc:
            return [{"v": PROTOCOL_VERSION, "type": "error", "message": str(exc)}]
        record = self.state.trace[-1]
        self.prev_plan = None  # parameter changed; replan before executing
        self._contour_cache = None
        return [
            {
                "v": PROTOCOL_VERSION,
                "type": "cut_applied",
                "iter": self.state.iteration,
                "k_budget": self.state.budget,
                "logdet": record.log_det_H,
                "theta": [float(v) for v in self.state.theta],
                "cut": {
                    "normal": [float(v) for v in self.state.polytope.normals[-2]],
                    "offset": float(self.state.polytope.offsets[-2]),
                    "feasibility_normal": [float(v) for v in self.state.polytope.normals[-1]],
                    "feasibility_offset": float(self.state.polytope.offsets[-1]),
                },
                "dir": key,
            }
        ]

    # -- stepping -------------------------------------------------------------

    def step(self) -> list[dict]:
        """Advance one control step; returns outbound frames."""
        if not self.started or self.estopped:
            return [self.state_frame(plan=None)]
        if self.state.iteration >= self.state.budget - 1 and not self.misspec_checked:
            self.misspec_checked = True
            if check_misspecification(
                self.state.theta, self.acfg.c_l, self.acfg.c_h, self.acfg.epsilon_misspec
            ):
                return [self.outcome_frame("misspecified")]
        problem = self.env.problem(self.state.theta, self.acfg.gamma)
        warm = None
        if self.prev_plan is not None:
            shifted = shifted_warm_start(self.prev_plan)
            if self._feasible(problem, shifted):
                warm = shifted
        if warm is None:
            zeros = np.zeros(self.env.horizon * self.env.dynamics.control_dim)
            if self._feasible(problem, zeros):
                warm = zeros
            else:
                try:
                    warm = self.env.fallback_controls(self.env.state, self.state.theta).reshape(-1)
                except SafecutError:
                    self.env.reset(self.rng)
                    self.prev_plan = None
                    self.episode_steps = 0
                    return [self.state_frame(plan=None, note="emergency reset")]
        try:
            u0, plan = mpc_policy_step(problem, self.env.state, warm, self.acfg.solver)
        except SafecutError as exc:
            return [self.outcome_frame("error", message=str(exc))]
        _, event = self.env.step(u0, self.rng)
        self.episode_steps += 1
        note = None
        if event.kind in ("violated_truth", "reached_target") or self.episode_steps >= self.acfg.max_steps_per_episode:
            note = event.kind
            self.env.reset(self.rng)
            self.prev_plan = None
            self.episode_steps = 0
        else:
            self.prev_plan = plan
        return [self.state_frame(plan=plan, note=note)]

    def _feasible(self, problem, flat) -> bool:
        try:
            traj = rollout(problem.dynamics, self.env.state, flat.reshape(-1, problem.dynamics.control_dim))
        except SafecutError:
            return False
        g = problem.constraint.value(problem.theta, traj)
        return bool(np.isfinite(g) and g < 0)

    # -- frames ----------------------------------------------------------------

    def contour(self) -> list[list[float]]:
        key = self.state.theta.tobytes()
        if self._contour_cache is not None and self._contour_cache[0] == key:
            return self._contour_cache[1]
        segments = contour_segments(self.env, self.state.theta, self.contour_resolution)
        self._contour_cache = (key, segments)
        return segments

    def state_frame(self, plan=None, note: str | None = None) -> dict:
        frame = {
            "v": PROTOCOL_VERSION,
            "type": "state",
            "state": [float(v) for v in self.env.state],
            "plan": [] if plan is None else [[float(p[0]), float(p[1])] for p in plan.states[:, :2]],
            "contour": self.contour(),
            "iter": self.state.iteration,
            "k_budget": self.state.budget,
            "logdet": float(self.state.ellipsoid.log_det),
            "theta": [float(v) for v in self.state.theta],
            "estopped": self.estopped,
        }
        target = getattr(self.env, "target", None)
        if target is not None:
            frame["target"] = [float(v) for v in target]
        if note:
            frame["note"] = note
        return frame

    def outcome_frame(self, kind: str, message: str | None = None) -> dict:
        frame = {
            "v": PROTOCOL_VERSION,
            "type": "outcome",
            "kind": kind,
            "theta": [float(v) for v in self.state.theta],
            "corrections": self.state.iteration,
        }
        if message:
            frame["message"] = message
        return frame


def create_app(config: dict | str | Path, rate_hz: float | None = None) -> FastAPI:
    """Build the service; ``config`` is a parsed dict or a path to YAML."""
    if not isinstance(config, dict):
        config = load_config(config)
    if config.get("corrector", {}).get("kind") != "interactive":
        raise ConfigError("session service requires corrector.kind == 'interactive'")
    app = FastAPI(title="safecut session", version=__version__)
    started_at = time.time()
    app.state.config = config
    app.state.rate_hz = rate_hz

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": __version__, "uptime_s": time.time() - started_at}

    ui_dir = Path(__file__).resolve().parent.parent.parent / "frontend" / "dist"
    if ui_dir.is_dir():  # serve the browser client when it has been built
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    @app.websocket("/session")
    async def session_socket(ws: WebSocket):
        await ws.accept()
        session = Session(config, rate_hz=app.state.rate_hz)
        period = 0.0 if session.rate_hz <= 0 else 1.0 / session.rate_hz
        try:
            closing = False
            while not closing:
                # drain inbound messages at the step boundary
                while True:
                    try:
                        raw = await asyncio.wait_for(ws.receive_text(), timeout=1e-4)
                    except asyncio.TimeoutError:
                        break
                    try:
                        message = json.loads(raw)
                    except json.JSONDecodeError:
                        await ws.send_json(
                            {"v": PROTOCOL_VERSION, "type": "error", "message": "malformed JSON"}
                        )
                        continue
                    for frame in session.handle(message):
                        await ws.send_json(frame)
                        if frame.get("type") == "outcome":
                            closing = True
                    if closing:
                        break
                if closing:
                    break
                for frame in session.step():
                    await ws.send_json(frame)
                    if frame.get("type") == "outcome":
                        closing = True
                if period:
                    await asyncio.sleep(period)
        except WebSocketDisconnect:
            return
        await ws.close()

    return app


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="safecut-serve", description="Interactive alignment service")
    parser.add_argument("--config", required=True, help="experiment config with an interactive corrector")
    parser.add_argument("--bind", default=None, help="host:port (defaults to $SAFECUT_BIND or 127.0.0.1:8000)")
    args = parser.parse_args(argv)
    bind = args.bind or os.environ.get("SAFECUT_BIND", "127.0.0.1:8000")
    host, _, port = bind.partition(":")
    try:
        app = create_app(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}")
        return 2
    import uvicorn

    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8000))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
