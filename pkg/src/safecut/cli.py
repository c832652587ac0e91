"""Batch experiment runner and metrics emitter.

Experiments are declared in a YAML config naming an environment, an
alignment setup and a correction source.  Each seed produces a JSONL trace
(one record per correction plus a header echoing the configuration), and a
run produces an aggregated metrics CSV plus a summary JSON.  A `grid` verb
exports the learned constraint on a rectangular slice for external
plotting, and `summarize` reprints a run directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .alignment import AlignmentConfig, run_alignment, unit_ball_volume
from .envs import build_environment
from .errors import ConfigError, SafecutError, UnsupportedSlice
from .oracle import ClearanceCorrector, NeverCorrects, OracleConfig, SignGradientOracle
from .trajopt import SolverOptions

_ENV_KEYS = {"id", "overrides"}
_ALIGNMENT_KEYS = {
    "c_l",
    "c_h",
    "rho_H",
    "gamma",
    "epsilon_misspec",
    "mve_gap_tol",
    "average_burst",
    "max_env_steps",
    "max_steps_per_episode",
    "overrun_factor",
}
_SOLVER_KEYS = {"max_iterations", "gradient_tolerance", "line_search_shrink", "initial_step", "memory"}
_CORRECTOR_KEYS = {
    "kind",
    "theta_H",
    "intent_radius",
    "epsilon_g",
    "p_correct",
    "approach_margin",
    "opening_inset",
    "plan_window",
    "cooldown_steps",
    "satisfied_after",
}
_SESSION_KEYS = {"control_rate_hz", "key_map", "contour_resolution"}
_TOP_KEYS = {"environment", "alignment", "solver", "corrector", "session", "seeds", "output_dir"}

_ORACLE_SEED_OFFSET = 1_000_003


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ConfigError(f"missing required key '{key}' in {where}")
    return mapping[key]


def _reject_unknown(mapping: dict, allowed: set, where: str):
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}; allowed: {sorted(allowed)}")


def load_config(path: str | Path) -> dict:
    """Parse and validate an experiment config; raises ConfigError."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _reject_unknown(raw, _TOP_KEYS, "config root")

    env = _require(raw, "environment", "config root")
    _reject_unknown(env, _ENV_KEYS, "environment")
    _require(env, "id", "environment")

    align = _require(raw, "alignment", "config root")
    _reject_unknown(align, _ALIGNMENT_KEYS, "alignment")
    for key in ("c_l", "c_h", "rho_H", "gamma"):
        _require(align, key, "alignment")

    corr = _require(raw, "corrector", "config root")
    _reject_unknown(corr, _CORRECTOR_KEYS, "corrector")
    kind = _require(corr, "kind", "corrector")
    if kind not in ("oracle", "clearance", "never", "interactive"):
        raise ConfigError(f"unknown corrector kind {kind!r}")
    if kind == "oracle":
        _require(corr, "theta_H", "corrector")

    if "solver" in raw:
        _reject_unknown(raw["solver"], _SOLVER_KEYS, "solver")
    if "session" in raw:
        _reject_unknown(raw["session"], _SESSION_KEYS, "session")
    seeds = raw.get("seeds", [])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a list of integers")
    return raw


def _broadcast_bounds(value, dim: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.size == 1:
        return np.full(dim, arr[0])
    if arr.size != dim:
        raise ConfigError(f"bound has {arr.size} entries, environment constraint has dim {dim}")
    return arr


def build_run(config: dict, seed: int, no_noise: bool = False):
    """Instantiate (environment, corrector, AlignmentConfig) for one seed."""
    overrides = dict(config["environment"].get("overrides") or {})
    if no_noise:
        overrides["noise_enabled"] = False
    env = build_environment(config["environment"]["id"], overrides)

    align = config["alignment"]
    r = env.constraint.dim
    solver = SolverOptions(**config.get("solver", {}))
    alignment_config = AlignmentConfig(
        c_l=_broadcast_bounds(align["c_l"], r),
        c_h=_broadcast_bounds(align["c_h"], r),
        rho_H=float(align["rho_H"]),
        gamma=float(align["gamma"]),
        epsilon_misspec=float(align.get("epsilon_misspec", 0.05)),
        rng_seed=seed,
        solver=solver,
        mve_gap_tol=float(align.get("mve_gap_tol", 1e-11)),
        average_burst=bool(align.get("average_burst", False)),
        max_env_steps=int(align.get("max_env_steps", 200_000)),
        max_steps_per_episode=int(align.get("max_steps_per_episode", 2_000)),
        overrun_factor=float(align.get("overrun_factor", 2.0)),
    )

    corr = config["corrector"]
    kind = corr["kind"]
    if kind == "oracle":
        corrector = SignGradientOracle(
            OracleConfig(
                theta_H=np.asarray(corr["theta_H"], dtype=float),
                intent_radius=float(corr.get("intent_radius", 0.02)),
                epsilon_g=float(corr.get("epsilon_g", 0.25)),
                p_correct=float(corr.get("p_correct", 0.3)),
                rng_seed=seed + _ORACLE_SEED_OFFSET,
            )
        )
    elif kind == "clearance":
        corrector = ClearanceCorrector(
            env,
            approach_margin=float(corr.get("approach_margin", 0.8)),
            opening_inset=float(corr.get("opening_inset", 0.3)),
            plan_window=int(corr.get("plan_window", 10)),
            cooldown_steps=int(corr.get("cooldown_steps", 2)),
            p_correct=float(corr.get("p_correct", 1.0)),
            rng_seed=seed + _ORACLE_SEED_OFFSET,
        )
    elif kind == "never":
        corrector = NeverCorrects(satisfied_after=int(corr.get("satisfied_after", 50)))
    else:
        raise ConfigError("interactive corrector cannot run in batch mode; use the session service")
    return env, corrector, alignment_config


METRIC_COLUMNS = ("seed", "iteration", "log_det_H", "distance_to_truth", "area_2d", "wall_time_ms")


def run_experiment(
    config_path: str | Path,
    seeds: list[int] | None = None,
    out: str | Path | None = None,
    no_noise: bool = False,
    deterministic_check: bool = False,
) -> dict:
    """Run every seed of an experiment config and write artifacts.

    Returns the summary dict (also written to summary.json).
    """
    config = load_config(config_path)
    seeds = config.get("seeds", []) if seeds is None else seeds
    out_dir = Path(out) if out is not None else Path(config.get("output_dir", "runs/experiment"))
    out_dir.mkdir(parents=True, exist_ok=True)

    rows: list[dict] = []
    per_seed = []
    theta_dim = None
    for seed in seeds:
        env, corrector, acfg = build_run(config, seed, no_noise=no_noise)
        t0 = time.perf_counter()
        outcome, state = run_alignment(env, corrector, acfg)
        elapsed = time.perf_counter() - t0
        theta_dim = state.theta.size
        _write_trace(out_dir / f"trace_seed{seed}.jsonl", config, seed, state)
        if deterministic_check:
            env2, corrector2, acfg2 = build_run(config, seed, no_noise=no_noise)
            _, state2 = run_alignment(env2, corrector2, acfg2)
            a = [r.to_json_dict() for r in state.trace]
            b = [r.to_json_dict() for r in state2.trace]
            for d in a + b:
                d.pop("wall_time_ms")
            if a != b:
                raise SafecutError(f"seed {seed} is not deterministic")
        for record in state.trace:
            row = {
                "seed": seed,
                "iteration": record.iteration,
                "log_det_H": record.log_det_H,
                "distance_to_truth": record.distance_to_truth,
                "area_2d": record.area_2d,
                "wall_time_ms": record.wall_time_ms,
            }
            for i, v in enumerate(record.theta):
                row[f"theta_{i}"] = float(v)
            rows.append(row)
        per_seed.append(
            {
                "seed": seed,
                "outcome": outcome.kind,
                "corrections_used": outcome.corrections_used,
                "budget": state.budget,
                "final_theta": [float(v) for v in outcome.final_theta],
                "success": outcome.kind in ("converged", "satisfied_by_human"),
                "elapsed_s": elapsed,
                "stats": outcome.stats,
            }
        )

    _write_metrics_csv(out_dir / "metrics.csv", rows, theta_dim or 0)
    summary = {
        "config": str(config_path),
        "environment": config["environment"]["id"],
        "seeds": per_seed,
        "all_succeeded": all(s["success"] for s in per_seed) if per_seed else True,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _write_trace(path: Path, config: dict, seed: int, state) -> None:
    header = {
        "type": "header",
        "seed": seed,
        "budget": state.budget,
        "unit_ball_volume": unit_ball_volume(state.theta.size),
        "config": config,
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for record in state.trace:
            fh.write(json.dumps({"type": "record", **record.to_json_dict()}) + "\n")


def _write_metrics_csv(path: Path, rows: list[dict], theta_dim: int) -> None:
    columns = list(METRIC_COLUMNS[:3]) + [f"theta_{i}" for i in range(theta_dim)] + list(METRIC_COLUMNS[3:])
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k, "")) for k in columns})


# -- constraint grid export ---------------------------------------------------


def parse_grid_spec(spec: str) -> list[tuple[str, float, float, int]]:
    """Parse 'x=0:6:121,y=0:6:121' into named ranged axes."""
    axes = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise UnsupportedSlice(f"malformed axis {part!r}; expected name=lo:hi:n")
        name, rng = part.split("=", 1)
        pieces = rng.split(":")
        if len(pieces) != 3:
            raise UnsupportedSlice(f"malformed range {rng!r}; expected lo:hi:n")
        lo, hi, n = float(pieces[0]), float(pieces[1]), int(pieces[2])
        if hi <= lo:
            raise UnsupportedSlice(f"axis {name!r} has reversed or empty range {lo}:{hi}")
        if n < 2:
            raise UnsupportedSlice(f"axis {name!r} needs at least 2 samples")
        axes.append((name.strip(), lo, hi, n))
    if len(axes) != 2:
        raise UnsupportedSlice(f"grid export needs exactly 2 ranged axes, got {len(axes)}")
    return axes


def export_constraint_grid(theta: np.ndarray, constraint, grid_spec: str, out_path: str | Path) -> dict:
    """Evaluate the pointwise constraint on a rectangular grid.

    Writes JSON containing both axes, the value grid (rows follow the first
    axis) and the boolean mask of the nonpositive region.
    """
    axes = parse_grid_spec(grid_spec)
    (name_a, lo_a, hi_a, n_a), (name_b, lo_b, hi_b, n_b) = axes
    av = np.linspace(lo_a, hi_a, n_a)
    bv = np.linspace(lo_b, hi_b, n_b)
    theta = np.asarray(theta, dtype=float)
    values = np.empty((n_a, n_b))
    for i, a in enumerate(av):
        for j, b in enumerate(bv):
            values[i, j] = constraint.pointwise(theta, np.array([a, b]))
    # a cell belongs to the zero level when its corner values change sign
    nonpos = values <= 0.0
    crossing = np.zeros_like(nonpos)
    crossing[:-1, :] |= nonpos[:-1, :] != nonpos[1:, :]
    crossing[1:, :] |= nonpos[:-1, :] != nonpos[1:, :]
    crossing[:, :-1] |= nonpos[:, :-1] != nonpos[:, 1:]
    crossing[:, 1:] |= nonpos[:, :-1] != nonpos[:, 1:]
    payload = {
        "axes": [
            {"name": name_a, "values": av.tolist()},
            {"name": name_b, "values": bv.tolist()},
        ],
        "theta": theta.tolist(),
        "values": values.tolist(),
        "safe_mask": nonpos.tolist(),
        "zero_level_mask": crossing.tolist(),
    }
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(payload))
    return payload


def grid_from_trace(trace_path: str | Path, grid_spec: str, out_path: str | Path) -> dict:
    """Rebuild the environment echoed in a trace header and export the grid
    for the final learned parameter."""
    trace_path = Path(trace_path)
    lines = [json.loads(line) for line in trace_path.read_text().splitlines() if line.strip()]
    if not lines or lines[0].get("type") != "header":
        raise ConfigError(f"{trace_path} is not a trace file (missing header)")
    header = lines[0]
    records = [l for l in lines[1:] if l.get("type") == "record"]
    config = header["config"]
    env = build_environment(config["environment"]["id"], config["environment"].get("overrides") or {})
    if records:
        theta = np.asarray(records[-1]["theta"], dtype=float)
    else:
        r = env.constraint.dim
        from .alignment import initial_state, AlignmentConfig as AC

        acfg = AC(
            c_l=_broadcast_bounds(config["alignment"]["c_l"], r),
            c_h=_broadcast_bounds(config["alignment"]["c_h"], r),
            rho_H=float(config["alignment"]["rho_H"]),
            gamma=float(config["alignment"]["gamma"]),
        )
        theta = initial_state(acfg, r).theta
    return export_constraint_grid(theta, env.constraint, grid_spec, out_path)


def summarize_directory(directory: str | Path) -> list[str]:
    """Human-readable per-seed outcome lines for every summary in a tree."""
    directory = Path(directory)
    lines = []
    for summary_path in sorted(directory.rglob("summary.json")):
        data = json.loads(summary_path.read_text())
        lines.append(f"{summary_path.parent.name}: env={data['environment']} all_succeeded={data['all_succeeded']}")
        for seed in data["seeds"]:
            lines.append(
                "  seed %d: %s corrections=%d budget=%d elapsed=%.1fs"
                % (seed["seed"], seed["outcome"], seed["corrections_used"], seed["budget"], seed["elapsed_s"])
            )
    if not lines:
        lines.append(f"no summary.json found under {directory}")
    return lines


# -- entry point ---------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="safecut", description="Constraint-learning experiment runner")
    sub = parser.add_subparsers(dest="verb", required=True)

    run_p = sub.add_parser("run", help="run an experiment config")
    run_p.add_argument("config")
    run_p.add_argument("--seeds", help="comma-separated seed list overriding the config")
    run_p.add_argument("--out", help="output directory override")
    run_p.add_argument("--no-noise", action="store_true", help="disable environment process noise")
    run_p.add_argument(
        "--deterministic-check", action="store_true", help="run each seed twice and compare traces"
    )

    grid_p = sub.add_parser("grid", help="export a constraint grid from a trace")
    grid_p.add_argument("trace")
    grid_p.add_argument("slice", help="two ranged axes, e.g. 'alpha=0:6:121,rate=0:6:121'")
    grid_p.add_argument("--out", default="grid.json")

    sum_p = sub.add_parser("summarize", help="print outcomes for a run directory")
    sum_p.add_argument("directory")

    args = parser.parse_args(argv)
    try:
        if args.verb == "run":
            seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
            summary = run_experiment(
                args.config,
                seeds=seeds,
                out=args.out,
                no_noise=args.no_noise,
                deterministic_check=args.deterministic_check,
            )
            for seed in summary["seeds"]:
                print(f"seed {seed['seed']}: {seed['outcome']} after {seed['corrections_used']} corrections")
            print(f"all_succeeded: {summary['all_succeeded']}")
        elif args.verb == "grid":
            grid_from_trace(args.trace, args.slice, args.out)
            print(f"grid written to {args.out}")
        else:
            for line in summarize_directory(args.directory):
                print(line)
    except (ConfigError, UnsupportedSlice) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SafecutError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
