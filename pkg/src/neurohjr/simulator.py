"""Closed-loop episodes, the grid-HJR baseline, Monte Carlo comparison and sensor ablation.

The robot drives straight at the goal (NOMINAL) until a sensed obstacle's
unsafe disk blocks the next ``sensor_radius`` meters of that line; it then
uses the avoidance controller (AVOID) until the line is clear again.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._io import atomic_write_text
from .core import (Control, Environment, InvalidEnvironment, Obstacle, Position,
                   distance, goal_unit_vector, nearest_obstacle)
from .gridhjr import Grid2D, ValueField, goal_arrival_field, lookahead_control
from .neuralnet import MLPParameters, forward_batch

NOMINAL = "NOMINAL"
AVOID = "AVOID"
CONTROLLERS = ("neurohjr", "classical")


class CheckpointMissingError(RuntimeError):
    pass


class EnvironmentGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    sensor_radius: float = 5.0
    max_episode_time: float = 300.0
    controller: str = "neurohjr"
    latency_model: str = "none"
    rng_seed: int = 0
    start_jitter: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not self.sensor_radius > 0:
            raise ValueError("sensor_radius must be > 0")
        if not self.max_episode_time >= self.dt:
            raise ValueError("max_episode_time must be at least dt")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")
        if self.latency_model not in ("none", "measured"):
            raise ValueError("latency_model must be 'none' or 'measured'")
        if self.start_jitter < 0:
            raise ValueError("start_jitter must be >= 0")


@dataclass
class ControllerResources:
    """What the controllers need: a network for neurohjr, an arrival field for classical.

    ``grid``/``horizon``/``cfl`` describe how the classical field is re-solved
    when the latency model charges for it.
    """

    params: MLPParameters | None = None
    arrival: ValueField | None = None
    grid: Grid2D | None = None
    horizon: float = 90.0
    cfl: float = 0.4


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    p: Position
    u: Control
    mode: str
    min_center_distance: float


@dataclass
class EpisodeResult:
    trajectory: list[TrajectorySample]
    reached_goal: bool
    travel_time: float
    path_length: float
    min_clearance: float
    control_compute_time: float
    activations: int = 0
    resolve_times: list[float] = field(default_factory=list)
    control_steps: int = 0

    @property
    def mean_step_compute_time(self) -> float:
        per_step = self.control_compute_time - sum(self.resolve_times)
        return per_step / max(self.control_steps, 1)


# ------------------------------------------------------------------ primitives

def step(p: Position, u: Control, dt: float, bounds=None) -> Position:
    q = Position(p[0] + u[0] * dt, p[1] + u[1] * dt)
    return bounds.clamp(q) if bounds is not None else q


def sense(p: Position, env: Environment, radius: float) -> list[Obstacle]:
    return [ob for ob in env.obstacles if distance(p, ob.center) <= radius]


def point_segment_distance(c, a, b) -> float:
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    L2 = dx * dx + dy * dy
    t = 0.0 if L2 == 0 else min(1.0, max(0.0, ((c[0] - ax) * dx + (c[1] - ay) * dy) / L2))
    return math.hypot(c[0] - (ax + t * dx), c[1] - (ay + t * dy))


def select_mode(p: Position, env: Environment, sensed, current_mode: str = NOMINAL,
                lookahead: float | None = None) -> str:
    """AVOID iff a sensed unsafe disk meets the goal segment within ``lookahead``.

    The decision is memoryless; ``current_mode`` is accepted for interface symmetry.
    """
    if not sensed:
        return NOMINAL
    dg = distance(p, env.goal)
    if dg < 1e-9:
        return NOMINAL
    reach = dg if lookahead is None else min(lookahead, dg)
    ux, uy = (env.goal[0] - p[0]) / dg, (env.goal[1] - p[1]) / dg
    end = (p[0] + reach * ux, p[1] + reach * uy)
    for ob in sensed:
        if point_segment_distance(ob.center, p, end) < env.unsafe_radius(ob):
            return AVOID
    return NOMINAL


def nominal_control(p: Position, env: Environment) -> Control:
    return Control(*goal_unit_vector(p, env))


def neuro_control(params: MLPParameters | None, p: Position) -> Control:
    if params is None:
        raise CheckpointMissingError("neurohjr controller needs a trained checkpoint")
    u = forward_batch(params, p).u[0]
    return Control(float(u[0]), float(u[1]))


def _min_center_distance(p: Position, env: Environment) -> float:
    near = nearest_obstacle(p, env)
    return math.inf if near is None else near[1]


# --------------------------------------------------------------------- episodes

def jittered_start(env: Environment, jitter: float, seed: int) -> Environment:
    if jitter == 0:
        return env
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        off = rng.uniform(-jitter, jitter, size=2)
        start = env.bounds.clamp(Position(env.start[0] + off[0], env.start[1] + off[1]))
        try:
            return env.with_start(start)
        except InvalidEnvironment:
            continue
    raise EnvironmentGenerationError("could not place a jittered start")


def run_episode(env: Environment, cfg: SimConfig,
                resources: ControllerResources) -> EpisodeResult:
    env = jittered_start(env, cfg.start_jitter, cfg.rng_seed)
    measured = cfg.latency_model == "measured"
    classical = cfg.controller == "classical"
    if classical and resources.arrival is None:
        raise CheckpointMissingError("classical controller needs an arrival-time field")
    if not classical and resources.params is None:
        raise CheckpointMissingError("neurohjr controller needs a trained checkpoint")
    arrival = resources.arrival
    clock = time.perf_counter

    p = env.start
    mode = NOMINAL
    traj: list[TrajectorySample] = []
    compute = 0.0
    resolves: list[float] = []
    activations = 0
    control_steps = 0
    path = 0.0
    reached = False
    n_steps = int(math.floor(cfg.max_episode_time / cfg.dt + 1e-9))
    k = 0
    while True:
        t = k * cfg.dt
        dmin = _min_center_distance(p, env)
        if distance(p, env.goal) < env.goal_threshold:
            reached = True
        if reached or k >= n_steps:
            traj.append(TrajectorySample(t, p, Control(0.0, 0.0), mode, dmin))
            break
        new_mode = select_mode(p, env, sense(p, env, cfg.sensor_radius), mode,
                               cfg.sensor_radius)
        if new_mode == AVOID and mode == NOMINAL:
            activations += 1
            if classical and measured:
                t0 = clock()
                arrival = goal_arrival_field(env, resources.grid or arrival.grid,
                                             resources.horizon, resources.cfl)
                resolves.append(clock() - t0)
                compute += resolves[-1]
        mode = new_mode
        t0 = clock()
        if mode == NOMINAL:
            u = nominal_control(p, env)
        elif classical:
            u = lookahead_control(arrival, p)
        else:
            u = neuro_control(resources.params, p)
        if measured:
            compute += clock() - t0
        control_steps += 1
        traj.append(TrajectorySample(t, p, u, mode, dmin))
        q = step(p, u, cfg.dt, env.bounds)
        path += distance(p, q)
        p = q
        k += 1

    travel = traj[-1].t + (compute if measured else 0.0)
    return EpisodeResult(traj, reached, travel, path,
                         min(s.min_center_distance for s in traj),
                         compute, activations, resolves, control_steps)


TRAJECTORY_COLUMNS = ("t", "px", "py", "ux", "uy", "mode", "min_center_distance")


def trajectory_csv(result: EpisodeResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for s in result.trajectory:
        w.writerow([repr(s.t), repr(s.p[0]), repr(s.p[1]), repr(s.u[0]), repr(s.u[1]),
                    s.mode, repr(s.min_center_distance)])
    return buf.getvalue()


def write_trajectory_csv(path, result: EpisodeResult) -> None:
    atomic_write_text(path, trajectory_csv(result))


SUMMARY_COLUMNS = ("run_id", "controller", "travel_time_s", "path_length_m",
                   "min_clearance_m", "reached_goal", "compute_time_s")


def summary_row(run_id, controller: str, r: EpisodeResult) -> dict:
    return {"run_id": run_id, "controller": controller, "travel_time_s": r.travel_time,
            "path_length_m": r.path_length, "min_clearance_m": r.min_clearance,
            "reached_goal": r.reached_goal, "compute_time_s": r.control_compute_time}


def rows_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n",
                       extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


# ---------------------------------------------------------------- Monte Carlo

def random_environment(template: Environment, n_obstacles: int = 10, radius: float = 2.0,
                       seed: int = 0, clearance: float = 2.0,
                       max_tries: int = 10000) -> Environment:
    """Obstacle centers uniform over the workspace, ``clearance`` beyond R_d from start/goal."""
    rng = np.random.default_rng(seed)
    b = template.bounds
    rd = radius + template.safety_margin
    obstacles = []
    tries = 0
    while len(obstacles) < n_obstacles:
        tries += 1
        if tries > max_tries:
            raise EnvironmentGenerationError(
                f"placed {len(obstacles)}/{n_obstacles} obstacles in {max_tries} tries")
        c = Position(*rng.uniform([b.xmin + radius, b.ymin + radius],
                                  [b.xmax - radius, b.ymax - radius]))
        if min(distance(c, template.start), distance(c, template.goal)) < rd + clearance:
            continue
        obstacles.append(Obstacle(c, radius))
    return template.with_obstacles(obstacles)


def _pct_reduction(baseline: float, value: float) -> float:
    return 100.0 * (baseline - value) / baseline if baseline else 0.0


@dataclass
class ComparisonSummary:
    episode_rows: list[dict]
    comparison_rows: list[dict]

    @property
    def mean_travel_time_reduction(self) -> float:
        return float(np.mean([r["travel_time_reduction_pct"] for r in self.comparison_rows]))

    @property
    def mean_path_length_efficiency(self) -> float:
        return float(np.mean([r["path_length_efficiency_pct"] for r in self.comparison_rows]))

    def mean(self, side: str, key: str) -> float:
        return float(np.mean([r[f"{side}_{key}"] for r in self.comparison_rows]))


COMPARISON_COLUMNS = ("run_id", "env_seed", "a_controller", "b_controller",
                      "a_travel_time_s", "b_travel_time_s", "a_path_length_m",
                      "b_path_length_m", "travel_time_reduction_pct",
                      "path_length_efficiency_pct", "a_safety_violation",
                      "b_safety_violation", "a_mean_step_compute_s", "b_mean_resolve_s")


def run_monte_carlo(env_template: Environment, n_runs: int, cfg_pair: tuple[SimConfig, SimConfig],
                    prepare: Callable[[Environment, int], ControllerResources],
                    n_obstacles: int = 10, radius: float = 2.0, seed: int = 0,
                    progress: Callable[[int, dict], None] | None = None) -> ComparisonSummary:
    """Run both configs on ``n_runs`` random environments.

    ``cfg_pair`` is ``(a, b)``; reductions are reported as how much shorter
    ``a`` is than ``b`` in percent of ``b``. ``prepare(env, run_id)`` builds
    the controller resources for one environment.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    a_cfg, b_cfg = cfg_pair
    episodes, comparisons = [], []
    for run in range(n_runs):
        env_seed = seed * 100003 + run
        env = random_environment(env_template, n_obstacles, radius, env_seed)
        res = prepare(env, run)
        ra = run_episode(env, a_cfg, res)
        rb = run_episode(env, b_cfg, res)
        episodes += [summary_row(run, f"a:{a_cfg.controller}", ra),
                     summary_row(run, f"b:{b_cfg.controller}", rb)]
        row = {
            "run_id": run, "env_seed": env_seed,
            "a_controller": a_cfg.controller, "b_controller": b_cfg.controller,
            "a_travel_time_s": ra.travel_time, "b_travel_time_s": rb.travel_time,
            "a_path_length_m": ra.path_length, "b_path_length_m": rb.path_length,
            "travel_time_reduction_pct": _pct_reduction(rb.travel_time, ra.travel_time),
            "path_length_efficiency_pct": _pct_reduction(rb.path_length, ra.path_length),
            "a_safety_violation": _violates(ra, env), "b_safety_violation": _violates(rb, env),
            "a_reached_goal": ra.reached_goal, "b_reached_goal": rb.reached_goal,
            "a_mean_step_compute_s": ra.mean_step_compute_time,
            "b_mean_resolve_s": float(np.mean(rb.resolve_times)) if rb.resolve_times else 0.0,
        }
        comparisons.append(row)
        if progress is not None:
            progress(run, row)
    return ComparisonSummary(episodes, comparisons)


def _violates(r: EpisodeResult, env: Environment) -> bool:
    """True if the trajectory ever came within an obstacle's physical radius."""
    return any(distance(s.p, ob.center) <= ob.radius
               for s in r.trajectory for ob in env.obstacles)


# ---------------------------------------------------------------------- ablation

def run_ablation(env: Environment, radii, cfg: SimConfig,
                 resources: ControllerResources) -> list[dict]:
    if not len(radii):
        raise ValueError("radii must be nonempty")
    rows = []
    for rho in radii:
        c = SimConfig(cfg.dt, float(rho), cfg.max_episode_time, "neurohjr",
                      cfg.latency_model, cfg.rng_seed, cfg.start_jitter)
        r = run_episode(env, c, resources)
        rows.append({"sensor_radius_m": float(rho), "travel_time_s": r.travel_time,
                     "path_length_m": r.path_length, "min_clearance_m": r.min_clearance,
                     "reached_goal": r.reached_goal})
    return rows


ABLATION_COLUMNS = ("sensor_radius_m", "travel_time_s", "path_length_m",
                    "min_clearance_m", "reached_goal")
