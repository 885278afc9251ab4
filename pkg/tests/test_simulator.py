import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurohjr.core import (Bounds, Environment, Obstacle, Position, distance, goal_unit_vector,
                           reference_environment)
from neurohjr.gridhjr import Grid2D, goal_arrival_field
from neurohjr.neuralnet import init_params, zero_params
from neurohjr.simulator import (AVOID, NOMINAL, TRAJECTORY_COLUMNS, CheckpointMissingError,
                                ControllerResources, SimConfig, nominal_control, neuro_control,
                                point_segment_distance, random_environment, run_ablation,
                                run_episode, run_monte_carlo, select_mode, sense, step,
                                trajectory_csv)

FREE = reference_environment()
ONE = reference_environment([Obstacle((20.0, 20.0), 2.0)])


@pytest.fixture(scope="module")
def random_net():
    return init_params(4, FREE.bounds)


# ------------------------------------------------------------- primitives

def test_step_examples():
    assert step((1.0, 1.0), (1.0, 0.0), 0.1) == (1.1, 1.0)
    assert step((3.0, 4.0), (0.0, 0.0), 0.1) == (3.0, 4.0)
    assert step((44.95, 10.0), (1.0, 0.0), 0.1, FREE.bounds) == (45.0, 10.0)
    assert step((0.0, 0.0), (-1.0, -1.0), 0.1, FREE.bounds) == (0.0, 0.0)


def test_sense_examples():
    env = reference_environment([Obstacle((14.0, 10.0), 1.0), Obstacle((16.0, 10.0), 1.0)])
    assert sense((10.0, 10.0), env, 5.0) == [env.obstacles[0]]
    assert sense((10.0, 10.0), env, 6.0) == list(env.obstacles)
    assert sense((10.0, 10.0), FREE, 5.0) == []


def test_point_segment_distance():
    assert point_segment_distance((1, 1), (0, 0), (2, 0)) == 1.0
    assert point_segment_distance((3, 0), (0, 0), (2, 0)) == 1.0
    assert point_segment_distance((-3, 4), (0, 0), (2, 0)) == 5.0
    assert point_segment_distance((1, 1), (0, 0), (0, 0)) == math.sqrt(2)


def test_select_mode_examples():
    env = reference_environment([Obstacle((14.0, 14.0), 2.0)])
    p = (14.0 - 4 / math.sqrt(2), 14.0 - 4 / math.sqrt(2))   # obstacle 4 m dead ahead
    assert select_mode(p, env, [], NOMINAL, 5.0) == NOMINAL
    assert select_mode(p, env, sense(p, env, 5.0), NOMINAL, 5.0) == AVOID
    # 4 m away but perpendicular to the goal line: lateral offset 4 > R_d = 3
    q = (14.0 - 4 / math.sqrt(2), 14.0 + 4 / math.sqrt(2))
    assert select_mode(q, env, sense(q, env, 5.0), NOMINAL, 5.0) == NOMINAL


def test_select_mode_ignores_obstacles_beyond_lookahead():
    env = reference_environment([Obstacle((20.0, 20.0), 2.0)])
    p = (20.0 - 6.5 / math.sqrt(2), 20.0 - 6.5 / math.sqrt(2))
    # segment of length 2 ends 4.5 m from the center, outside R_d = 3
    assert select_mode(p, env, env.obstacles, NOMINAL, 2.0) == NOMINAL
    assert select_mode(p, env, env.obstacles, NOMINAL, 5.0) == AVOID


def test_nominal_control_examples():
    env = Environment(Bounds(-10, -10, 10, 10), (0, 0), (3, 4))
    assert nominal_control((0, 0), env) == pytest.approx((0.6, 0.8), abs=1e-15)
    env = Environment(Bounds(-10, -10, 10, 10), (0, 0), (5, 0))
    assert nominal_control((0, 0), env) == (1.0, 0.0)


@given(st.floats(0, 45), st.floats(0, 45))
def test_nominal_control_unit_norm(x, y):
    if distance((x, y), FREE.goal) < 1e-6:
        return
    u = nominal_control((x, y), FREE)
    assert abs(math.hypot(*u) - 1.0) < 1e-12
    assert u == goal_unit_vector((x, y), FREE)


def test_neuro_control_examples(random_net):
    assert neuro_control(zero_params(FREE.bounds), (3.0, 4.0)) == (0.0, 0.0)
    u = neuro_control(random_net, (3.0, 4.0))
    assert max(abs(u[0]), abs(u[1])) < 1
    assert u == neuro_control(random_net, (3.0, 4.0))
    with pytest.raises(CheckpointMissingError):
        neuro_control(None, (3.0, 4.0))


# --------------------------------------------------------------- episodes

@pytest.fixture(scope="module")
def free_arrival():
    g = Grid2D.covering(FREE.bounds, 1.0)
    return g, goal_arrival_field(FREE, g)


@pytest.mark.parametrize("controller", ["neurohjr", "classical"])
def test_obstacle_free_episode_is_a_straight_line(controller, random_net, free_arrival):
    g, arr = free_arrival
    res = ControllerResources(params=random_net, arrival=arr, grid=g)
    # a tight arrival radius, so stopping short stays within the 2 dt tolerance
    env = reference_environment(goal_threshold=0.1)
    r = run_episode(env, SimConfig(controller=controller), res)
    assert r.reached_goal
    assert abs(r.path_length - distance(env.start, env.goal)) <= 2 * 0.1
    assert all(s.mode == NOMINAL for s in r.trajectory)
    assert r.min_clearance == math.inf


def test_episode_timeout_after_one_step(random_net):
    r = run_episode(FREE, SimConfig(max_episode_time=0.1),
                    ControllerResources(params=random_net))
    assert not r.reached_goal
    assert [s.t for s in r.trajectory] == [0.0, 0.1]


def test_missing_resources_raise():
    with pytest.raises(CheckpointMissingError):
        run_episode(FREE, SimConfig(), ControllerResources())
    with pytest.raises(CheckpointMissingError):
        run_episode(FREE, SimConfig(controller="classical"), ControllerResources())


def test_sim_config_validation():
    for bad in (dict(dt=0), dict(sensor_radius=0), dict(max_episode_time=0.05),
                dict(controller="x"), dict(latency_model="y")):
        with pytest.raises(ValueError):
            SimConfig(**bad)


@pytest.fixture(scope="module")
def avoid_episode(random_net):
    # an untrained network still exercises the AVOID branch
    return run_episode(ONE, SimConfig(max_episode_time=60.0),
                       ControllerResources(params=random_net))


def test_episode_invariants(avoid_episode):
    r, b = avoid_episode, ONE.bounds
    ts = [s.t for s in r.trajectory]
    assert all(abs((t1 - t0) - 0.1) < 1e-9 for t0, t1 in zip(ts, ts[1:]))
    assert all(b.xmin <= s.p[0] <= b.xmax and b.ymin <= s.p[1] <= b.ymax
               for s in r.trajectory)
    steps = [distance(a.p, c.p) for a, c in zip(r.trajectory, r.trajectory[1:])]
    assert all(d <= math.sqrt(2) * 0.1 + 1e-12 for d in steps)
    assert r.path_length == pytest.approx(sum(steps), rel=1e-12)
    assert r.min_clearance == min(s.min_center_distance for s in r.trajectory)
    if r.reached_goal:
        assert distance(r.trajectory[-1].p, ONE.goal) < ONE.goal_threshold
    for s in r.trajectory[:-1]:
        if s.mode == NOMINAL:
            assert s.u == goal_unit_vector(s.p, ONE)
    assert any(s.mode == AVOID for s in r.trajectory)


def test_episode_deterministic(random_net, avoid_episode):
    again = run_episode(ONE, SimConfig(max_episode_time=60.0),
                        ControllerResources(params=random_net))
    assert trajectory_csv(again) == trajectory_csv(avoid_episode)


def test_trajectory_csv_header(avoid_episode):
    lines = trajectory_csv(avoid_episode).splitlines()
    assert lines[0] == ",".join(TRAJECTORY_COLUMNS)
    assert len(lines) == len(avoid_episode.trajectory) + 1


def test_start_jitter_is_seeded(random_net):
    res = ControllerResources(params=random_net)
    a = run_episode(FREE, SimConfig(start_jitter=0.5, rng_seed=1, max_episode_time=1), res)
    b = run_episode(FREE, SimConfig(start_jitter=0.5, rng_seed=1, max_episode_time=1), res)
    c = run_episode(FREE, SimConfig(start_jitter=0.5, rng_seed=2, max_episode_time=1), res)
    assert a.trajectory[0].p == b.trajectory[0].p != c.trajectory[0].p
    assert distance(a.trajectory[0].p, FREE.start) <= 0.5 * math.sqrt(2)


def test_measured_latency_adds_compute_time(random_net):
    r = run_episode(FREE, SimConfig(latency_model="measured", max_episode_time=2.0),
                    ControllerResources(params=random_net))
    assert r.control_compute_time > 0
    assert r.travel_time == pytest.approx(r.trajectory[-1].t + r.control_compute_time)


# ------------------------------------------------------------ Monte Carlo

@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_random_environment_keeps_start_and_goal_clear(seed):
    env = random_environment(FREE, 10, 2.0, seed)
    assert len(env.obstacles) == 10
    for ob in env.obstacles:
        assert ob.radius == 2.0
        assert distance(ob.center, env.start) >= 3.0 + 2.0
        assert distance(ob.center, env.goal) >= 3.0 + 2.0
    assert env == random_environment(FREE, 10, 2.0, seed)


def test_monte_carlo_identical_controllers(random_net):
    prep = lambda env, run: ControllerResources(params=random_net)   # noqa: E731
    cfg = SimConfig(max_episode_time=80.0)
    s = run_monte_carlo(FREE, 2, (cfg, cfg), prep)
    assert len(s.comparison_rows) == 2 and len(s.episode_rows) == 4
    assert s.mean_travel_time_reduction == 0.0
    assert s.mean_path_length_efficiency == 0.0
    with pytest.raises(ValueError):
        run_monte_carlo(FREE, 0, (cfg, cfg), prep)


# --------------------------------------------------------------- ablation

def test_ablation_rows(random_net):
    res = ControllerResources(params=random_net)
    cfg = SimConfig(max_episode_time=5.0)
    assert len(run_ablation(ONE, [5.0], cfg, res)) == 1
    rows = run_ablation(ONE, [7.0, 3.0, 5.0], cfg, res)
    assert [r["sensor_radius_m"] for r in rows] == [7.0, 3.0, 5.0]
    with pytest.raises(ValueError):
        run_ablation(ONE, [], cfg, res)


def test_step_displacement_bounded():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = Position(*rng.uniform(0, 45, 2))
        u = rng.uniform(-1, 1, 2)
        assert distance(p, step(p, u, 0.1, FREE.bounds)) <= math.sqrt(2) * 0.1 + 1e-15
