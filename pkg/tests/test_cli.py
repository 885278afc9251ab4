import csv
import json
import os

import numpy as np
import pytest

from neurohjr.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main
from neurohjr.config import ConfigError, ExperimentConfig, load_config, parse_config
from neurohjr.gridhjr import read_value_field
from neurohjr.neuralnet import checkpoint_bytes, init_params, load_checkpoint

SMALL = """
[environment]
obstacles = [{ center = [20.0, 20.0], radius = 2.0 }]

[grid]
h = 1.0
horizon = 40.0

[training]
epochs = 1
n_interior = 40
n_boundary = 20
minibatch_size = 32

[simulation]
max_episode_time = 120.0
"""


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def run(*argv):
    return main(["--quiet" if a == "-q" else a for a in argv])


# ----------------------------------------------------------------- config

def test_defaults_and_round_trip():
    cfg = parse_config(SMALL)
    assert cfg.grid.h == 1.0 and cfg.training.epochs == 1
    assert cfg.build_environment().obstacles[0].center == (20.0, 20.0)
    assert cfg.simulation.sensor_radius == 5.0
    assert parse_config(SMALL).digest() == cfg.digest()
    assert ExperimentConfig().training.learning_rate == 1e-3


def test_unknown_key_rejected_with_line_number():
    text = SMALL.replace("epochs = 1", "epochs = 1\nepoks = 2")
    with pytest.raises(ConfigError) as e:
        parse_config(text, "x.toml")
    msg = str(e.value)
    line = text.splitlines().index("epoks = 2") + 1
    assert f"x.toml:{line}:" in msg and "epoks" in msg


def test_unknown_section_and_bad_values():
    with pytest.raises(ConfigError):
        parse_config("[nonsense]\na = 1\n")
    with pytest.raises(ConfigError) as e:
        parse_config("[training]\nepochs = 0\n", "c.toml")
    assert "c.toml:2:" in str(e.value)
    with pytest.raises(ConfigError):
        parse_config("[simulation]\ncontroller = 'teleport'\n")
    with pytest.raises(ConfigError):
        parse_config("[grid]\nh = 'wide'\n")


def test_syntax_error_carries_line(tmp_path):
    path = write(tmp_path, "[grid]\nh = = 1\n")
    with pytest.raises(ConfigError) as e:
        load_config(path)
    assert "line 2" in str(e.value)


def test_seed_override_reaches_every_section():
    cfg = parse_config("[environment]\nrandom = { n_obstacles = 3, radius = 2.0, seed = 1 }\n")
    s = cfg.with_seed(17)
    assert s.training.rng_seed == s.simulation.rng_seed == s.experiment.seed == 17
    assert s.environment.random["seed"] == 17


# ------------------------------------------------------------------ solve

def test_solve_writes_fields_and_manifest(tmp_path):
    cfg = write(tmp_path, SMALL)
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    assert run("solve", "--config", cfg, "--out", out_a, "-q") == EXIT_OK
    assert run("solve", "--config", cfg, "--out", out_b, "-q") == EXIT_OK
    for name in ("forward.txt", "backward.txt", "composite.txt", "oracle.txt"):
        va = read_value_field(os.path.join(out_a, name))
        assert va.values.shape == (46, 46)
        with open(os.path.join(out_a, name), "rb") as fa, \
                open(os.path.join(out_b, name), "rb") as fb:
            assert fa.read() == fb.read()
    m = json.load(open(os.path.join(out_a, "manifest.json")))
    assert m["command"] == "solve" and m["config"]["grid"]["h"] == 1.0
    assert set(m["outputs"]) == {"forward.txt", "backward.txt", "composite.txt", "oracle.txt"}
    assert "solve" in m["timings_s"] and len(m["config_sha256"]) == 64
    assert list(m["inputs"].values())[0] == json.load(
        open(os.path.join(out_b, "manifest.json")))["inputs"][cfg]


def test_malformed_config_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, "[grid]\nh = 1.0\nbogus = 3\n")
    assert run("solve", "--config", cfg, "--out", str(tmp_path / "o")) == EXIT_CONFIG
    assert f"{cfg}:3:" in capsys.readouterr().err


def test_missing_config_file_exit_2(tmp_path):
    assert run("solve", "--config", str(tmp_path / "nope.toml")) == EXIT_CONFIG


def test_cfl_violation_exit_2(tmp_path):
    cfg = write(tmp_path, SMALL.replace("horizon = 40.0", "horizon = 40.0\ncfl = 2.0"))
    assert run("solve", "--config", cfg, "--out", str(tmp_path / "o"), "-q") == EXIT_CONFIG


# ------------------------------------------------------------------ train

def test_train_smoke_and_bitwise_determinism(tmp_path):
    cfg = write(tmp_path, SMALL)
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert run("train", "--config", cfg, "--out", a, "-q") == EXIT_OK
    assert run("train", "--config", cfg, "--out", b, "-q") == EXIT_OK
    rows = read_csv(os.path.join(a, "loss_history.csv"))
    assert len(rows) == 1 and list(rows[0]) == ["epoch", "pde", "value", "obstacle", "goal",
                                               "total"]
    ca = open(os.path.join(a, "checkpoint.bin"), "rb").read()
    assert ca == open(os.path.join(b, "checkpoint.bin"), "rb").read()
    c = str(tmp_path / "c")
    assert run("train", "--config", cfg, "--out", c, "--seed", "5", "-q") == EXIT_OK
    assert open(os.path.join(c, "checkpoint.bin"), "rb").read() != ca


def test_train_uses_solved_fields(tmp_path):
    cfg_solve = write(tmp_path, SMALL)
    fields = str(tmp_path / "fields")
    assert run("solve", "--config", cfg_solve, "--out", fields, "-q") == EXIT_OK
    text = SMALL + f"\n[experiment]\nfield_dir = '{fields}'\nsolve = false\n"
    cfg = write(tmp_path, text, "train.toml")
    out = str(tmp_path / "t")
    assert run("train", "--config", cfg, "--out", out, "-q") == EXIT_OK
    m = json.load(open(os.path.join(out, "manifest.json")))
    assert os.path.join(fields, "oracle.txt") in m["inputs"]
    assert "solve" not in m["timings_s"]


def test_train_missing_field_with_solve_disabled(tmp_path):
    text = SMALL + f"\n[experiment]\nfield_dir = '{tmp_path / 'none'}'\nsolve = false\n"
    cfg = write(tmp_path, text)
    assert run("train", "--config", cfg, "--out", str(tmp_path / "o"), "-q") == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_3(tmp_path, capsys):
    cfg = write(tmp_path, SMALL.replace("epochs = 1", "epochs = 3\nlearning_rate = 1e200"))
    assert run("train", "--config", cfg, "--out", str(tmp_path / "o"), "-q") == EXIT_NUMERICAL
    assert "epoch" in capsys.readouterr().err


# --------------------------------------------------------------- simulate

@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    d = tmp_path_factory.mktemp("ck")
    cfg = write(d, SMALL)
    assert run("train", "--config", cfg, "--out", str(d), "-q") == EXIT_OK
    return str(d / "checkpoint.bin")


def test_simulate_obstacle_free_straight_line(tmp_path, checkpoint):
    text = ("[environment]\ngoal_threshold = 0.1\n[grid]\nh = 1.0\n"
            f"[experiment]\ncheckpoint = '{checkpoint}'\n")
    cfg = write(tmp_path, text)
    out = str(tmp_path / "o")
    assert run("simulate", "--config", cfg, "--out", out, "-q") == EXIT_OK
    traj = read_csv(os.path.join(out, "trajectory_000.csv"))
    assert list(traj[0]) == ["t", "px", "py", "ux", "uy", "mode", "min_center_distance"]
    xy = np.array([[float(r["px"]), float(r["py"])] for r in traj])
    np.testing.assert_allclose(xy[:, 0], xy[:, 1], atol=1e-9)   # start (1,1), goal (40,40)
    assert all(r["mode"] == "NOMINAL" for r in traj)
    summary = read_csv(os.path.join(out, "summary.csv"))
    assert len(summary) == 1 and summary[0]["reached_goal"] == "True"
    assert abs(float(summary[0]["path_length_m"]) - 39 * np.sqrt(2)) <= 0.2


def test_simulate_deterministic(tmp_path, checkpoint):
    text = SMALL + f"\n[experiment]\ncheckpoint = '{checkpoint}'\nepisodes = 2\n"
    cfg = write(tmp_path, text)
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert run("simulate", "--config", cfg, "--out", a, "-q") == EXIT_OK
    assert run("simulate", "--config", cfg, "--out", b, "-q") == EXIT_OK
    for name in ("trajectory_000.csv", "trajectory_001.csv", "summary.csv"):
        assert open(os.path.join(a, name)).read() == open(os.path.join(b, name)).read()


def test_simulate_topology_mismatch_exit_2(tmp_path):
    bad = tmp_path / "small.bin"
    bad.write_bytes(checkpoint_bytes(init_params(0, hidden=16)))
    cfg = write(tmp_path, SMALL)
    assert run("simulate", "--config", cfg, "--checkpoint", str(bad),
               "--out", str(tmp_path / "o"), "-q") == EXIT_CONFIG


def test_simulate_missing_checkpoint_exit_2(tmp_path):
    cfg = write(tmp_path, SMALL)
    assert run("simulate", "--config", cfg, "--checkpoint", str(tmp_path / "none.bin"),
               "--out", str(tmp_path / "o"), "-q") == EXIT_CONFIG


def test_checkpoint_loads(checkpoint):
    params, state = load_checkpoint(checkpoint)
    assert state.step >= 1 and params.hidden == 128


# ---------------------------------------------------------------- compare

def test_compare_identical_controllers(tmp_path, checkpoint):
    text = (SMALL + f"\n[experiment]\ncheckpoint = '{checkpoint}'\nn_runs = 1\n"
            "compare = ['neurohjr', 'neurohjr']\n")
    cfg = write(tmp_path, text)
    out = str(tmp_path / "o")
    assert run("compare", "--config", cfg, "--out", out, "-q") == EXIT_OK
    rows = read_csv(os.path.join(out, "comparison.csv"))
    assert len(rows) == 1
    agg = read_csv(os.path.join(out, "aggregate.csv"))[0]
    assert float(agg["mean_travel_time_reduction_pct"]) == 0.0
    assert float(agg["mean_path_length_efficiency_pct"]) == 0.0
    assert len(read_csv(os.path.join(out, "episodes.csv"))) == 2


def test_compare_against_classical(tmp_path, checkpoint):
    text = SMALL + f"\n[experiment]\ncheckpoint = '{checkpoint}'\nn_runs = 1\n"
    cfg = write(tmp_path, text)
    out = str(tmp_path / "o")
    assert run("compare", "--config", cfg, "--out", out, "-q") == EXIT_OK
    row = read_csv(os.path.join(out, "comparison.csv"))[0]
    assert (row["a_controller"], row["b_controller"]) == ("neurohjr", "classical")


# ----------------------------------------------------------------- ablate

def test_ablate_rows(tmp_path, checkpoint):
    base = SMALL + f"\n[experiment]\ncheckpoint = '{checkpoint}'\n"
    one = write(tmp_path, base + "radii = [5.0]\n", "one.toml")
    out = str(tmp_path / "one")
    assert run("ablate", "--config", one, "--out", out, "-q") == EXIT_OK
    assert len(read_csv(os.path.join(out, "ablation.csv"))) == 1
    default = write(tmp_path, base, "default.toml")
    out = str(tmp_path / "default")
    assert run("ablate", "--config", default, "--out", out, "-q") == EXIT_OK
    rows = read_csv(os.path.join(out, "ablation.csv"))
    assert [float(r["sensor_radius_m"]) for r in rows] == [3.0, 5.0, 7.0]


# -------------------------------------------------------------- checkgrad

def test_checkgrad_passes(tmp_path, capsys):
    out = str(tmp_path / "cg")
    assert run("checkgrad", "--seed", "0", "--out", out) == EXIT_OK
    text = capsys.readouterr().out
    for name in ("pde", "value", "obstacle", "goal", "input_gradient"):
        assert name in text
    assert os.path.exists(os.path.join(out, "checkgrad.txt"))
    assert "checkgrad.txt" in json.load(open(os.path.join(out, "manifest.json")))["outputs"]


def test_checkgrad_corrupted_fails(capsys):
    assert run("checkgrad", "--corrupt", "value", "--seeds", "1") == EXIT_VALIDATION
    assert "FAIL" in capsys.readouterr().out
