"""TOML experiment configuration.

A config file has up to six sections. Every key is optional and falls back to
the defaults below; unknown sections or keys are rejected.

.. code-block:: toml

    [environment]
    bounds = [0.0, 0.0, 45.0, 45.0]     # xmin, ymin, xmax, ymax (m)
    start = [1.0, 1.0]
    goal = [40.0, 40.0]
    safety_margin = 1.0
    goal_threshold = 0.5
    obstacles = [{ center = [20.0, 20.0], radius = 2.0 }]
    # or, instead of a fixed list, a seeded random layout:
    # random = { n_obstacles = 10, radius = 2.0, seed = 0 }

    [grid]
    h = 0.25
    horizon = 90.0
    backward_horizon = 0.0
    cfl = 0.4
    oracle = "safety"                   # or "composite"

    [training]                          # TrainConfig fields
    epochs = 500
    lambda_pde = 20.0

    [simulation]                        # SimConfig fields
    controller = "neurohjr"
    sensor_radius = 5.0

    [experiment]
    episodes = 1
    n_runs = 10
    n_obstacles = 10
    obstacle_radius = 2.0
    seed = 0
    radii = [3.0, 5.0, 7.0]
    compare = ["neurohjr", "classical"]
    checkpoint = "runs/train/checkpoint.bin"
    field_dir = "runs/solve"
    solve = true

    [output]
    dir = "runs/demo"
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core import Bounds, Environment, InvalidEnvironment, Obstacle, Position
from .simulator import CONTROLLERS, SimConfig, random_environment
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Malformed or invalid configuration; the message carries a line number when known."""


@dataclass(frozen=True)
class EnvironmentSection:
    bounds: tuple[float, float, float, float] = (0.0, 0.0, 45.0, 45.0)
    start: tuple[float, float] = (1.0, 1.0)
    goal: tuple[float, float] = (40.0, 40.0)
    safety_margin: float = 1.0
    goal_threshold: float = 0.5
    obstacles: tuple[tuple[tuple[float, float], float], ...] = ()
    random: dict | None = None


@dataclass(frozen=True)
class GridSection:
    h: float = 0.25
    horizon: float = 90.0
    backward_horizon: float = 0.0
    cfl: float = 0.4
    oracle: str = "safety"


@dataclass(frozen=True)
class ExperimentSection:
    episodes: int = 1
    n_runs: int = 10
    n_obstacles: int = 10
    obstacle_radius: float = 2.0
    seed: int = 0
    radii: tuple[float, ...] = (3.0, 5.0, 7.0)
    compare: tuple[str, str] = ("neurohjr", "classical")
    checkpoint: str | None = None
    field_dir: str | None = None
    solve: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    environment: EnvironmentSection = field(default_factory=EnvironmentSection)
    grid: GridSection = field(default_factory=GridSection)
    training: TrainConfig = field(default_factory=TrainConfig)
    simulation: SimConfig = field(default_factory=SimConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    output_dir: str = "runs"

    def build_environment(self) -> Environment:
        e = self.environment
        env = Environment(Bounds(*e.bounds), Position(*e.start), Position(*e.goal),
                          tuple(Obstacle(Position(*c), r) for c, r in e.obstacles),
                          e.safety_margin, e.goal_threshold)
        if e.random is not None:
            r = e.random
            env = random_environment(env, int(r.get("n_obstacles", 10)),
                                     float(r.get("radius", 2.0)), int(r.get("seed", 0)))
        return env

    def with_seed(self, seed: int) -> ExperimentConfig:
        """Every seed in the config replaced by ``seed``."""
        env = self.environment
        if env.random is not None:
            env = dataclasses.replace(env, random={**env.random, "seed": seed})
        return dataclasses.replace(
            self, environment=env,
            training=dataclasses.replace(self.training, rng_seed=seed),
            simulation=dataclasses.replace(self.simulation, rng_seed=seed),
            experiment=dataclasses.replace(self.experiment, seed=seed))

    def with_output_dir(self, path: str) -> ExperimentConfig:
        return dataclasses.replace(self, output_dir=str(path))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------- parsing

_SECTIONS = ("environment", "grid", "training", "simulation", "experiment", "output")
_RANDOM_KEYS = ("n_obstacles", "radius", "seed")
_OBSTACLE_KEYS = ("center", "radius")


def _key_line(text: str, section: str | None, key: str | None) -> int | None:
    """Best-effort 1-based line of ``key`` inside ``[section]`` (or of the header)."""
    lines = text.splitlines()
    in_section = section is None
    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]")
    for i, line in enumerate(lines, 1):
        m = header.match(line)
        if m:
            in_section = m.group(1) == section
            if in_section and key is None:
                return i
            continue
        if in_section and key is not None and re.match(rf"^\s*{re.escape(key)}\s*=", line):
            return i
    return None


class _Ctx:
    def __init__(self, text: str, source: str):
        self.text, self.source = text, source

    def fail(self, section, key, msg) -> ConfigError:
        line = _key_line(self.text, section, key)
        where = f"{self.source}:{line}" if line else self.source
        label = f"[{section}]" + (f" {key}" if key else "") if section else key
        return ConfigError(f"{where}: {label}: {msg}")


def _num(ctx, sec, key, v, kind=float):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ctx.fail(sec, key, f"expected a number, got {v!r}")
    if kind is int:
        if isinstance(v, float) and not v.is_integer():
            raise ctx.fail(sec, key, f"expected an integer, got {v!r}")
        return int(v)
    return float(v)


def _vec(ctx, sec, key, v, n):
    if not isinstance(v, list) or len(v) != n:
        raise ctx.fail(sec, key, f"expected a list of {n} numbers, got {v!r}")
    return tuple(_num(ctx, sec, key, x) for x in v)


def _check_keys(ctx, sec, table, allowed):
    if not isinstance(table, dict):
        raise ctx.fail(sec, None, "expected a table")
    for k in table:
        if k not in allowed:
            raise ctx.fail(sec, k, f"unknown key (allowed: {', '.join(allowed)})")


def _coerce_fields(ctx, sec, table, cls):
    """Coerce a table onto a dataclass's fields using the field defaults' types."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    _check_keys(ctx, sec, table, tuple(fields))
    out = {}
    for k, v in table.items():
        default = fields[k].default
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise ctx.fail(sec, k, f"expected true/false, got {v!r}")
            out[k] = v
        elif isinstance(default, int):
            out[k] = _num(ctx, sec, k, v, int)
        elif isinstance(default, float):
            out[k] = _num(ctx, sec, k, v)
        elif isinstance(default, str):
            if not isinstance(v, str):
                raise ctx.fail(sec, k, f"expected a string, got {v!r}")
            out[k] = v
        else:
            out[k] = v
    try:
        return cls(**out)
    except (ValueError, TypeError) as e:
        bad = next((k for k in out if k in str(e)), None)
        raise ctx.fail(sec, bad, str(e)) from None


def _environment(ctx, t) -> EnvironmentSection:
    sec = "environment"
    _check_keys(ctx, sec, t, tuple(f.name for f in dataclasses.fields(EnvironmentSection)))
    kw = {}
    if "bounds" in t:
        kw["bounds"] = _vec(ctx, sec, "bounds", t["bounds"], 4)
    for k in ("start", "goal"):
        if k in t:
            kw[k] = _vec(ctx, sec, k, t[k], 2)
    for k in ("safety_margin", "goal_threshold"):
        if k in t:
            kw[k] = _num(ctx, sec, k, t[k])
    if "obstacles" in t:
        obs = t["obstacles"]
        if not isinstance(obs, list):
            raise ctx.fail(sec, "obstacles", "expected a list of {center, radius} tables")
        parsed = []
        for ob in obs:
            _check_keys(ctx, sec, ob, _OBSTACLE_KEYS)
            if "center" not in ob or "radius" not in ob:
                raise ctx.fail(sec, "obstacles", "each obstacle needs center and radius")
            parsed.append((_vec(ctx, sec, "obstacles", ob["center"], 2),
                           _num(ctx, sec, "obstacles", ob["radius"])))
        kw["obstacles"] = tuple(parsed)
    if "random" in t:
        r = t["random"]
        _check_keys(ctx, sec, r, _RANDOM_KEYS)
        kw["random"] = {
            "n_obstacles": _num(ctx, sec, "random", r.get("n_obstacles", 10), int),
            "radius": _num(ctx, sec, "random", r.get("radius", 2.0)),
            "seed": _num(ctx, sec, "random", r.get("seed", 0), int),
        }
        if kw["random"]["n_obstacles"] < 0 or kw["random"]["radius"] <= 0:
            raise ctx.fail(sec, "random", "n_obstacles must be >= 0 and radius > 0")
    return EnvironmentSection(**kw)


def _grid(ctx, t) -> GridSection:
    g = _coerce_fields(ctx, "grid", t, GridSection)
    if not g.h > 0:
        raise ctx.fail("grid", "h", "must be > 0")
    if g.horizon < 0 or g.backward_horizon < 0:
        raise ctx.fail("grid", "horizon", "horizons must be >= 0")
    if not 0 < g.cfl <= 1:
        raise ctx.fail("grid", "cfl", "must be in (0, 1]")
    if g.oracle not in ("safety", "composite"):
        raise ctx.fail("grid", "oracle", "must be 'safety' or 'composite'")
    return g


def _experiment(ctx, t) -> ExperimentSection:
    sec = "experiment"
    names = tuple(f.name for f in dataclasses.fields(ExperimentSection))
    _check_keys(ctx, sec, t, names)
    kw = {}
    for k in ("episodes", "n_runs", "n_obstacles", "seed"):
        if k in t:
            kw[k] = _num(ctx, sec, k, t[k], int)
    if "obstacle_radius" in t:
        kw["obstacle_radius"] = _num(ctx, sec, "obstacle_radius", t["obstacle_radius"])
    if "radii" in t:
        if not isinstance(t["radii"], list) or not t["radii"]:
            raise ctx.fail(sec, "radii", "expected a nonempty list of radii")
        kw["radii"] = tuple(_num(ctx, sec, "radii", r) for r in t["radii"])
        if any(r <= 0 for r in kw["radii"]):
            raise ctx.fail(sec, "radii", "radii must be > 0")
    if "compare" in t:
        c = t["compare"]
        if not isinstance(c, list) or len(c) != 2 or any(x not in CONTROLLERS for x in c):
            raise ctx.fail(sec, "compare", f"expected two of {CONTROLLERS}")
        kw["compare"] = tuple(c)
    for k in ("checkpoint", "field_dir"):
        if k in t:
            if not isinstance(t[k], str):
                raise ctx.fail(sec, k, "expected a path string")
            kw[k] = t[k]
    if "solve" in t:
        if not isinstance(t["solve"], bool):
            raise ctx.fail(sec, "solve", "expected true/false")
        kw["solve"] = t["solve"]
    e = ExperimentSection(**kw)
    if e.episodes < 1 or e.n_runs < 1:
        raise ctx.fail(sec, "episodes" if e.episodes < 1 else "n_runs", "must be >= 1")
    if e.n_obstacles < 0 or not e.obstacle_radius > 0:
        raise ctx.fail(sec, "n_obstacles", "need n_obstacles >= 0 and obstacle_radius > 0")
    return e


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    ctx = _Ctx(text, source)
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{source}: {e}") from None
    for k in data:
        if k not in _SECTIONS:
            raise ctx.fail(k, None, f"unknown section (allowed: {', '.join(_SECTIONS)})")
    kw = {}
    if "environment" in data:
        kw["environment"] = _environment(ctx, data["environment"])
    if "grid" in data:
        kw["grid"] = _grid(ctx, data["grid"])
    if "training" in data:
        kw["training"] = _coerce_fields(ctx, "training", data["training"], TrainConfig)
    if "simulation" in data:
        kw["simulation"] = _coerce_fields(ctx, "simulation", data["simulation"], SimConfig)
    if "experiment" in data:
        kw["experiment"] = _experiment(ctx, data["experiment"])
    if "output" in data:
        _check_keys(ctx, "output", data["output"], ("dir",))
        d = data["output"].get("dir", "runs")
        if not isinstance(d, str) or not d:
            raise ctx.fail("output", "dir", "expected a nonempty path string")
        kw["output_dir"] = d
    cfg = ExperimentConfig(**kw)
    try:
        cfg.build_environment()
    except InvalidEnvironment as e:
        raise ctx.fail("environment", None, str(e)) from None
    except RuntimeError as e:  # random layout could not be placed
        raise ctx.fail("environment", "random", str(e)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror}") from None
    return parse_config(text, str(path))
