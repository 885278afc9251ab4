"""Domain types and planar geometry shared by the solver, trainer and simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class DegenerateInputError(ValueError):
    """Raised when a direction is requested from a point to itself."""


class InvalidEnvironment(ValueError):
    """Raised when an environment violates its construction invariants."""


class Position(NamedTuple):
    px: float
    py: float


class Control(NamedTuple):
    ux: float
    uy: float


@dataclass(frozen=True)
class Bounds:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise InvalidEnvironment(f"degenerate bounds {self}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    def contains(self, p: Position) -> bool:
        return self.xmin <= p[0] <= self.xmax and self.ymin <= p[1] <= self.ymax

    def clamp(self, p: Position) -> Position:
        return Position(min(max(p[0], self.xmin), self.xmax),
                        min(max(p[1], self.ymin), self.ymax))


@dataclass(frozen=True)
class Obstacle:
    center: Position
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", Position(*map(float, self.center)))
        if not self.radius > 0:
            raise InvalidEnvironment(f"obstacle radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class Environment:
    """Workspace, start/goal and circular obstacles.

    The unsafe region of an obstacle is its disk inflated by ``safety_margin``.
    Construction fails if the start or goal lies in any unsafe region.
    """

    bounds: Bounds
    start: Position
    goal: Position
    obstacles: tuple[Obstacle, ...] = field(default_factory=tuple)
    safety_margin: float = 1.0
    goal_threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "start", Position(*map(float, self.start)))
        object.__setattr__(self, "goal", Position(*map(float, self.goal)))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if self.safety_margin < 0:
            raise InvalidEnvironment("safety_margin must be >= 0")
        if not self.goal_threshold > 0:
            raise InvalidEnvironment("goal_threshold must be > 0")
        for name, p in (("start", self.start), ("goal", self.goal)):
            if not self.bounds.contains(p):
                raise InvalidEnvironment(f"{name} {tuple(p)} outside bounds")
        for i, ob in enumerate(self.obstacles):
            if not self.bounds.contains(ob.center):
                raise InvalidEnvironment(f"obstacle {i} center outside bounds")
            rd = self.unsafe_radius(ob)
            for name, p in (("start", self.start), ("goal", self.goal)):
                if distance(p, ob.center) < rd:
                    raise InvalidEnvironment(
                        f"{name} {tuple(p)} lies inside unsafe disk of obstacle {i}")

    def unsafe_radius(self, ob: Obstacle) -> float:
        return ob.radius + self.safety_margin

    def with_start(self, start: Position) -> Environment:
        return Environment(self.bounds, start, self.goal, self.obstacles,
                           self.safety_margin, self.goal_threshold)

    def with_obstacles(self, obstacles) -> Environment:
        return Environment(self.bounds, self.start, self.goal, tuple(obstacles),
                           self.safety_margin, self.goal_threshold)


def distance(p: Position, q: Position) -> float:
    return math.hypot(p[0] - q[0], p[1] - q[1])


def nearest_obstacle(p: Position, env: Environment) -> tuple[Obstacle, float] | None:
    """Obstacle with the closest center, ties going to the lower index."""
    best = None
    for ob in env.obstacles:
        d = distance(p, ob.center)
        if best is None or d < best[1]:
            best = (ob, d)
    return best


def in_unsafe_region(p: Position, env: Environment) -> bool:
    return any(distance(p, ob.center) < env.unsafe_radius(ob) for ob in env.obstacles)


def goal_unit_vector(p: Position, env: Environment) -> tuple[float, float]:
    dx, dy = env.goal[0] - p[0], env.goal[1] - p[1]
    n = math.hypot(dx, dy)
    if n < 1e-9:
        raise DegenerateInputError(f"point {tuple(p)} coincides with the goal")
    return (dx / n, dy / n)


def obstacle_arrays(env: Environment):
    """Obstacle centers as a (k, 2) array and unsafe radii as a (k,) array."""
    centers = np.array([ob.center for ob in env.obstacles], dtype=float).reshape(-1, 2)
    radii = np.array([env.unsafe_radius(ob) for ob in env.obstacles], dtype=float)
    return centers, radii


def reference_environment(obstacles=(), *, safety_margin: float = 1.0,
                      goal_threshold: float = 0.5) -> Environment:
    """45 m x 45 m workspace with start (1, 1) and goal (40, 40)."""
    return Environment(Bounds(0.0, 0.0, 45.0, 45.0), Position(1.0, 1.0),
                       Position(40.0, 40.0), tuple(obstacles), safety_margin,
                       goal_threshold)
