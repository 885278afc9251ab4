"""Level-set reachability on a uniform 2D grid.

The dynamics are the holonomic model ``x' = u`` with the box control set
``|u_x|, |u_y| <= 1``, so the Hamiltonian has the closed form
``min_u p.u = -(|p_x| + |p_y|)``.

Fields are stored as ``values[i, j]`` with ``i`` indexing x and ``j`` indexing y.
:func:`solve` marches the value function so that its zero sublevel set (the
reachable set) grows with the horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_text
from .core import Bounds, Control, Environment, Position, obstacle_arrays


class CFLError(ValueError):
    pass


class GridMismatchError(ValueError):
    pass


class OutOfBoundsError(ValueError):
    pass


_BOUNDS_TOL = 1e-9


@dataclass(frozen=True)
class Grid2D:
    origin: Position
    h: float
    nx: int
    ny: int

    def __post_init__(self):
        object.__setattr__(self, "origin", Position(*map(float, self.origin)))
        if not self.h > 0:
            raise ValueError("grid spacing must be positive")
        if self.nx < 3 or self.ny < 3:
            raise ValueError("grid needs at least 3 nodes per axis")

    @classmethod
    def covering(cls, bounds: Bounds, h: float) -> Grid2D:
        nx = int(math.ceil(bounds.width / h - 1e-9)) + 1
        ny = int(math.ceil(bounds.height / h - 1e-9)) + 1
        return cls(Position(bounds.xmin, bounds.ymin), h, max(nx, 3), max(ny, 3))

    @classmethod
    def with_nodes(cls, bounds: Bounds, n: int) -> Grid2D:
        """Square-cell grid with ``n`` nodes along the wider axis."""
        h = max(bounds.width, bounds.height) / (n - 1)
        return cls.covering(bounds, h)

    @property
    def xs(self) -> np.ndarray:
        return self.origin.px + self.h * np.arange(self.nx)

    @property
    def ys(self) -> np.ndarray:
        return self.origin.py + self.h * np.arange(self.ny)

    @property
    def xmax(self) -> float:
        return self.origin.px + self.h * (self.nx - 1)

    @property
    def ymax(self) -> float:
        return self.origin.py + self.h * (self.ny - 1)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xs, self.ys, indexing="ij")

    def covers(self, bounds: Bounds) -> bool:
        return (self.origin.px <= bounds.xmin + _BOUNDS_TOL
                and self.origin.py <= bounds.ymin + _BOUNDS_TOL
                and self.xmax >= bounds.xmax - _BOUNDS_TOL
                and self.ymax >= bounds.ymax - _BOUNDS_TOL)


@dataclass(frozen=True)
class ValueField:
    grid: Grid2D
    values: np.ndarray
    time_label: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.nx, self.grid.ny):
            raise GridMismatchError(
                f"values shape {values.shape} != grid ({self.grid.nx}, {self.grid.ny})")
        if not np.all(np.isfinite(values)):
            raise ValueError("value field contains non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def with_values(self, values, time_label=None) -> ValueField:
        return ValueField(self.grid, values,
                          self.time_label if time_label is None else time_label)


# ---------------------------------------------------------------- initial data

def _far_value(grid: Grid2D) -> float:
    # stand-in for +inf so fields stay finite
    return 2.0 * math.hypot(grid.xmax - grid.origin.px, grid.ymax - grid.origin.py)


def point_distance_field(grid: Grid2D, point: Position, radius: float = 0.0,
                         time_label: float = 0.0) -> ValueField:
    X, Y = grid.mesh()
    return ValueField(grid, np.hypot(X - point[0], Y - point[1]) - radius, time_label)


def init_forward(env: Environment, grid: Grid2D) -> ValueField:
    """Distance from every node to the start position."""
    return point_distance_field(grid, env.start)


def obstacle_signed_distance(env: Environment, grid: Grid2D, obstacles=None) -> np.ndarray:
    centers, radii = obstacle_arrays(env if obstacles is None else env.with_obstacles(obstacles))
    if len(radii) == 0:
        return np.full((grid.nx, grid.ny), _far_value(grid))
    X, Y = grid.mesh()
    d = np.hypot(X[..., None] - centers[:, 0], Y[..., None] - centers[:, 1]) - radii
    return d.min(axis=-1)


def init_backward(env: Environment, grid: Grid2D) -> ValueField:
    """Signed distance to the union of inflated obstacle disks, negative inside.

    Without obstacles the field is a large positive constant.
    """
    return ValueField(grid, obstacle_signed_distance(env, grid))


# ------------------------------------------------------------------ stepping

def hamiltonian(px_grad, py_grad):
    """Closed-form ``min_{u in [-1,1]^2} p.u``."""
    return -(np.abs(px_grad) + np.abs(py_grad))


def _one_sided_diffs(V: np.ndarray, h: float, axis: int):
    """Forward and backward differences; at the edges both equal the one-sided one."""
    d = np.diff(V, axis=axis) / h
    n = V.shape[axis]
    pad_lo = [(0, 0), (0, 0)]
    pad_lo[axis] = (1, 0)
    pad_hi = [(0, 0), (0, 0)]
    pad_hi[axis] = (0, 1)
    back = np.pad(d, pad_lo, mode="edge")
    fwd = np.pad(d, pad_hi, mode="edge")
    assert back.shape[axis] == n
    return fwd, back


def check_cfl(h: float, dt: float, dissipation=(1.0, 1.0)) -> None:
    ax, ay = dissipation
    if ax < 1.0 or ay < 1.0:
        raise CFLError(f"dissipation {dissipation} below the Hamiltonian's Lipschitz bound 1")
    if dt < 0:
        raise CFLError(f"negative time step {dt}")
    limit = h / (ax + ay)
    if dt > limit * (1 + 1e-12):
        raise CFLError(f"dt={dt} violates CFL limit h/(ax+ay)={limit}")


def _lf_numerical_hamiltonian(V, h, dissipation, ham):
    ax, ay = dissipation
    fx, bx = _one_sided_diffs(V, h, 0)
    fy, by = _one_sided_diffs(V, h, 1)
    return (ham(0.5 * (fx + bx), 0.5 * (fy + by))
            - ax * 0.5 * (fx - bx) - ay * 0.5 * (fy - by))


def lax_friedrichs_step(v: ValueField, dt: float, dissipation=(1.0, 1.0),
                        ham=hamiltonian) -> ValueField:
    """One explicit step of ``V_t + H(grad V) = 0`` with Lax-Friedrichs dissipation."""
    check_cfl(v.grid.h, dt, dissipation)
    if dt == 0:
        return v
    V = v.values
    Hn = _lf_numerical_hamiltonian(V, v.grid.h, dissipation, ham)
    return v.with_values(V - dt * Hn, v.time_label + dt)


def _growth_hamiltonian(px_grad, py_grad):
    return -hamiltonian(px_grad, py_grad)


def _time_steps(horizon: float, dt: float):
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if horizon == 0:
        return []
    if dt <= 0:
        raise CFLError("dt must be positive")
    n = int(math.ceil(horizon / dt - 1e-9))
    steps = [dt] * n
    steps[-1] = horizon - dt * (n - 1)
    return steps


def solve(v0: ValueField, horizon: float, dt: float, dissipation=(1.0, 1.0),
          avoid: ValueField | None = None) -> ValueField:
    """March ``v0`` over ``horizon`` seconds in ``ceil(horizon/dt)`` steps.

    The sign convention makes the zero sublevel set grow monotonically. When an
    ``avoid`` field (signed distance, negative inside the unsafe set) is given,
    every step is followed by :func:`composite_value` against it, which keeps
    the growing set out of the unsafe region (reach-avoid).
    """
    check_cfl(v0.grid.h, dt, dissipation)
    if avoid is not None and avoid.grid != v0.grid:
        raise GridMismatchError("avoid field lives on a different grid")
    V = np.array(v0.values)
    h = v0.grid.h
    for step in _time_steps(horizon, dt):
        V = V - step * _lf_numerical_hamiltonian(V, h, dissipation, _growth_hamiltonian)
        if avoid is not None:
            V = np.maximum(V, -avoid.values)
    return ValueField(v0.grid, V, v0.time_label + horizon)


def arrival_time(v0: ValueField, horizon: float, dt: float, dissipation=(1.0, 1.0),
                 avoid: ValueField | None = None) -> ValueField:
    """First time each node enters the zero sublevel set while :func:`solve` runs.

    Crossing times are interpolated linearly within a step. Nodes never reached
    get ``horizon`` plus their final value, so the field keeps increasing into
    unreachable regions.
    """
    check_cfl(v0.grid.h, dt, dissipation)
    V = np.array(v0.values)
    h = v0.grid.h
    T = np.where(V <= 0, 0.0, np.nan)
    t = 0.0
    for step in _time_steps(horizon, dt):
        Vn = V - step * _lf_numerical_hamiltonian(V, h, dissipation, _growth_hamiltonian)
        if avoid is not None:
            Vn = np.maximum(Vn, -avoid.values)
        hit = np.isnan(T) & (Vn <= 0)
        if hit.any():
            frac = V[hit] / (V[hit] - Vn[hit])
            T[hit] = t + step * np.clip(frac, 0.0, 1.0)
        V = Vn
        t += step
    T = np.where(np.isnan(T), horizon + np.maximum(V, 0.0), T)
    return ValueField(v0.grid, T, horizon)


def composite_value(vf: ValueField, vb: ValueField) -> ValueField:
    """Nodewise ``max(vf, -vb)``."""
    if vf.grid != vb.grid:
        raise GridMismatchError("composite of fields on different grids")
    return ValueField(vf.grid, np.maximum(vf.values, -vb.values), vf.time_label)


def default_dt(grid: Grid2D, cfl: float = 0.4, dissipation=(1.0, 1.0)) -> float:
    """Time step ``cfl * h / max(dissipation)``; ``cfl <= 0.5`` keeps unit dissipation stable."""
    return cfl * grid.h / max(dissipation)


# ------------------------------------------------------------------ oracles

@dataclass(frozen=True)
class SolvedFields:
    forward: ValueField
    backward: ValueField
    composite: ValueField
    oracle: ValueField


def safety_oracle(forward: ValueField, backward: ValueField) -> ValueField:
    """Training target ``max(V_F, V_B)``.

    With the forward field solved long enough to cover the workspace this is
    the clearance to the unsafe set outside it and ~0 inside it.
    """
    if forward.grid != backward.grid:
        raise GridMismatchError("oracle of fields on different grids")
    return ValueField(forward.grid, np.maximum(forward.values, backward.values),
                      forward.time_label)


def solve_fields(env: Environment, grid: Grid2D, horizon: float = 90.0,
                 backward_horizon: float = 0.0, cfl: float = 0.4,
                 dissipation=(1.0, 1.0), oracle: str = "safety") -> SolvedFields:
    """Forward, backward, composite and training-oracle fields for ``env``."""
    if not grid.covers(env.bounds):
        raise ValueError("grid does not cover the environment bounds")
    dt = default_dt(grid, cfl, dissipation)
    vf = solve(init_forward(env, grid), horizon, dt, dissipation)
    vb = solve(init_backward(env, grid), backward_horizon, dt, dissipation)
    comp = composite_value(vf, vb)
    if oracle == "safety":
        target = safety_oracle(vf, vb)
    elif oracle == "composite":
        target = comp
    else:
        raise ValueError(f"unknown oracle {oracle!r}")
    return SolvedFields(vf, vb, comp, target)


def goal_arrival_field(env: Environment, grid: Grid2D, horizon: float = 90.0,
                       cfl: float = 0.4, dissipation=(1.0, 1.0),
                       obstacles=None) -> ValueField:
    """Reach-avoid arrival time to the goal disk, used by the grid baseline controller."""
    dt = default_dt(grid, cfl, dissipation)
    target = point_distance_field(grid, env.goal, env.goal_threshold)
    avoid = ValueField(grid, obstacle_signed_distance(env, grid, obstacles))
    return arrival_time(target, horizon, dt, dissipation, avoid=avoid)


# ----------------------------------------------------------- interpolation

def _check_inside(grid: Grid2D, x: np.ndarray, y: np.ndarray) -> None:
    bad = ((x < grid.origin.px - _BOUNDS_TOL) | (x > grid.xmax + _BOUNDS_TOL)
           | (y < grid.origin.py - _BOUNDS_TOL) | (y > grid.ymax + _BOUNDS_TOL)
           | ~np.isfinite(x) | ~np.isfinite(y))
    if np.any(bad):
        i = int(np.flatnonzero(np.atleast_1d(bad))[0])
        raise OutOfBoundsError(
            f"point ({np.atleast_1d(x)[i]}, {np.atleast_1d(y)[i]}) outside grid")


def sample_values(v: ValueField, points) -> np.ndarray:
    """Bilinear interpolation at an (n, 2) array of points."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    g = v.grid
    x, y = pts[:, 0], pts[:, 1]
    _check_inside(g, x, y)
    fx = np.clip((x - g.origin.px) / g.h, 0, g.nx - 1)
    fy = np.clip((y - g.origin.py) / g.h, 0, g.ny - 1)
    i = np.minimum(np.floor(fx).astype(int), g.nx - 2)
    j = np.minimum(np.floor(fy).astype(int), g.ny - 2)
    tx, ty = fx - i, fy - j
    V = v.values
    return ((1 - tx) * (1 - ty) * V[i, j] + tx * (1 - ty) * V[i + 1, j]
            + (1 - tx) * ty * V[i, j + 1] + tx * ty * V[i + 1, j + 1])


def sample_value(v: ValueField, p: Position) -> float:
    return float(sample_values(v, [p])[0])


def field_gradient(v: ValueField, p: Position) -> tuple[float, float]:
    """Central difference of interpolated samples at ``p +- h``, one-sided at the edges."""
    g = v.grid
    _check_inside(g, np.array([p[0]]), np.array([p[1]]))
    out = []
    for axis, (lo, hi) in enumerate(((g.origin.px, g.xmax), (g.origin.py, g.ymax))):
        a = min(max(p[axis] - g.h, lo), hi)
        b = min(max(p[axis] + g.h, lo), hi)
        pa, pb = list(p), list(p)
        pa[axis], pb[axis] = a, b
        va, vb_ = sample_values(v, [pa, pb])
        out.append(float((vb_ - va) / (b - a)))
    return out[0], out[1]


def bang_bang(gx: float, gy: float, deadband: float = 1e-9) -> Control:
    """Minimizer of the linear Hamiltonian over the box: ``u_i = -sign(g_i)``."""
    return Control(0.0 if abs(gx) < deadband else -math.copysign(1.0, gx),
                   0.0 if abs(gy) < deadband else -math.copysign(1.0, gy))


def classical_control(v: ValueField, p: Position) -> Control:
    return bang_bang(*field_gradient(v, p))


_BOX_CONTROLS = [(ux, uy) for ux in (-1.0, 0.0, 1.0) for uy in (-1.0, 0.0, 1.0)
                 if (ux, uy) != (0.0, 0.0)]


def lookahead_control(v: ValueField, p: Position, reach: float | None = None) -> Control:
    """Box vertex or edge midpoint whose one-step destination has the lowest value.

    Unlike :func:`classical_control` this uses one-sided information, so it
    does not stall where the central gradient averages two descent directions
    (the ridge in front of an obstacle). Ties go to the first candidate in a
    fixed order, and staying put is chosen only if every move increases ``v``.
    """
    g = v.grid
    reach = g.h if reach is None else reach
    cand = np.array([[p[0] + reach * ux, p[1] + reach * uy] for ux, uy in _BOX_CONTROLS])
    cand[:, 0] = np.clip(cand[:, 0], g.origin.px, g.xmax)
    cand[:, 1] = np.clip(cand[:, 1], g.origin.py, g.ymax)
    vals = sample_values(v, cand)
    k = int(np.argmin(vals))
    if vals[k] >= sample_value(v, p):
        return Control(0.0, 0.0)
    return Control(*_BOX_CONTROLS[k])


# --------------------------------------------------------------------- I/O

def write_value_field(path, v: ValueField) -> None:
    """Plain-text export: one header line then ``nx`` rows of ``ny`` values.

    Header: ``nx ny origin_x origin_y h time_label``. Floats use 17 significant
    digits so a read-back is bit exact. The file is written atomically.
    """
    g = v.grid
    lines = [f"{g.nx} {g.ny} {g.origin.px!r} {g.origin.py!r} {g.h!r} {v.time_label!r}"]
    lines += [" ".join(f"{x:.17g}" for x in row) for row in v.values]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_value_field(path) -> ValueField:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 6:
            raise ValueError(f"{path}: malformed value-field header")
        nx, ny = int(header[0]), int(header[1])
        ox, oy, h, t = map(float, header[2:])
        values = np.loadtxt(f, dtype=float, ndmin=2)
    grid = Grid2D(Position(ox, oy), h, nx, ny)
    return ValueField(grid, values.reshape(nx, ny), t)


__all__ = [
    "CFLError", "GridMismatchError", "OutOfBoundsError", "Grid2D", "ValueField",
    "SolvedFields", "init_forward", "init_backward", "point_distance_field",
    "obstacle_signed_distance", "hamiltonian", "check_cfl",
    "lax_friedrichs_step", "solve", "arrival_time", "composite_value",
    "safety_oracle", "solve_fields", "goal_arrival_field", "sample_value",
    "sample_values", "field_gradient", "classical_control", "lookahead_control",
    "bang_bang", "write_value_field", "read_value_field", "default_dt",
]
