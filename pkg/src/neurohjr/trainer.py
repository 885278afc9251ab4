"""Collocation sampling, the four training losses, and the Adam epoch loop."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ._io import atomic_write_text
from .core import DegenerateInputError, Environment, obstacle_arrays
from .gridhjr import ValueField, sample_values
from .neuralnet import (AdamState, Batch, LossSpec, MLPParameters, NonFiniteError,
                        adam_update, forward_batch, init_params, input_gradient_batch,
                        loss_param_gradients, pde_residual, weighted_total)

log = logging.getLogger(__name__)


class SamplingError(RuntimeError):
    pass


class TrainingDivergence(FloatingPointError):
    def __init__(self, epoch: int, msg: str):
        super().__init__(f"epoch {epoch}: {msg}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10000
    learning_rate: float = 1e-3
    minibatch_size: int = 1024
    lambda_pde: float = 1.0
    lambda_value: float = 1.0
    lambda_obstacle: float = 1.0
    lambda_goal: float = 1.0
    rng_seed: int = 0
    residual_mode: str = "predicted-control"
    n_interior: int = 8000
    n_boundary: int = 5000
    band_width: float = 1.0
    resample: bool = False

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be > 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if self.n_interior < 0 or self.n_boundary < 0 or self.n_interior + self.n_boundary == 0:
            raise ValueError("need at least one collocation point")
        if self.band_width <= 0:
            raise ValueError("band_width must be > 0")
        self.loss_spec()  # validates weights and residual mode

    def loss_spec(self) -> LossSpec:
        return LossSpec(self.lambda_pde, self.lambda_value, self.lambda_obstacle,
                        self.lambda_goal, self.residual_mode)


@dataclass(frozen=True)
class LossBreakdown:
    pde: float
    value: float
    obstacle: float
    goal: float
    total: float


@dataclass
class CollocationSet:
    interior_points: np.ndarray
    boundary_points: np.ndarray
    oracle_values: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return np.concatenate([self.interior_points, self.boundary_points])


# --------------------------------------------------------------------- sampling

def _unsafe_mask(pts: np.ndarray, env: Environment) -> np.ndarray:
    centers, radii = obstacle_arrays(env)
    if len(radii) == 0:
        return np.zeros(len(pts), dtype=bool)
    d = np.hypot(pts[:, None, 0] - centers[:, 0], pts[:, None, 1] - centers[:, 1])
    return np.any(d < radii, axis=1)


def _in_bounds(pts: np.ndarray, env: Environment) -> np.ndarray:
    b = env.bounds
    return ((pts[:, 0] >= b.xmin) & (pts[:, 0] <= b.xmax)
            & (pts[:, 1] >= b.ymin) & (pts[:, 1] <= b.ymax))


def _rejection_sample(count: int, propose, accept, rng) -> np.ndarray:
    out = np.empty((0, 2))
    rejected = 0
    while len(out) < count:
        need = count - len(out)
        cand = propose(rng, max(2 * need, 64))
        ok = accept(cand)
        rejected += int(np.count_nonzero(~ok))
        out = np.concatenate([out, cand[ok][:need]])
        if rejected > 1000 * count:
            raise SamplingError(f"gave up after {rejected} rejections")
    return out


def sample_interior(env: Environment, count: int, rng_seed: int) -> np.ndarray:
    """Uniform points over the workspace outside every unsafe disk."""
    if count == 0:
        return np.empty((0, 2))
    b = env.bounds

    def propose(rng, n):
        return rng.uniform([b.xmin, b.ymin], [b.xmax, b.ymax], size=(n, 2))

    return _rejection_sample(count, propose, lambda p: ~_unsafe_mask(p, env),
                             np.random.default_rng(rng_seed))


def sample_boundary(env: Environment, count: int, rng_seed: int,
                    band_width: float = 1.0) -> np.ndarray:
    """Points in the band ``R_d <= r <= R_d + band_width`` around a random obstacle."""
    if count == 0:
        return np.empty((0, 2))
    centers, radii = obstacle_arrays(env)
    if len(radii) == 0:
        raise SamplingError("boundary sampling needs at least one obstacle")

    def propose(rng, n):
        k = rng.integers(len(radii), size=n)
        theta = rng.uniform(0.0, 2 * np.pi, size=n)
        r = radii[k] + rng.uniform(0.0, band_width, size=n)
        return centers[k] + r[:, None] * np.column_stack([np.cos(theta), np.sin(theta)])

    return _rejection_sample(count, propose,
                             lambda p: _in_bounds(p, env) & ~_unsafe_mask(p, env),
                             np.random.default_rng(rng_seed))


def oracle_targets(points, composite: ValueField) -> np.ndarray:
    return sample_values(composite, points)


def build_collocation(env: Environment, oracle: ValueField, n_interior: int,
                      n_boundary: int, seed: int, band_width: float = 1.0) -> CollocationSet:
    s_int, s_bnd = _child_seeds(seed, "collocation", 2)
    interior = sample_interior(env, n_interior, s_int)
    boundary = (sample_boundary(env, n_boundary, s_bnd, band_width)
                if env.obstacles else np.empty((0, 2)))
    values = oracle_targets(np.concatenate([interior, boundary]), oracle)
    return CollocationSet(interior, boundary, values)


# ----------------------------------------------------------------------- losses

def _goal_dirs(pts: np.ndarray, env: Environment) -> np.ndarray:
    d = np.asarray(env.goal) - pts
    n = np.hypot(d[:, 0], d[:, 1])
    if np.any(n < 1e-9):
        raise DegenerateInputError("collocation point coincides with the goal")
    return d / n[:, None]


def _obstacle_violation(pts: np.ndarray, env: Environment) -> np.ndarray:
    """``max(0, R_d - d)`` with ``d`` the distance to the nearest obstacle center."""
    centers, radii = obstacle_arrays(env)
    if len(radii) == 0:
        return np.zeros(len(pts))
    d = np.hypot(pts[:, None, 0] - centers[:, 0], pts[:, None, 1] - centers[:, 1])
    k = np.argmin(d, axis=1)
    rows = np.arange(len(pts))
    return np.maximum(0.0, radii[k] - d[rows, k])


def make_batch(points, targets, env: Environment) -> Batch:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if len(targets) != len(pts):
        raise ValueError(f"{len(pts)} points but {len(targets)} targets")
    return Batch(pts, targets, _goal_dirs(pts, env), _obstacle_violation(pts, env))


def _points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("empty batch")
    return pts


def loss_pde(params: MLPParameters, points, residual_mode: str = "predicted-control") -> float:
    pts = _points(points)
    u = forward_batch(params, pts).u
    g = input_gradient_batch(params, pts)
    return float(np.mean(pde_residual(g, u, residual_mode) ** 2))


def loss_value(params: MLPParameters, points, targets) -> float:
    pts = _points(points)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if len(targets) != len(pts):
        raise ValueError(f"{len(pts)} points but {len(targets)} targets")
    return float(np.mean((forward_batch(params, pts).V - targets) ** 2))


def loss_obstacle(params: MLPParameters, points, env: Environment) -> float:
    # depends only on the points; params is kept for a uniform signature
    return float(np.mean(_obstacle_violation(_points(points), env) ** 2))


def loss_goal(params: MLPParameters, points, env: Environment) -> float:
    pts = _points(points)
    u = forward_batch(params, pts).u
    return float(-np.mean(np.sum(u * _goal_dirs(pts, env), axis=1)))


def loss_breakdown(params: MLPParameters, points, targets, env: Environment,
                   spec: LossSpec = LossSpec()) -> LossBreakdown:
    pts = _points(points)
    terms = {
        "pde": loss_pde(params, pts, spec.residual_mode),
        "value": loss_value(params, pts, targets),
        "obstacle": loss_obstacle(params, pts, env),
        "goal": loss_goal(params, pts, env),
    }
    return LossBreakdown(**terms, total=weighted_total(terms, spec))


# ------------------------------------------------------------------------ loop

def _child_seeds(seed: int, tag: str, n: int) -> list[int]:
    ss = np.random.SeedSequence([int(seed), sum(map(ord, tag))])
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n)]


@dataclass
class TrainResult:
    params: MLPParameters
    adam: AdamState
    history: list[LossBreakdown]
    collocation: CollocationSet = field(repr=False)


def train(env: Environment, oracle: ValueField, cfg: TrainConfig,
          params: MLPParameters | None = None, callback=None) -> TrainResult:
    """Minibatch Adam over the shuffled union of interior and boundary points.

    Returns the final parameters and one :class:`LossBreakdown` per epoch (the
    point-weighted mean over that epoch's minibatches, measured before each
    update). Fully deterministic for a given ``cfg.rng_seed``.
    """
    spec = cfg.loss_spec()
    if params is None:
        params = init_params(cfg.rng_seed, env.bounds)
    else:
        params = params.with_bounds(env.bounds)
    state = AdamState.zeros(params)
    (shuffle_seed,) = _child_seeds(cfg.rng_seed, "shuffle", 1)
    rng = np.random.default_rng(shuffle_seed)

    colloc = build_collocation(env, oracle, cfg.n_interior, cfg.n_boundary,
                               cfg.rng_seed, cfg.band_width)
    data = make_batch(colloc.points, colloc.oracle_values, env)
    n = len(data)
    history = []
    for epoch in range(cfg.epochs):
        if cfg.resample and epoch > 0:
            colloc = build_collocation(env, oracle, cfg.n_interior, cfg.n_boundary,
                                       cfg.rng_seed + epoch, cfg.band_width)
            data = make_batch(colloc.points, colloc.oracle_values, env)
        perm = rng.permutation(n)
        sums = dict.fromkeys(("pde", "value", "obstacle", "goal"), 0.0)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start:start + cfg.minibatch_size]
            mb = Batch(data.x[idx], data.targets[idx], data.goal_dirs[idx],
                       data.obstacle_violation[idx])
            try:
                grads, terms = loss_param_gradients(params, mb, spec, return_terms=True)
            except NonFiniteError as e:
                raise TrainingDivergence(epoch, str(e)) from e
            for k in sums:
                sums[k] += terms[k] * len(idx)
            params, state = adam_update(params, grads, state, cfg.learning_rate)
        means = {k: v / n for k, v in sums.items()}
        total = weighted_total(means, spec)
        if not np.isfinite(total):
            raise TrainingDivergence(epoch, "non-finite loss")
        history.append(LossBreakdown(**means, total=total))
        if callback is not None:
            callback(epoch, history[-1])
        if epoch % max(1, cfg.epochs // 10) == 0:
            log.debug("epoch %d total %.5g", epoch, total)
    return TrainResult(params, state, history, colloc)


HISTORY_COLUMNS = ("epoch", "pde", "value", "obstacle", "goal", "total")


def history_csv(history: list[LossBreakdown]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for i, row in enumerate(history):
        d = asdict(row)
        w.writerow([i] + [repr(d[k]) for k in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def write_history_csv(path, history: list[LossBreakdown]) -> None:
    atomic_write_text(path, history_csv(history))
