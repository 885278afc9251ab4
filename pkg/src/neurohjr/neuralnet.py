"""Two-headed tanh MLP with hand-written first- and second-order backprop.

Topology: 2 -> 128 -> 128 -> 128 (tanh trunk), then a tanh control head
(128 -> 2) and a linear value head (128 -> 1). Raw positions are mapped
affinely from the workspace box to [-1, 1]^2 before the first layer; the
input gradient reported by :func:`input_gradient` includes that scale factor,
so it is in value units per meter.

Weights have shape ``(out, in)`` and layers compute ``h @ W.T + b``.

The PDE loss depends on dV/dx, so its parameter gradient needs the input
gradient pass itself differentiated. :func:`loss_param_gradients` does this by
running the reverse sweep of the input-gradient computation (adjoints for the
deltas ``delta_k`` and the tanh derivatives ``1 - h_k^2``) and then feeding
the resulting activation adjoints into the ordinary backward pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_bytes
from .core import Bounds

HIDDEN = 128
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "Wu", "bu", "Wv", "bv")
MAGIC = b"NHJR1"


class NonFiniteError(FloatingPointError):
    pass


class ShapeMismatchError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def param_shapes(hidden: int = HIDDEN) -> dict[str, tuple[int, ...]]:
    return {
        "W1": (hidden, 2), "b1": (hidden,),
        "W2": (hidden, hidden), "b2": (hidden,),
        "W3": (hidden, hidden), "b3": (hidden,),
        "Wu": (2, hidden), "bu": (2,),
        "Wv": (1, hidden), "bv": (1,),
    }


@dataclass
class MLPParameters:
    """Weights plus the input box used for normalization."""

    tensors: dict[str, np.ndarray]
    lo: np.ndarray = field(default_factory=lambda: np.array([-1.0, -1.0]))
    hi: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if set(self.tensors) != set(PARAM_NAMES):
            raise ShapeMismatchError(f"expected tensors {PARAM_NAMES}")
        shapes = param_shapes(self.hidden)
        for k in PARAM_NAMES:
            if self.tensors[k].shape != shapes[k]:
                raise ShapeMismatchError(f"{k}: shape {self.tensors[k].shape} != {shapes[k]}")

    def __getitem__(self, k):
        return self.tensors[k]

    @property
    def hidden(self) -> int:
        return self.tensors["W1"].shape[0]

    @property
    def scale(self) -> np.ndarray:
        return 2.0 / (self.hi - self.lo)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.lo) * self.scale - 1.0

    def copy(self) -> MLPParameters:
        return MLPParameters({k: v.copy() for k, v in self.tensors.items()},
                             self.lo.copy(), self.hi.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in PARAM_NAMES])

    def from_flat(self, vec: np.ndarray) -> MLPParameters:
        out, i = {}, 0
        for k in PARAM_NAMES:
            n = self.tensors[k].size
            out[k] = np.asarray(vec[i:i + n], dtype=np.float64).reshape(self.tensors[k].shape)
            i += n
        return MLPParameters(out, self.lo.copy(), self.hi.copy())

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def with_bounds(self, bounds: Bounds) -> MLPParameters:
        return MLPParameters(self.tensors, [bounds.xmin, bounds.ymin], [bounds.xmax, bounds.ymax])


def init_params(seed: int, bounds: Bounds | None = None, hidden: int = HIDDEN) -> MLPParameters:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for k, shape in param_shapes(hidden).items():
        if k.startswith("W"):
            fan_out, fan_in = shape
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[k] = rng.uniform(-lim, lim, size=shape)
        else:
            tensors[k] = np.zeros(shape)
    p = MLPParameters(tensors)
    return p.with_bounds(bounds) if bounds is not None else p


def zero_params(bounds: Bounds | None = None, hidden: int = HIDDEN) -> MLPParameters:
    p = MLPParameters({k: np.zeros(s) for k, s in param_shapes(hidden).items()})
    return p.with_bounds(bounds) if bounds is not None else p


# --------------------------------------------------------------------- forward

@dataclass
class ForwardTrace:
    xn: np.ndarray          # normalized inputs (B, 2)
    h1: np.ndarray
    h2: np.ndarray
    h3: np.ndarray
    u: np.ndarray           # (B, 2)
    V: np.ndarray           # (B,)


def _as_batch(p) -> np.ndarray:
    x = np.asarray(p, dtype=np.float64)
    x = x.reshape(1, 2) if x.ndim == 1 else x
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError(f"expected points of shape (n, 2), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite network input")
    return x


def forward_batch(params: MLPParameters, x) -> ForwardTrace:
    x = _as_batch(x)
    P = params.tensors
    xn = params.normalize(x)
    h1 = np.tanh(xn @ P["W1"].T + P["b1"])
    h2 = np.tanh(h1 @ P["W2"].T + P["b2"])
    h3 = np.tanh(h2 @ P["W3"].T + P["b3"])
    u = np.tanh(h3 @ P["Wu"].T + P["bu"])
    V = (h3 @ P["Wv"].T + P["bv"])[:, 0]
    return ForwardTrace(xn, h1, h2, h3, u, V)


def forward(params: MLPParameters, p):
    """Single point: ``((u_x, u_y), V, trace)``."""
    tr = forward_batch(params, p)
    return (float(tr.u[0, 0]), float(tr.u[0, 1])), float(tr.V[0]), tr


@dataclass
class _GradTrace:
    d1: np.ndarray          # 1 - h_k^2
    d2: np.ndarray
    d3: np.ndarray
    delta1: np.ndarray      # dV/dz_k
    delta2: np.ndarray
    delta3: np.ndarray
    a1: np.ndarray          # dV/dh_k
    a2: np.ndarray
    g: np.ndarray           # dV/d(normalized input), (B, 2)


def _input_grad_trace(params: MLPParameters, tr: ForwardTrace) -> _GradTrace:
    P = params.tensors
    d1, d2, d3 = 1 - tr.h1 ** 2, 1 - tr.h2 ** 2, 1 - tr.h3 ** 2
    delta3 = P["Wv"][0] * d3
    a2 = delta3 @ P["W3"]
    delta2 = a2 * d2
    a1 = delta2 @ P["W2"]
    delta1 = a1 * d1
    g = delta1 @ P["W1"]
    return _GradTrace(d1, d2, d3, delta1, delta2, delta3, a1, a2, g)


def input_gradient_batch(params: MLPParameters, x) -> np.ndarray:
    tr = forward_batch(params, x)
    return _input_grad_trace(params, tr).g * params.scale


def input_gradient(params: MLPParameters, p) -> tuple[float, float]:
    g = input_gradient_batch(params, p)[0]
    return float(g[0]), float(g[1])


# ----------------------------------------------------------------------- losses

@dataclass(frozen=True)
class LossSpec:
    """Loss weights; a zero weight drops the term from gradients."""

    pde: float = 1.0
    value: float = 1.0
    obstacle: float = 1.0
    goal: float = 1.0
    residual_mode: str = "predicted-control"

    def __post_init__(self):
        if self.residual_mode not in ("predicted-control", "analytic-hamiltonian"):
            raise ValueError(f"unknown residual_mode {self.residual_mode!r}")
        for k in ("pde", "value", "obstacle", "goal"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be >= 0")


@dataclass
class Batch:
    """Points with their value targets and geometry needed by the losses."""

    x: np.ndarray                # (B, 2) raw positions
    targets: np.ndarray          # (B,) oracle values
    goal_dirs: np.ndarray        # (B, 2) unit vectors toward the goal
    obstacle_violation: np.ndarray  # (B,) max(0, R_d - d) to the nearest obstacle

    def __len__(self):
        return len(self.x)


def pde_residual(g_raw: np.ndarray, u: np.ndarray, mode: str) -> np.ndarray:
    if mode == "predicted-control":
        return np.sum(g_raw * u, axis=1)
    return -np.sum(np.abs(g_raw), axis=1)


def loss_terms(params: MLPParameters, batch: Batch, mode: str = "predicted-control") -> dict:
    if len(batch) == 0:
        raise ValueError("empty batch")
    tr = forward_batch(params, batch.x)
    g_raw = _input_grad_trace(params, tr).g * params.scale
    r = pde_residual(g_raw, tr.u, mode)
    return {
        "pde": float(np.mean(r ** 2)),
        "value": float(np.mean((tr.V - batch.targets) ** 2)),
        "obstacle": float(np.mean(batch.obstacle_violation ** 2)),
        "goal": float(-np.mean(np.sum(tr.u * batch.goal_dirs, axis=1))),
    }


def weighted_total(terms: dict, spec: LossSpec) -> float:
    return (spec.pde * terms["pde"] + spec.value * terms["value"]
            + spec.obstacle * terms["obstacle"] + spec.goal * terms["goal"])


def loss_param_gradients(params: MLPParameters, batch: Batch, spec: LossSpec,
                         return_terms: bool = False):
    """Gradient of the weighted total loss with respect to every parameter tensor."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    P = params.tensors
    tr = forward_batch(params, batch.x)
    gt = _input_grad_trace(params, tr)
    s = params.scale
    g_raw = gt.g * s

    # adjoints of the network outputs u, V and of the normalized input gradient g
    dV = spec.value * 2.0 * (tr.V - batch.targets) / n
    du = -spec.goal * batch.goal_dirs / n
    dg = None
    r = pde_residual(g_raw, tr.u, spec.residual_mode)
    if spec.pde:
        dr = spec.pde * 2.0 * r / n
        if spec.residual_mode == "predicted-control":
            du = du + dr[:, None] * g_raw
            dg = dr[:, None] * tr.u * s
        else:
            dg = dr[:, None] * (-np.sign(g_raw)) * s

    G = params.zeros_like()
    hbar1 = np.zeros_like(tr.h1)
    hbar2 = np.zeros_like(tr.h2)
    hbar3 = np.zeros_like(tr.h3)

    if dg is not None:
        # reverse sweep through g = delta1 W1, delta_k = a_k * d_k, a_{k-1} = delta_k W_k
        G["W1"] += gt.delta1.T @ dg
        ddelta1 = dg @ P["W1"].T
        da1 = ddelta1 * gt.d1
        hbar1 += -2.0 * tr.h1 * (ddelta1 * gt.a1)
        G["W2"] += gt.delta2.T @ da1
        ddelta2 = da1 @ P["W2"].T
        da2 = ddelta2 * gt.d2
        hbar2 += -2.0 * tr.h2 * (ddelta2 * gt.a2)
        G["W3"] += gt.delta3.T @ da2
        ddelta3 = da2 @ P["W3"].T
        G["Wv"][0] += np.sum(ddelta3 * gt.d3, axis=0)
        hbar3 += -2.0 * tr.h3 * (ddelta3 * P["Wv"][0])

    # ordinary backward pass for the heads and trunk
    dzu = du * (1 - tr.u ** 2)
    G["Wu"] += dzu.T @ tr.h3
    G["bu"] += dzu.sum(axis=0)
    G["Wv"] += dV[None, :] @ tr.h3
    G["bv"] += np.array([dV.sum()])
    hbar3 += dzu @ P["Wu"] + dV[:, None] * P["Wv"][0]
    dz3 = hbar3 * gt.d3
    G["W3"] += dz3.T @ tr.h2
    G["b3"] += dz3.sum(axis=0)
    hbar2 += dz3 @ P["W3"]
    dz2 = hbar2 * gt.d2
    G["W2"] += dz2.T @ tr.h1
    G["b2"] += dz2.sum(axis=0)
    hbar1 += dz2 @ P["W2"]
    dz1 = hbar1 * gt.d1
    G["W1"] += dz1.T @ tr.xn
    G["b1"] += dz1.sum(axis=0)

    for k, v in G.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite gradient in {k}")
    if return_terms:
        terms = {
            "pde": float(np.mean(r ** 2)),
            "value": float(np.mean((tr.V - batch.targets) ** 2)),
            "obstacle": float(np.mean(batch.obstacle_violation ** 2)),
            "goal": float(-np.mean(np.sum(tr.u * batch.goal_dirs, axis=1))),
        }
        return G, terms
    return G


# ------------------------------------------------------------ gradient checks

PARAM_GRAD_TOL = 1e-4
INPUT_GRAD_TOL = 1e-6
CHECK_COMPONENTS = ("pde", "value", "obstacle", "goal")


@dataclass(frozen=True)
class GradCheck:
    name: str
    max_rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.threshold)


def _rel_err(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_batch(seed: int, size: int, bounds: Bounds) -> Batch:
    rng = np.random.default_rng(seed)
    x = rng.uniform([bounds.xmin, bounds.ymin], [bounds.xmax, bounds.ymax], size=(size, 2))
    dirs = rng.normal(size=(size, 2))
    dirs /= np.hypot(dirs[:, 0], dirs[:, 1])[:, None]
    return Batch(x, rng.normal(size=size), dirs, rng.uniform(0.0, 1.0, size=size))


def check_gradients(seed: int = 0, batch_size: int = 8, n_coords: int = 20,
                    bounds: Bounds | None = None, residual_mode: str = "predicted-control",
                    corrupt: str | None = None) -> list[GradCheck]:
    """Central finite differences against the analytic gradients.

    One entry per loss component (step 1e-5 on ``n_coords`` random parameter
    coordinates) plus one for the input gradient (step 1e-4 on normalized
    inputs). ``corrupt`` names a component whose analytic gradient is
    deliberately perturbed; it exists so callers can test that a broken
    gradient is caught.
    """
    bounds = bounds or Bounds(0.0, 0.0, 45.0, 45.0)
    params = init_params(seed, bounds)
    batch = random_batch(seed + 7919, batch_size, bounds)
    rng = np.random.default_rng(seed + 104729)
    flat = params.flat()
    idx = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    eps = 1e-5
    out = []
    for name in CHECK_COMPONENTS:
        w = {k: float(k == name) for k in CHECK_COMPONENTS}
        spec = LossSpec(**w, residual_mode=residual_mode)
        G = loss_param_gradients(params, batch, spec)
        analytic = np.concatenate([G[k].ravel() for k in PARAM_NAMES])[idx]
        if corrupt == name:
            analytic = analytic * 1.01 + 1e-3
        fd = np.empty(len(idx))
        for j, i in enumerate(idx):
            hi, lo = flat.copy(), flat.copy()
            hi[i] += eps
            lo[i] -= eps
            fp = weighted_total(loss_terms(params.from_flat(hi), batch, residual_mode), spec)
            fm = weighted_total(loss_terms(params.from_flat(lo), batch, residual_mode), spec)
            fd[j] = (fp - fm) / (2 * eps)
        out.append(GradCheck(name, float(np.max(_rel_err(analytic, fd))), PARAM_GRAD_TOL))

    g = input_gradient_batch(params, batch.x)
    if corrupt == "input_gradient":
        g = g * 1.01 + 1e-3
    step = 1e-4
    fd = np.empty_like(g)
    for j in range(2):
        d = np.zeros(2)
        d[j] = step / params.scale[j]
        vp = forward_batch(params, batch.x + d).V
        vm = forward_batch(params, batch.x - d).V
        fd[:, j] = (vp - vm) / (2 * step) * params.scale[j]
    out.append(GradCheck("input_gradient", float(np.max(_rel_err(g, fd))), INPUT_GRAD_TOL))
    return out


# ------------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: MLPParameters, **kw) -> AdamState:
        return cls(params.zeros_like(), params.zeros_like(), **kw)

    def copy(self) -> AdamState:
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()},
                         self.step, self.beta1, self.beta2, self.eps)


def adam_update(params: MLPParameters, grads: dict, state: AdamState, lr: float):
    if not lr >= 0:
        raise ValueError("learning rate must be >= 0")
    for k in PARAM_NAMES:
        if grads[k].shape != params[k].shape or state.m[k].shape != params[k].shape:
            raise ShapeMismatchError(f"shape mismatch for {k}")
    b1, b2, eps = state.beta1, state.beta2, state.eps
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for k in PARAM_NAMES:
        m = b1 * state.m[k] + (1 - b1) * grads[k]
        v = b2 * state.v[k] + (1 - b2) * grads[k] ** 2
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p[k] = params[k] - lr * mhat / (np.sqrt(vhat) + eps)
        new_m[k], new_v[k] = m, v
    return (MLPParameters(new_p, params.lo.copy(), params.hi.copy()),
            AdamState(new_m, new_v, t, b1, b2, eps))


# ------------------------------------------------------------------ checkpoints

def _pack_tensors(tensors: dict) -> bytes:
    return b"".join(np.ascontiguousarray(tensors[k], dtype="<f8").tobytes() for k in PARAM_NAMES)


def checkpoint_bytes(params: MLPParameters, state: AdamState | None = None) -> bytes:
    """Binary checkpoint.

    Layout (little endian): ``NHJR1``; uint32 layer count (6) and uint32 layer
    sizes ``2, H, H, H, 2, 1``; float64 input box ``lo_x lo_y hi_x hi_y``;
    parameters in the order W1 b1 W2 b2 W3 b3 Wu bu Wv bv (weights row-major
    ``(out, in)``); uint64 Adam step; float64 beta1 beta2 eps; first moments
    and second moments in the parameter layout.
    """
    state = state if state is not None else AdamState.zeros(params)
    H = params.hidden
    sizes = (2, H, H, H, 2, 1)
    out = [MAGIC, struct.pack("<I", len(sizes)), struct.pack(f"<{len(sizes)}I", *sizes),
           np.concatenate([params.lo, params.hi]).astype("<f8").tobytes(),
           _pack_tensors(params.tensors),
           struct.pack("<Q", state.step), struct.pack("<3d", state.beta1, state.beta2, state.eps),
           _pack_tensors(state.m), _pack_tensors(state.v)]
    return b"".join(out)


def save_checkpoint(path, params: MLPParameters, state: AdamState | None = None) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params, state))


def parse_checkpoint(data: bytes, hidden: int = HIDDEN) -> tuple[MLPParameters, AdamState]:
    if data[:5] != MAGIC:
        raise CheckpointError("bad magic; not an NHJR1 checkpoint")
    off = 5
    (k,) = struct.unpack_from("<I", data, off)
    off += 4
    if k != 6:
        raise CheckpointError(f"topology mismatch: {k} layer sizes")
    sizes = struct.unpack_from(f"<{k}I", data, off)
    off += 4 * k
    H = sizes[1]
    if sizes != (2, hidden, hidden, hidden, 2, 1):
        raise CheckpointError(f"topology mismatch: layer sizes {sizes}")
    shapes = param_shapes(H)

    def read_f8(n):
        nonlocal off
        if off + 8 * n > len(data):
            raise CheckpointError("truncated checkpoint")
        a = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        return a

    def read_tensors():
        return {name: read_f8(int(np.prod(shapes[name]))).reshape(shapes[name])
                for name in PARAM_NAMES}

    box = read_f8(4)
    params = MLPParameters(read_tensors(), box[:2], box[2:])
    if off + 32 > len(data):
        raise CheckpointError("truncated checkpoint")
    (step,) = struct.unpack_from("<Q", data, off)
    off += 8
    b1, b2, eps = struct.unpack_from("<3d", data, off)
    off += 24
    m, v = read_tensors(), read_tensors()
    if off != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return params, AdamState(m, v, step, b1, b2, eps)


def load_checkpoint(path, hidden: int = HIDDEN) -> tuple[MLPParameters, AdamState]:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read(), hidden)
