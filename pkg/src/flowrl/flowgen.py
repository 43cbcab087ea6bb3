"""Conditional flow-matching policy over flattened trajectory latents.

The velocity field is a two-hidden-layer SiLU perceptron on
``[x_t, time features, condition]``. Data sits at t=0 and noise at t=1
(``x_t = (1 - t) x0 + t x1``), so sampling integrates from t = 1 - delta down to
t = delta. Gradients are hand-derived; every public loss returns ``(value, grad)``
with ``grad`` laid out like ``PolicyParams.theta``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envgen import Maze, NavScene
from .errors import ArtifactIOError, FormatError, InvalidArgument, NumericError

T_MIN = 1e-3
TIME_FREQS = 8
TIME_DIM = 1 + 2 * TIME_FREQS
LAYOUT_VERSION = 1
CHECKPOINT_MAGIC = b"FLOWRLCK"
SIGMA_CLIP = 10.0
# The network predicts the clean latent; velocity is (x - x0_hat) / max(t, T_FLOOR).
T_FLOOR = 0.05


def time_features(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float).reshape(-1, 1)
    k = np.arange(1, TIME_FREQS + 1) * np.pi
    return np.concatenate([t, np.sin(k * t), np.cos(k * t)], axis=1)


@dataclass
class PolicyParams:
    """MLP weights in one flat float64 vector.

    Layout (row-major blocks, in order): W1 (I, H), b1 (H), W2 (H, H), b2 (H),
    W3 (H, D), b3 (D), where I = D + TIME_DIM + C.
    """

    dim: int
    cond_dim: int
    hidden: int
    theta: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.size(self.dim, self.cond_dim, self.hidden),):
            raise ValueError("theta length does not match layout")

    @staticmethod
    def shapes(dim: int, cond_dim: int, hidden: int) -> list[tuple[int, ...]]:
        i = dim + TIME_DIM + cond_dim
        return [(i, hidden), (hidden,), (hidden, hidden), (hidden,), (hidden, dim), (dim,)]

    @classmethod
    def size(cls, dim: int, cond_dim: int, hidden: int) -> int:
        return sum(int(np.prod(s)) for s in cls.shapes(dim, cond_dim, hidden))

    def unpack(self, theta: np.ndarray | None = None) -> list[np.ndarray]:
        theta = self.theta if theta is None else theta
        out, pos = [], 0
        for shape in self.shapes(self.dim, self.cond_dim, self.hidden):
            n = int(np.prod(shape))
            out.append(theta[pos:pos + n].reshape(shape))
            pos += n
        return out

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.dim, self.cond_dim, self.hidden, np.array(theta, dtype=np.float64))

    def copy(self) -> "PolicyParams":
        return self.with_theta(self.theta.copy())


def init_params(dim: int, cond_dim: int, hidden: int = 128, seed: int = 0, out_scale: float = 0.0) -> PolicyParams:
    """Scaled-Gaussian hidden layers; the output layer starts at ``out_scale`` times its fan-in scale."""
    rng = np.random.default_rng(seed)
    blocks = []
    shapes = PolicyParams.shapes(dim, cond_dim, hidden)
    for k, shape in enumerate(shapes):
        if len(shape) == 1:
            blocks.append(np.zeros(shape))
            continue
        scale = np.sqrt(2.0 / shape[0]) if k < 4 else out_scale / np.sqrt(shape[0])
        blocks.append(rng.standard_normal(shape) * scale)
    return PolicyParams(dim, cond_dim, hidden, np.concatenate([b.ravel() for b in blocks]))


def _silu(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s * (1.0 + z * (1.0 - s))


def velocity(params: PolicyParams, x: np.ndarray, t: np.ndarray, cond: np.ndarray,
             with_cache: bool = False):
    """Batched v_theta(x, t, cond) for ``x`` (N, D), ``t`` (N,), ``cond`` (N, C).

    The perceptron output is a clean-latent estimate u and v = (x - u) / max(t, T_FLOOR).
    Without this the net would have to pass x through its hidden layers with a 1/t gain,
    which a width-H bottleneck cannot do once D approaches H.
    """
    w1, b1, w2, b2, w3, b3 = params.unpack()
    x = np.atleast_2d(x)
    t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
    cond = np.broadcast_to(np.atleast_2d(cond), (len(x), params.cond_dim))
    inp = np.concatenate([x, time_features(t), cond], axis=1)
    h1, d1 = _silu(inp @ w1 + b1)
    h2, d2 = _silu(h1 @ w2 + b2)
    u = h2 @ w3 + b3
    scale = 1.0 / np.maximum(t, T_FLOOR)
    v = (x - u) * scale[:, None]
    if with_cache:
        return v, (inp, h1, d1, h2, d2, scale)
    return v


def velocity_backward(params: PolicyParams, cache, grad_v: np.ndarray) -> np.ndarray:
    """Gradient in theta of sum(grad_v * v)."""
    _, _, w2, _, w3, _ = params.unpack()
    inp, h1, d1, h2, d2, scale = cache
    grad_u = -grad_v * scale[:, None]
    g_w3 = h2.T @ grad_u
    g_b3 = grad_u.sum(axis=0)
    g_z2 = (grad_u @ w3.T) * d2
    g_w2 = h1.T @ g_z2
    g_b2 = g_z2.sum(axis=0)
    g_z1 = (g_z2 @ w2.T) * d1
    g_w1 = inp.T @ g_z1
    g_b1 = g_z1.sum(axis=0)
    return np.concatenate([g.ravel() for g in (g_w1, g_b1, g_w2, g_b2, g_w3, g_b3)])


# --- conditions -------------------------------------------------------------------

NAV_COND_DIM = 16
MAX_OBSTACLES = 3


def maze_cond_dim(cap_h: int, cap_w: int) -> int:
    return 6 * cap_h * cap_w


def encode_maze(maze: Maze, cap_h: int, cap_w: int) -> np.ndarray:
    """Binary per-cell planes over a (cap_h, cap_w) canvas: inside, east wall,
    south wall, trap, start, goal. Boundary edges count as walls."""
    if maze.height > cap_h or maze.width > cap_w:
        raise InvalidArgument(f"maze {maze.width}x{maze.height} exceeds condition capacity {cap_w}x{cap_h}")
    planes = np.zeros((6, cap_h, cap_w))
    h, w = maze.height, maze.width
    planes[0, :h, :w] = 1.0
    planes[1, :h, :w] = 1.0
    planes[1, :h, :w - 1] = maze.east
    planes[2, :h, :w] = 1.0
    planes[2, :h - 1, :w] = maze.south
    for r, c in maze.traps:
        planes[3, r, c] = 1.0
    planes[4][maze.start] = 1.0
    planes[5][maze.goal] = 1.0
    return planes.ravel()


def encode_nav(scene: NavScene, cond_dim: int = NAV_COND_DIM) -> np.ndarray:
    """Start, landmark and up to three obstacles (x, y, r, present), lengths scaled by the room size."""
    if cond_dim < NAV_COND_DIM:
        raise InvalidArgument(f"navigation conditions need cond_dim >= {NAV_COND_DIM}")
    out = np.zeros(cond_dim)
    s = scene.extent
    out[0:2] = scene.start / s
    out[2:4] = scene.landmark / s
    for k, (x, y, r) in enumerate(scene.obstacles[:MAX_OBSTACLES]):
        out[4 + 4 * k: 8 + 4 * k] = (x / s, y / s, r / s, 1.0)
    return out


# --- noise schedule and score -----------------------------------------------------


def sigma_schedule(t, a: float):
    """sigma_t = a * sqrt(t / (1 - t)), capped at 10 a."""
    t_arr = np.asarray(t, dtype=float)
    if np.any((t_arr <= 0.0) | (t_arr >= 1.0)):
        raise InvalidArgument(f"t must lie in (0, 1), got {t}")
    if a < 0:
        raise InvalidArgument(f"noise scale must be >= 0, got {a}")
    sigma = np.minimum(a * np.sqrt(t_arr / (1.0 - t_arr)), SIGMA_CLIP * a)
    return float(sigma) if np.ndim(t) == 0 else sigma


def score_from_velocity(x_t, v, t, t_min: float = T_MIN):
    """Score of p_t implied by a velocity under linear interpolation: -(x_t + (1 - t) v) / t."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < t_min):
        raise InvalidArgument(f"t below t_min={t_min}: score is singular")
    if t_arr.ndim == 1:
        t_arr = t_arr[:, None]
    return -(np.asarray(x_t) + (1.0 - t_arr) * np.asarray(v)) / t_arr


def time_grid(steps: int, delta: float = T_MIN) -> np.ndarray:
    if steps < 2:
        raise InvalidArgument(f"need at least 2 steps, got {steps}")
    return np.linspace(1.0 - delta, delta, steps + 1)


def transition_mean(x, v, t, sigma, dt):
    """Euler-Maruyama mean along the decreasing-t grid: x - dt * (v - sigma^2/2 * score)."""
    t = np.asarray(t, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    dt = np.asarray(dt, dtype=float)
    if t.ndim == 1:
        sigma, dt = sigma[:, None], dt[:, None]
    drift = v - 0.5 * sigma ** 2 * score_from_velocity(x, v, t)
    return x - dt * drift


def mean_velocity_coeff(t, sigma, dt):
    """d(transition_mean)/dv, a per-record scalar."""
    return -dt * (1.0 + 0.5 * sigma ** 2 * (1.0 - t) / t)


# --- rollouts ---------------------------------------------------------------------


@dataclass
class SdeRollout:
    """Per-step records of one SDE trajectory.

    ``dts`` are positive step sizes; the step from ``ts[k]`` goes to ``ts[k] - dts[k]``.
    ``states[k+1] == means[k] + sigmas[k] * sqrt(dts[k]) * noises[k]`` exactly,
    with ``states[S]`` the final sample.
    """

    states: np.ndarray  # (S+1, D)
    means: np.ndarray  # (S, D)
    noises: np.ndarray  # (S, D)
    sigmas: np.ndarray  # (S,)
    dts: np.ndarray  # (S,)
    ts: np.ndarray  # (S,)
    cond: np.ndarray  # (C,)
    grid: np.ndarray  # (S+1,)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def steps(self) -> int:
        return len(self.ts)

    def record(self, k: int) -> "StepRecord":
        return StepRecord(self.states[k], self.states[k + 1], float(self.ts[k]), float(self.sigmas[k]),
                          float(self.dts[k]), self.cond)


@dataclass
class StepRecord:
    state: np.ndarray
    next_state: np.ndarray
    t: float
    sigma: float
    dt: float
    cond: np.ndarray


def _check_finite(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite sampler state", index=step)


def sde_sample_batch(params: PolicyParams, conds: np.ndarray, steps: int, a: float,
                     seeds: list[int]) -> list[SdeRollout]:
    """Independent SDE rollouts for each (cond, seed) pair, integrated in one batch.

    Each member draws its initial state and per-step noise from its own seeded
    generator, so a member's randomness does not depend on the batch it runs in.
    """
    if a < 0:
        raise InvalidArgument(f"noise scale must be >= 0, got {a}")
    grid = time_grid(steps)
    conds = np.atleast_2d(conds)
    n, d = len(seeds), params.dim
    rngs = [np.random.default_rng(s) for s in seeds]
    x = np.stack([r.standard_normal(d) for r in rngs])
    states = np.empty((steps + 1, n, d))
    means = np.empty((steps, n, d))
    noises = np.empty((steps, n, d))
    states[0] = x
    sig = np.array([sigma_schedule(t, a) for t in grid[:-1]])
    dts = grid[:-1] - grid[1:]
    for k in range(steps):
        t = grid[k]
        v = velocity(params, x, np.full(n, t), conds)
        m = transition_mean(x, v, t, sig[k], dts[k])
        eps = np.stack([r.standard_normal(d) for r in rngs])
        x = m + sig[k] * np.sqrt(dts[k]) * eps
        _check_finite(x, k)
        means[k], noises[k], states[k + 1] = m, eps, x
    return [
        SdeRollout(states[:, i].copy(), means[:, i].copy(), noises[:, i].copy(), sig.copy(), dts.copy(),
                   grid[:-1].copy(), conds[i % len(conds)].copy(), grid)
        for i in range(n)
    ]


def sde_sample(params: PolicyParams, cond: np.ndarray, steps: int, a: float, rng_seed: int) -> SdeRollout:
    return sde_sample_batch(params, np.atleast_2d(cond), steps, a, [rng_seed])[0]


def ode_sample(params: PolicyParams, cond: np.ndarray, steps: int, rng_seed: int) -> np.ndarray:
    """Euler integration of dx = v dt from t = 1 - delta to delta; returns the flat latent."""
    grid = time_grid(steps)
    rng = np.random.default_rng(rng_seed)
    x = rng.standard_normal(params.dim)[None]
    cond = np.atleast_2d(cond)
    for k in range(steps):
        t = grid[k]
        v = velocity(params, x, np.full(1, t), cond)
        x = transition_mean(x, v, t, 0.0, grid[k] - grid[k + 1])
        _check_finite(x, k)
    return x[0]


# --- losses -----------------------------------------------------------------------


def fm_loss(params: PolicyParams, x0: np.ndarray, cond: np.ndarray, rng_seed: int,
            delta: float = T_MIN) -> tuple[float, np.ndarray]:
    """Mean squared velocity error over items and dimensions, and its gradient."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if len(x0) == 0:
        raise InvalidArgument("empty batch")
    rng = np.random.default_rng(rng_seed)
    n = len(x0)
    t = rng.uniform(delta, 1.0 - delta, size=n)
    x1 = rng.standard_normal(x0.shape)
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    target = x1 - x0
    v, cache = velocity(params, xt, t, cond, with_cache=True)
    resid = v - target
    per_item = np.mean(resid ** 2, axis=1)
    bad = np.flatnonzero(~np.isfinite(per_item))
    if len(bad):
        raise NumericError("non-finite flow-matching loss", index=int(bad[0]))
    loss = float(per_item.mean())
    grad = velocity_backward(params, cache, 2.0 * resid / resid.size)
    return loss, grad


@dataclass
class StepBatch:
    """Column-stacked transition records for batched log-prob evaluation."""

    states: np.ndarray
    next_states: np.ndarray
    ts: np.ndarray
    sigmas: np.ndarray
    dts: np.ndarray
    conds: np.ndarray

    @classmethod
    def from_rollouts(cls, rollouts: list[SdeRollout]) -> "StepBatch":
        return cls(
            np.concatenate([r.states[:-1] for r in rollouts]),
            np.concatenate([r.states[1:] for r in rollouts]),
            np.concatenate([r.ts for r in rollouts]),
            np.concatenate([r.sigmas for r in rollouts]),
            np.concatenate([r.dts for r in rollouts]),
            np.concatenate([np.repeat(r.cond[None], r.steps, axis=0) for r in rollouts]),
        )

    @classmethod
    def from_records(cls, records: list[StepRecord]) -> "StepBatch":
        return cls(
            np.stack([r.state for r in records]),
            np.stack([r.next_state for r in records]),
            np.array([r.t for r in records]),
            np.array([r.sigma for r in records]),
            np.array([r.dt for r in records]),
            np.stack([r.cond for r in records]),
        )

    def __len__(self) -> int:
        return len(self.ts)

    @property
    def std(self) -> np.ndarray:
        return self.sigmas * np.sqrt(self.dts)


def batch_means(params: PolicyParams, batch: StepBatch, with_cache: bool = False):
    if np.any(batch.std <= 0):
        raise InvalidArgument("transition std is zero; log-probabilities need noise scale a > 0")
    out = velocity(params, batch.states, batch.ts, batch.conds, with_cache=with_cache)
    v, cache = out if with_cache else (out, None)
    m = transition_mean(batch.states, v, batch.ts, batch.sigmas, batch.dts)
    return (m, cache) if with_cache else m


def batch_logprob(params: PolicyParams, batch: StepBatch) -> np.ndarray:
    """Isotropic Gaussian transition log-densities, one per record."""
    m = batch_means(params, batch)
    var = batch.std ** 2
    d = batch.states.shape[1]
    return -0.5 * np.sum((batch.next_states - m) ** 2, axis=1) / var - 0.5 * d * np.log(2 * np.pi * var)


def step_logprob(params: PolicyParams, record: StepRecord) -> tuple[float, np.ndarray]:
    batch = StepBatch.from_records([record])
    m, cache = batch_means(params, batch, with_cache=True)
    var = batch.std ** 2
    d = params.dim
    diff = batch.next_states - m
    logp = float(-0.5 * np.sum(diff ** 2) / var[0] - 0.5 * d * np.log(2 * np.pi * var[0]))
    coeff = mean_velocity_coeff(batch.ts, batch.sigmas, batch.dts)
    grad = velocity_backward(params, cache, diff / var[:, None] * coeff[:, None])
    return logp, grad


# --- checkpoints ------------------------------------------------------------------

_HEADER = struct.Struct("<8sIIIIIQ")


def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    """Header (magic, layout version, D, C, H, TIME_DIM, count) then little-endian float64 theta."""
    header = _HEADER.pack(CHECKPOINT_MAGIC, LAYOUT_VERSION, params.dim, params.cond_dim, params.hidden,
                          TIME_DIM, len(params.theta))
    try:
        Path(path).write_bytes(header + params.theta.astype("<f8").tobytes())
    except OSError as exc:
        raise ArtifactIOError(path, str(exc)) from exc


def load_checkpoint(path: str | Path) -> PolicyParams:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactIOError(path, str(exc)) from exc
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, dim, cond_dim, hidden, tdim, count = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    if version != LAYOUT_VERSION or tdim != TIME_DIM:
        raise FormatError(f"{path}: checkpoint layout version {version} (expected {LAYOUT_VERSION})")
    body = data[_HEADER.size:]
    if len(body) != 8 * count or count != PolicyParams.size(dim, cond_dim, hidden):
        raise FormatError(f"{path}: parameter count mismatch")
    return PolicyParams(dim, cond_dim, hidden, np.frombuffer(body, dtype="<f8").astype(np.float64))
