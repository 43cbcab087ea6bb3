"""Verifiable rewards: path-matching game rewards and embedding-level navigation rewards."""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

import numpy as np

from .envgen import CellPath, Maze
from .errors import ConfigError, DegenerateMask, EmptyTrajectory, InvalidArgument
from .render import Video
from .track import extract_trajectory, track_positions

DEFAULT_MF_SAMPLES = 8
DEFAULT_MF_TAU = 25.0
EMBED_DIM = 64
EMBED_GRID = 8
DEFAULT_EPSILON = 1e-8


@dataclass(frozen=True)
class GameRewardWeights:
    alpha: float = 0.3
    beta: float = 0.5
    gamma: float = 0.2

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0 or self.alpha + self.beta + self.gamma <= 0:
            raise InvalidArgument(f"game reward weights must be non-negative with positive sum: {self}")


@dataclass(frozen=True)
class EmbedRewardWeights:
    alpha_emb: float = 0.5
    beta_emb: float = 0.2
    gamma_emb: float = 0.3
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self) -> None:
        w = (self.alpha_emb, self.beta_emb, self.gamma_emb)
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise InvalidArgument(f"embedding reward weights must be non-negative and sum to 1: {w}")
        if self.epsilon <= 0:
            raise InvalidArgument("epsilon must be positive")


@dataclass
class RewardBreakdown:
    components: dict[str, float]
    weights: dict[str, float]
    combined: float
    flags: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def combine(cls, components: dict[str, float], weights: dict[str, float], **flags) -> "RewardBreakdown":
        total = 0.0
        for name, w in weights.items():
            total += w * components[name]
        return cls(dict(components), dict(weights), total, dict(flags))

    def to_dict(self) -> dict:
        return {"components": self.components, "weights": self.weights, "combined": self.combined, **self.flags}


# --- game rewards -------------------------------------------------------------------


def reward_em(pred: CellPath, gt: CellPath) -> int:
    """1 iff the predicted steps equal the optimal path, step for step and in length."""
    if not gt:
        raise InvalidArgument("ground-truth path is empty")
    return int(len(pred) == len(gt) and all(p == g for p, g in zip(pred, gt)))


def reward_pr(pred: CellPath, gt: CellPath) -> float:
    """Fraction of the optimal path matched as an unbroken prefix; steps past the end of
    ``pred`` count as mismatches."""
    if not gt:
        raise InvalidArgument("ground-truth path is empty")
    matched = 0
    for k, g in enumerate(gt):
        if k >= len(pred) or pred[k] != g:
            break
        matched += 1
    return matched / len(gt)


def sample_indices(n_frames: int, count: int) -> np.ndarray:
    if count < 1:
        raise InvalidArgument("sample count must be >= 1")
    return np.unique(np.round(np.linspace(0, n_frames - 1, min(count, n_frames))).astype(int))


def reward_mf(video: Video, canonical_bg: np.ndarray, sample_count: int = DEFAULT_MF_SAMPLES,
              tau: float = DEFAULT_MF_TAU) -> float:
    """Mean over sampled frames of the share of background pixels within ``tau`` of the
    canonical background. Background excludes a disc of radius agent_radius + 1 around
    the tracked agent (nothing is excluded in frames where no agent is found)."""
    if video.frames.shape[1:] != canonical_bg.shape:
        raise InvalidArgument("frame and canonical background dimensions differ")
    idx = sample_indices(len(video), sample_count)
    frames = video.frames[idx]
    geom = video.geometry
    pix, found = _tracked_pixels(video, idx)
    h, w = canonical_bg.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    d2 = (ys[None] - pix[:, 0, None, None]) ** 2 + (xs[None] - pix[:, 1, None, None]) ** 2
    masked = found[:, None, None] & (d2 <= (geom.agent_radius_px + 1.0) ** 2)
    valid = ~masked
    n_valid = valid.sum(axis=(1, 2))
    if np.any(n_valid == 0):
        raise DegenerateMask("no unmasked background pixels in a sampled frame")
    diff = np.abs(frames.astype(np.int16) - canonical_bg.astype(np.int16)[None]).max(axis=-1)
    changed = ((diff > tau) & valid).sum(axis=(1, 2))
    return float(np.mean(1.0 - changed / n_valid))


def _tracked_pixels(video: Video, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    units, found = track_positions(video)
    pix = video.geometry.to_pixel(units[idx])
    return np.nan_to_num(pix), found[idx]


def game_reward_breakdown(pred: CellPath | None, gt: CellPath, video: Video, canonical_bg: np.ndarray,
                          weights: GameRewardWeights = GameRewardWeights(),
                          sample_count: int = DEFAULT_MF_SAMPLES, tau: float = DEFAULT_MF_TAU) -> RewardBreakdown:
    empty = pred is None
    em = 0 if empty else reward_em(pred, gt)
    pr = 0.0 if empty else reward_pr(pred, gt)
    mf = reward_mf(video, canonical_bg, sample_count, tau)
    return RewardBreakdown.combine(
        {"em": float(em), "pr": pr, "mf": mf},
        {"em": weights.alpha, "pr": weights.beta, "mf": weights.gamma},
        empty_trajectory=empty,
    )


def reward_game_combined(pred: CellPath, gt: CellPath, video: Video, weights: GameRewardWeights,
                         canonical_bg: np.ndarray, sample_count: int = DEFAULT_MF_SAMPLES,
                         tau: float = DEFAULT_MF_TAU) -> RewardBreakdown:
    """alpha * EM + beta * PR + gamma * MF."""
    return game_reward_breakdown(pred, gt, video, canonical_bg, weights, sample_count, tau)


# --- embedding rewards -----------------------------------------------------------------


@functools.lru_cache(maxsize=16)
def projection_matrix(embed_seed: int, dim: int = EMBED_DIM) -> np.ndarray:
    """Seeded orthogonal matrix (QR of a Gaussian draw, sign-fixed)."""
    rng = np.random.default_rng(embed_seed)
    g = rng.standard_normal((dim, EMBED_GRID * EMBED_GRID))
    q, r = np.linalg.qr(g.T)
    q = q * np.sign(np.diag(r))
    return q.T


def _pool(gray: np.ndarray) -> np.ndarray:
    """Area-average (..., H, W) down to (..., 8, 8)."""
    h, w = gray.shape[-2:]
    rows = (np.arange(h) * EMBED_GRID // h)[None, :] == np.arange(EMBED_GRID)[:, None]
    cols = (np.arange(w) * EMBED_GRID // w)[None, :] == np.arange(EMBED_GRID)[:, None]
    rows, cols = rows.astype(float), cols.astype(float)
    counts = rows.sum(axis=1)[:, None] * cols.sum(axis=1)[None, :]
    return (rows @ gray @ cols.T) / counts


def _canonical_unit(dim: int = EMBED_DIM) -> np.ndarray:
    e = np.zeros(dim)
    e[0] = 1.0
    return e


def _normalize_rows(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    out = np.where(norms > 0, z / np.where(norms > 0, norms, 1.0), _canonical_unit(z.shape[-1]))
    return out


def embed_frames(frames: np.ndarray, embed_seed: int) -> np.ndarray:
    """Unit-norm embeddings for a stack of frames: 8x8 grayscale area pool, fixed projection, l2 norm."""
    gray = frames.astype(float).mean(axis=-1) / 255.0
    pooled = _pool(gray).reshape(len(frames), -1)
    return _normalize_rows(pooled @ projection_matrix(embed_seed).T)


def embed_frame(frame: np.ndarray, embed_seed: int) -> np.ndarray:
    return embed_frames(frame[None], embed_seed)[0]


def interp_embeddings(seq, target_len: int) -> np.ndarray:
    """Linear interpolation at uniform fractional indices, each result re-normalized."""
    seq = np.asarray(seq, dtype=float)
    if len(seq) < 2 or target_len < 2:
        raise InvalidArgument("interpolation needs sequences of length >= 2")
    if target_len == len(seq):
        return seq.copy()
    s = np.arange(target_len) * (len(seq) - 1) / (target_len - 1)
    lo = np.minimum(np.floor(s).astype(int), len(seq) - 2)
    frac = (s - lo)[:, None]
    mixed = seq[lo] * (1.0 - frac) + seq[lo + 1] * frac
    exact = frac[:, 0] == 0.0
    mixed[exact] = seq[lo[exact]]
    return np.where(exact[:, None], mixed, _normalize_rows(mixed))


def unit_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """<a, b> for unit vectors, evaluated as 1 - |a - b|^2 / 2 (exact at a == b)."""
    return 1.0 - 0.5 * np.sum((np.asarray(a) - np.asarray(b)) ** 2, axis=-1)


def _check_pair(e: np.ndarray, e_star: np.ndarray) -> None:
    if len(e) != len(e_star):
        raise InvalidArgument(f"sequence lengths differ: {len(e)} vs {len(e_star)}")


def reward_cos(e, e_star) -> float:
    e, e_star = np.asarray(e, float), np.asarray(e_star, float)
    _check_pair(e, e_star)
    return float(np.mean(unit_cosine(e, e_star)))


def reward_end(e, e_star) -> float:
    e, e_star = np.asarray(e, float), np.asarray(e_star, float)
    _check_pair(e, e_star)
    return float(0.5 * (unit_cosine(e[0], e_star[0]) + unit_cosine(e[-1], e_star[-1])))


def cum_progress(e, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    if len(e) < 2:
        raise InvalidArgument("progress needs at least 2 embeddings")
    steps = np.linalg.norm(np.diff(e, axis=0), axis=1)
    return np.cumsum(steps) / (steps.sum() + epsilon)


def reward_temp(e, e_star, epsilon: float = DEFAULT_EPSILON) -> float:
    e, e_star = np.asarray(e, float), np.asarray(e_star, float)
    _check_pair(e, e_star)
    dev = np.mean(np.abs(cum_progress(e, epsilon) - cum_progress(e_star, epsilon)))
    return float(np.clip(1.0 - dev, 0.0, 1.0))


def reward_emb(gen: Video, ref: Video, weights: EmbedRewardWeights = EmbedRewardWeights(),
               embed_seed: int = 0) -> RewardBreakdown:
    if len(gen) < 2 or len(ref) < 2:
        raise InvalidArgument("embedding reward needs videos of at least 2 frames")
    e = embed_frames(gen.frames, embed_seed)
    e_star = embed_frames(ref.frames, embed_seed)
    tc = max(len(e), len(e_star))
    e, e_star = interp_embeddings(e, tc), interp_embeddings(e_star, tc)
    return RewardBreakdown.combine(
        {"cos": reward_cos(e, e_star), "temp": reward_temp(e, e_star, weights.epsilon), "end": reward_end(e, e_star)},
        {"cos": weights.alpha_emb, "temp": weights.beta_emb, "end": weights.gamma_emb},
    )


# --- pluggable interface ---------------------------------------------------------------


@dataclass
class SampleContext:
    """Everything a reward may look at for one generated sample."""

    video: Video
    maze: Maze | None = None
    gt_path: CellPath | None = None
    canonical_bg: np.ndarray | None = None
    ref_video: Video | None = None
    extra: dict = field(default_factory=dict)


class Reward(Protocol):
    name: str

    def evaluate(self, ctx: SampleContext) -> RewardBreakdown: ...


@dataclass
class GameReward:
    weights: GameRewardWeights = GameRewardWeights()
    sample_count: int = DEFAULT_MF_SAMPLES
    tau: float = DEFAULT_MF_TAU
    name: str = "game"

    def evaluate(self, ctx: SampleContext) -> RewardBreakdown:
        try:
            pred = extract_trajectory(ctx.video)
        except EmptyTrajectory:
            pred = None
        return game_reward_breakdown(pred, ctx.gt_path, ctx.video, ctx.canonical_bg, self.weights,
                                     self.sample_count, self.tau)


@dataclass
class EmbeddingReward:
    weights: EmbedRewardWeights = EmbedRewardWeights()
    embed_seed: int = 0
    name: str = "embedding"

    def evaluate(self, ctx: SampleContext) -> RewardBreakdown:
        return reward_emb(ctx.video, ctx.ref_video, self.weights, self.embed_seed)


def _game_factory(spec: dict) -> GameReward:
    w = spec.get("weights", {})
    return GameReward(GameRewardWeights(**w) if w else GameRewardWeights(),
                      int(spec.get("mf_samples", DEFAULT_MF_SAMPLES)), float(spec.get("tau", DEFAULT_MF_TAU)))


def _em_only_factory(spec: dict) -> GameReward:
    r = _game_factory({**spec, "weights": {"alpha": 1.0, "beta": 0.0, "gamma": 0.0}})
    r.name = "em_only"
    return r


def _embedding_factory(spec: dict) -> EmbeddingReward:
    w = spec.get("weights", {})
    weights = EmbedRewardWeights(**w) if w else EmbedRewardWeights()
    if "epsilon" in spec:
        weights = EmbedRewardWeights(weights.alpha_emb, weights.beta_emb, weights.gamma_emb, float(spec["epsilon"]))
    return EmbeddingReward(weights, int(spec.get("embed_seed", 0)))


REWARD_REGISTRY: dict[str, Callable[[dict], Reward]] = {
    "game": _game_factory,
    "em_only": _em_only_factory,
    "embedding": _embedding_factory,
}


def register_reward(name: str, factory: Callable[[dict], Reward]) -> None:
    REWARD_REGISTRY[name] = factory


def make_reward(spec: dict) -> Reward:
    name = spec.get("name")
    if name not in REWARD_REGISTRY:
        raise ConfigError(f"unknown reward {name!r}; registered: {sorted(REWARD_REGISTRY)}")
    try:
        return REWARD_REGISTRY[name](spec)
    except (TypeError, InvalidArgument) as exc:
        raise ConfigError(f"reward {name!r}: {exc}") from exc
