"""Maze metrics (EM, SR, PR, SD, MF), navigation metrics (ADE, FDE, MR, SE, AC, WO),
and nested best-of-K test-time scaling."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .envgen import CellPath, Maze
from .errors import EmptyTrajectory, InvalidArgument
from .flowgen import PolicyParams, sde_sample_batch
from .grpo import score_samples
from .render import Video
from .rewards import (
    DEFAULT_MF_SAMPLES,
    DEFAULT_MF_TAU,
    Reward,
    reward_em,
    reward_mf,
    reward_pr,
)
from .tasks import MazeTask, NavTask, Task, derive_seed
from .track import extract_trajectory, glow_positions

MR_TAU = 2.0
SE_SIGMA = 0.6
AC_R0 = 0.5
AC_SLOPE = 1.5
WO_WEIGHTS = {"ac": 0.35, "se": 0.30, "mr": 0.15, "ade": 0.10, "fde": 0.10}
NORM_SCALE = 2.0

DECISIONS = {
    "sr": "goal must appear in the tracked path with no trap cell before its first visit",
    "sd": "100*(steps to first goal visit - optimal steps)/optimal steps; undefined without success",
    "em_pr_mf": "EM exact cell sequence; PR unbroken-prefix share of optimal path; MF share of background "
                f"pixels within {DEFAULT_MF_TAU:g} of canonical over {DEFAULT_MF_SAMPLES} frames",
    "ade_fde": "shorter sequence resampled to the longer by linear interpolation over index",
    "mr": f"1 iff FDE > {MR_TAU:g} m (boundary passes)",
    "se": f"exp(-FDE^2 / (2 * {SE_SIGMA:g}^2))",
    "ac": f"share of pred points within {AC_R0:g} + {AC_SLOPE:g} * s metres of gt at progress s",
    "wo": "0.35 AC + 0.30 SE + 0.15 (1 - MR) + 0.10 exp(-ADE/2) + 0.10 exp(-FDE/2)",
    "sampling": "one SDE sample per environment at the inference step count",
}


# --- maze metrics ------------------------------------------------------------------------


def metric_sr(pred: CellPath, maze: Maze) -> int:
    if maze.goal not in pred:
        return 0
    first = pred.index(maze.goal)
    return int(not any(cell in maze.traps for cell in pred[:first]))


def metric_sd(pred: CellPath, gt: CellPath, success: int | bool) -> float | None:
    if not success:
        return None
    goal = gt[-1]
    if goal not in pred:
        raise InvalidArgument("success flagged but goal absent from the predicted path")
    steps = pred.index(goal)
    optimal = len(gt) - 1
    return 100.0 * (steps - optimal) / optimal


@dataclass
class VrSample:
    em: int
    sr: int
    pr: float
    sd: float | None
    mf: float
    empty: bool = False


def score_vr_video(video: Video, maze: Maze, gt: CellPath, canonical_bg: np.ndarray) -> VrSample:
    mf = reward_mf(video, canonical_bg)
    try:
        pred = extract_trajectory(video)
    except EmptyTrajectory:
        return VrSample(0, 0, 0.0, None, mf, empty=True)
    sr = metric_sr(pred, maze)
    return VrSample(reward_em(pred, gt), sr, reward_pr(pred, gt), metric_sd(pred, gt, sr), mf)


@dataclass
class VrReport:
    """Aggregates in percent. ``sd`` is None when no sample succeeded."""

    em: float
    sr: float
    pr: float
    sd: float | None
    mf: float
    samples: int
    excluded: int = 0
    empty: int = 0
    per_task: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate_vr(scores: Sequence[VrSample], names: Sequence[str] | None = None, excluded: int = 0) -> VrReport:
    if not scores:
        raise InvalidArgument("no samples to aggregate")
    sds = [s.sd for s in scores if s.sd is not None]
    names = names or [str(i) for i in range(len(scores))]
    return VrReport(
        em=100.0 * float(np.mean([s.em for s in scores])),
        sr=100.0 * float(np.mean([s.sr for s in scores])),
        pr=100.0 * float(np.mean([s.pr for s in scores])),
        sd=float(np.mean(sds)) if sds else None,
        mf=100.0 * float(np.mean([s.mf for s in scores])),
        samples=len(scores),
        excluded=excluded,
        empty=sum(s.empty for s in scores),
        per_task=[{"task": n, **asdict(s)} for n, s in zip(names, scores)],
    )


def evaluate_videos(tasks: Sequence[MazeTask], videos: Sequence[Video]) -> VrReport:
    scores = [score_vr_video(v, t.maze, t.gt, t.canvas.background) for t, v in zip(tasks, videos)]
    return aggregate_vr(scores, [t.name for t in tasks])


def sample_finals(params: PolicyParams, task: Task, count: int, steps: int, a: float, seed: int) -> list[np.ndarray]:
    seeds = [derive_seed(seed, i) for i in range(count)]
    conds = np.repeat(task.cond[None], count, axis=0)
    return [r.final for r in sde_sample_batch(params, conds, steps, a, seeds)]


def _sample_or_none(params, task, steps, a, seed) -> np.ndarray | None:
    try:
        return sample_finals(params, task, 1, steps, a, seed)[0]
    except ArithmeticError:
        return None


def _score_vr_job(job: tuple[MazeTask, np.ndarray | None]) -> VrSample | None:
    task, vec = job
    if vec is None:
        return None
    try:
        return score_vr_video(task.video(vec), task.maze, task.gt, task.canvas.background)
    except (ArithmeticError, ValueError):
        return None


def evaluate_vr(params: PolicyParams, suite: Sequence[MazeTask], steps: int = 50, a: float = 0.5,
                seed: int = 0, pool: Executor | None = None) -> VrReport:
    """One SDE sample per maze, rendered, tracked and scored. Sampling stays in this
    process; rendering and scoring go to ``pool`` when given."""
    if not suite:
        raise InvalidArgument("empty evaluation suite")
    jobs = [(task, _sample_or_none(params, task, steps, a, derive_seed(seed, i))) for i, task in enumerate(suite)]
    done = list(pool.map(_score_vr_job, jobs)) if pool is not None else [_score_vr_job(j) for j in jobs]
    kept = [(t.name, s) for t, s in zip(suite, done) if s is not None]
    return aggregate_vr([s for _, s in kept], [n for n, _ in kept], len(suite) - len(kept))


# --- navigation metrics --------------------------------------------------------------------


def _as_track(seq) -> np.ndarray:
    arr = np.asarray(seq, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) == 0:
        raise InvalidArgument("trajectory must be a non-empty (T, 2) sequence")
    return arr


def resample_index(seq: np.ndarray, count: int) -> np.ndarray:
    if len(seq) == count:
        return seq
    src = np.linspace(0.0, 1.0, len(seq)) if len(seq) > 1 else np.zeros(1)
    dst = np.linspace(0.0, 1.0, count)
    if len(seq) == 1:
        return np.repeat(seq, count, axis=0)
    return np.stack([np.interp(dst, src, seq[:, k]) for k in range(2)], axis=1)


def _aligned(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = _as_track(pred), _as_track(gt)
    n = max(len(pred), len(gt))
    return resample_index(pred, n), resample_index(gt, n)


def metric_ade(pred, gt) -> float:
    p, g = _aligned(pred, gt)
    return float(np.mean(np.linalg.norm(p - g, axis=1)))


def metric_fde(pred, gt) -> float:
    p, g = _as_track(pred), _as_track(gt)
    return float(np.linalg.norm(p[-1] - g[-1]))


def metric_mr(fde: float, tau: float = MR_TAU) -> int:
    return int(fde > tau)


def metric_se(fde: float, sigma: float = SE_SIGMA) -> float:
    return float(math.exp(-fde ** 2 / (2.0 * sigma ** 2)))


def metric_ac(pred, gt, r0: float = AC_R0, slope: float = AC_SLOPE) -> float:
    p, g = _aligned(pred, gt)
    s = np.linspace(0.0, 1.0, len(p)) if len(p) > 1 else np.ones(1)
    return float(np.mean(np.linalg.norm(p - g, axis=1) <= r0 + slope * s))


def _norm_distance(d: float) -> float:
    return float(math.exp(-d / NORM_SCALE))


def weighted_overall(ac: float, se: float, mr: float, ade: float, fde: float) -> float:
    # written as one minus the weighted shortfalls so a perfect prediction scores exactly 1
    w = WO_WEIGHTS
    shortfall = (w["ac"] * (1.0 - ac) + w["se"] * (1.0 - se) + w["mr"] * mr
                 + w["ade"] * (1.0 - _norm_distance(ade)) + w["fde"] * (1.0 - _norm_distance(fde)))
    return float(min(1.0, max(0.0, 1.0 - shortfall)))


@dataclass
class NavReport:
    ade: float
    fde: float
    mr: float
    se: float
    ac: float
    wo: float
    samples: int
    per_task: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def nav_scores(pred, gt) -> dict[str, float]:
    ade, fde = metric_ade(pred, gt), metric_fde(pred, gt)
    mr, se, ac = metric_mr(fde), metric_se(fde), metric_ac(pred, gt)
    return {"ade": ade, "fde": fde, "mr": float(mr), "se": se, "ac": ac,
            "wo": weighted_overall(ac, se, mr, ade, fde)}


def aggregate_nav(rows: Sequence[dict], names: Sequence[str]) -> NavReport:
    if not rows:
        raise InvalidArgument("no samples to aggregate")
    means = {k: float(np.mean([r[k] for r in rows])) for k in ("ade", "fde", "mr", "se", "ac", "wo")}
    return NavReport(**means, samples=len(rows), per_task=[{"task": n, **r} for n, r in zip(names, rows)])


def nav_prediction(task: NavTask, video: Video) -> np.ndarray:
    """Tracked ``(x, y)`` metres from a generated room video."""
    return glow_positions(video, task.canvas.background)[:, ::-1]


def _score_nav_job(job: tuple[NavTask, np.ndarray]) -> dict[str, float]:
    task, vec = job
    return nav_scores(nav_prediction(task, task.video(vec)), task.scene.reference)


def evaluate_nav(params: PolicyParams, suite: Sequence[NavTask], steps: int = 50, a: float = 0.5,
                 seed: int = 0, pool: Executor | None = None) -> NavReport:
    if not suite:
        raise InvalidArgument("empty evaluation suite")
    jobs = [(task, sample_finals(params, task, 1, steps, a, derive_seed(seed, i))[0]) for i, task in enumerate(suite)]
    rows = list(pool.map(_score_nav_job, jobs)) if pool is not None else [_score_nav_job(j) for j in jobs]
    return aggregate_nav(rows, [t.name for t in suite])


# --- test-time scaling ----------------------------------------------------------------------


@dataclass
class BestOfK:
    ks: list[int]
    curve: list[float]
    rewards: list[float]
    best_index: int
    best_vector: np.ndarray = field(repr=False)


def best_of_k(params: PolicyParams, task: Task, ks: Sequence[int], reward: Reward, steps: int = 50,
              a: float = 0.5, sample_seed: int = 0, pool: Executor | None = None) -> BestOfK:
    """Draw max(ks) samples once; the curve at K is the best reward among the first K."""
    ks = sorted(int(k) for k in ks)
    if not ks or ks[0] < 1:
        raise InvalidArgument("K values must be >= 1")
    finals = sample_finals(params, task, ks[-1], steps, a, sample_seed)
    rewards = [b.combined for b in score_samples(task, finals, reward, pool)[1]]
    curve = [float(max(rewards[:k])) for k in ks]
    best = int(np.argmax(rewards))
    return BestOfK(ks, curve, rewards, best, finals[best])


# --- report files ---------------------------------------------------------------------------


def write_report(report, path: str | Path, meta: dict | None = None) -> None:
    body = {"report": report.to_dict(), "decisions": DECISIONS, "meta": meta or {}}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def write_csv(rows: Sequence[dict], path: str | Path) -> None:
    rows = list(rows)
    if not rows:
        raise InvalidArgument("no rows to write")
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r.get(k) for k in keys})
