"""Group-relative policy optimization for the flow policy.

Collection runs the SDE sampler at ``s_train`` steps, renders and scores each
sample, and normalizes rewards within the group. The update maximizes the
clipped surrogate minus a closed-form per-step Gaussian KL to a frozen
reference, averaged uniformly over steps, then group members, then prompts.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument, NumericError, TrainingDiverged
from .flowgen import (
    PolicyParams,
    StepBatch,
    StepRecord,
    SdeRollout,
    batch_means,
    fm_loss,
    mean_velocity_coeff,
    save_checkpoint,
    sde_sample_batch,
    velocity_backward,
)
from .render import Video
from .rewards import Reward, RewardBreakdown, make_reward
from .tasks import Task, derive_seed

log = logging.getLogger(__name__)


@dataclass
class GrpoConfig:
    group_size: int = 8
    s_train: int = 30
    s_infer: int = 50
    noise_scale: float = 0.5
    clip_eps: float = 0.2
    beta_kl: float = 0.04
    lr: float = 1e-4
    iterations: int = 100
    batch_size: int = 4
    seed: int = 0
    adv_eps: float = 1e-8
    checkpoint_every: int = 0
    reward: dict = field(default_factory=lambda: {"name": "game"})

    def __post_init__(self) -> None:
        problems = []
        if self.group_size < 2:
            problems.append("group_size must be >= 2")
        if not 2 <= self.s_train <= self.s_infer:
            problems.append("need 2 <= s_train <= s_infer")
        for name in ("noise_scale", "clip_eps", "lr", "adv_eps"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if self.beta_kl < 0:
            problems.append("beta_kl must be >= 0")
        if self.iterations < 0 or self.batch_size < 1:
            problems.append("iterations must be >= 0 and batch_size >= 1")
        if problems:
            raise InvalidArgument("; ".join(problems))


@dataclass
class GroupRollout:
    task: Task
    rollouts: list[SdeRollout]
    videos: list[Video]
    breakdowns: list[RewardBreakdown]
    rewards: np.ndarray
    advantages: np.ndarray
    batch: StepBatch
    old_logp: np.ndarray
    ref_means: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return self.rollouts[0].steps


# --- advantage and objective pieces -------------------------------------------------------


def advantages(rewards: Sequence[float], eps_guard: float = 1e-8) -> np.ndarray:
    """(r - mean) / population std; all zeros when the std falls below ``eps_guard``."""
    r = np.asarray(rewards, dtype=float)
    if len(r) < 2:
        raise InvalidArgument("advantages need a group of at least 2")
    std = r.std()
    if std < eps_guard:
        return np.zeros_like(r)
    return (r - r.mean()) / max(std, eps_guard)


def clip_objective(ratio: float, advantage: float, eps: float) -> float:
    if ratio <= 0:
        raise InvalidArgument("ratio must be positive")
    return min(ratio * advantage, float(np.clip(ratio, 1.0 - eps, 1.0 + eps)) * advantage)


def kl_step(params: PolicyParams, ref_params: PolicyParams, record: StepRecord) -> tuple[float, np.ndarray]:
    """KL between current and reference Gaussian transitions (shared covariance) and its gradient."""
    batch = StepBatch.from_records([record])
    m, cache = batch_means(params, batch, with_cache=True)
    m_ref = batch_means(ref_params, batch)
    var = batch.std ** 2
    diff = m - m_ref
    kl = float(0.5 * np.sum(diff ** 2) / var[0])
    coeff = mean_velocity_coeff(batch.ts, batch.sigmas, batch.dts)
    return kl, velocity_backward(params, cache, diff / var[:, None] * coeff[:, None])


def _logp_from_means(batch: StepBatch, m: np.ndarray) -> np.ndarray:
    var = batch.std ** 2
    d = batch.states.shape[1]
    return -0.5 * np.sum((batch.next_states - m) ** 2, axis=1) / var - 0.5 * d * np.log(2 * np.pi * var)


def _concat(groups: Sequence[GroupRollout], ref_params: PolicyParams):
    batch = StepBatch(*(np.concatenate([getattr(g.batch, k) for g in groups])
                        for k in ("states", "next_states", "ts", "sigmas", "dts", "conds")))
    adv, weight, old = [], [], []
    for g in groups:
        n_members, steps = len(g.rollouts), g.steps
        adv.append(np.repeat(g.advantages, steps))
        weight.append(np.full(n_members * steps, 1.0 / (len(groups) * n_members * steps)))
        old.append(g.old_logp)
    ref = [g.ref_means if g.ref_means is not None else batch_means(ref_params, g.batch) for g in groups]
    return batch, np.concatenate(adv), np.concatenate(weight), np.concatenate(old), np.concatenate(ref)


def grpo_objective(params: PolicyParams, ref_params: PolicyParams, groups: Sequence[GroupRollout],
                   cfg: GrpoConfig) -> tuple[float, np.ndarray, dict]:
    """J = mean_prompts mean_members mean_steps [min(rho A, clip(rho) A) - beta KL], with gradient."""
    if not groups:
        raise InvalidArgument("no groups to optimize")
    batch, adv, weight, old_logp, m_ref = _concat(groups, ref_params)
    m, cache = batch_means(params, batch, with_cache=True)
    logp = _logp_from_means(batch, m)
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    surrogate = np.minimum(ratio * adv, clipped * adv)
    var = batch.std ** 2
    kl = 0.5 * np.sum((m - m_ref) ** 2, axis=1) / var
    objective = float(np.sum(weight * (surrogate - cfg.beta_kl * kl)))
    active = ratio * adv <= clipped * adv
    coeff = mean_velocity_coeff(batch.ts, batch.sigmas, batch.dts)
    pg = np.where(active, adv * ratio, 0.0)
    grad_m = (pg[:, None] * (batch.next_states - m) - cfg.beta_kl * (m - m_ref)) / var[:, None]
    grad = velocity_backward(params, cache, grad_m * (weight * coeff)[:, None])
    diag = {
        "objective": objective,
        "clip_fraction": float(np.mean(ratio != clipped)),
        "mean_kl": float(np.mean(kl)),
        "mean_abs_advantage": float(np.mean(np.abs(adv))),
    }
    return objective, grad, diag


# --- optimizer ------------------------------------------------------------------------------


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def direction(self, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)


def grpo_update(params: PolicyParams, ref_params: PolicyParams, groups: Sequence[GroupRollout],
                cfg: GrpoConfig, opt: Adam | None = None) -> tuple[PolicyParams, dict]:
    """One Adam ascent step on the GRPO objective."""
    opt = opt if opt is not None else Adam()
    objective, grad, diag = grpo_objective(params, ref_params, groups, cfg)
    rewards = np.concatenate([g.rewards for g in groups])
    diag["mean_reward"] = float(rewards.mean())
    if not (np.isfinite(objective) and np.all(np.isfinite(grad))):
        raise NumericError("non-finite GRPO objective or gradient", diagnostics=diag)
    new = params.with_theta(params.theta + cfg.lr * opt.direction(grad))
    diag["grad_norm"] = float(np.linalg.norm(grad))
    return new, diag


# --- collection -----------------------------------------------------------------------------


def _score_one(job: tuple[Task, np.ndarray, Reward]) -> tuple[Video, RewardBreakdown]:
    task, vec, reward = job
    video = task.video(vec)
    return video, reward.evaluate(task.context(video))


def score_samples(task: Task, finals: Sequence[np.ndarray], reward: Reward,
                  pool: Executor | None = None) -> tuple[list[Video], list[RewardBreakdown]]:
    """Render and score each final latent. With a pool the jobs run in worker processes;
    results keep submission order, so logs do not depend on the worker count."""
    jobs = [(task, vec, reward) for vec in finals]
    done = list(pool.map(_score_one, jobs)) if pool is not None else [_score_one(j) for j in jobs]
    return [v for v, _ in done], [b for _, b in done]


def sample_group(params: PolicyParams, task: Task, cfg: GrpoConfig, rng_seed: int,
                 reward: Reward | None = None, ref_params: PolicyParams | None = None,
                 pool: Executor | None = None) -> GroupRollout:
    reward = reward or make_reward(cfg.reward)
    seeds = [derive_seed(rng_seed, i) for i in range(cfg.group_size)]
    conds = np.repeat(task.cond[None], cfg.group_size, axis=0)
    rollouts = sde_sample_batch(params, conds, cfg.s_train, cfg.noise_scale, seeds)
    videos, breakdowns = score_samples(task, [r.final for r in rollouts], reward, pool)
    rewards = np.array([b.combined for b in breakdowns])
    batch = StepBatch.from_rollouts(rollouts)
    old_logp = _logp_from_means(batch, batch_means(params, batch))
    ref_means = batch_means(ref_params, batch) if ref_params is not None else None
    return GroupRollout(task, rollouts, videos, breakdowns, rewards, advantages(rewards, cfg.adv_eps),
                        batch, old_logp, ref_means)


# --- supervised warm start --------------------------------------------------------------------


@dataclass
class SftResult:
    params: PolicyParams
    losses: list[float]


def sft_train(params_init: PolicyParams, demos: np.ndarray, conds: np.ndarray, epochs: int, lr: float,
              seed: int, batch_size: int = 64, divergence_factor: float = 10.0,
              divergence_patience: int = 100) -> SftResult:
    """Adam on the flow-matching loss over demonstration latents."""
    demos = np.asarray(demos, dtype=float)
    conds = np.asarray(conds, dtype=float)
    if len(demos) == 0:
        raise InvalidArgument("no demonstrations")
    rng = np.random.default_rng(seed)
    params = params_init.copy()
    opt = Adam()
    losses: list[float] = []
    initial = None
    bad_run = 0
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(demos))
        for start in range(0, len(demos), batch_size):
            idx = order[start:start + batch_size]
            loss, grad = fm_loss(params, demos[idx], conds[idx], derive_seed(seed, step))
            step += 1
            losses.append(loss)
            initial = loss if initial is None else initial
            bad_run = bad_run + 1 if loss > divergence_factor * initial else 0
            if bad_run >= divergence_patience:
                raise TrainingDiverged(f"flow-matching loss above {divergence_factor}x initial for "
                                       f"{divergence_patience} steps", index=step)
            params = params.with_theta(params.theta - lr * opt.direction(grad))
    return SftResult(params, losses)


# --- Algorithm 1 ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: PolicyParams
    records: list[dict]
    collection_seconds: float = 0.0
    timings: list[dict] = field(default_factory=list)


def _component_means(groups: Sequence[GroupRollout]) -> dict[str, float]:
    sums: dict[str, list[float]] = {}
    for g in groups:
        for b in g.breakdowns:
            for k, v in b.components.items():
                sums.setdefault(k, []).append(v)
    return {k: float(np.mean(v)) for k, v in sorted(sums.items())}


def train(cfg: GrpoConfig, suite: Sequence[Task], params_init: PolicyParams,
          log_path: str | Path | None = None, checkpoint_dir: str | Path | None = None,
          on_iteration: Callable[[int, PolicyParams], None] | None = None,
          pool: Executor | None = None) -> TrainResult:
    """Collect groups for a batch of prompts, normalize within groups, take one update; repeat.

    The reference policy is ``params_init`` and never changes. Log records are
    deterministic given (cfg, suite, params_init); wall-clock timings are kept
    separately in ``TrainResult.timings``.
    """
    if not suite:
        raise InvalidArgument("empty environment suite")
    reward = make_reward(cfg.reward)
    ref = params_init.copy()
    params = params_init.copy()
    opt = Adam()
    records: list[dict] = []
    timings: list[dict] = []
    collect_total = 0.0
    log_file = open(log_path, "w") if log_path else None
    try:
        for it in range(cfg.iterations):
            t0 = time.perf_counter()
            pick = np.random.default_rng(derive_seed(cfg.seed, it, 1)).choice(
                len(suite), size=min(cfg.batch_size, len(suite)), replace=False)
            try:
                groups = [sample_group(params, suite[j], cfg, derive_seed(cfg.seed, it, 2, int(j)), reward, ref, pool)
                          for j in pick]
                t1 = time.perf_counter()
                params, diag = grpo_update(params, ref, groups, cfg, opt)
            except Exception:
                if checkpoint_dir:
                    save_checkpoint(params, Path(checkpoint_dir) / f"resume_{it:05d}.ckpt")
                log.exception("iteration %d failed", it)
                raise
            t2 = time.perf_counter()
            collect_total += t1 - t0
            rewards = np.concatenate([g.rewards for g in groups])
            rec = {
                "iteration": it,
                "mean_reward": float(rewards.mean()),
                "max_reward": float(rewards.max()),
                "components": _component_means(groups),
                "clip_fraction": diag["clip_fraction"],
                "mean_kl": diag["mean_kl"],
                "mean_abs_advantage": diag["mean_abs_advantage"],
                "seed": cfg.seed,
            }
            records.append(rec)
            timings.append({"iteration": it, "collect_s": t1 - t0, "update_s": t2 - t1})
            if log_file:
                log_file.write(json.dumps(rec, sort_keys=True) + "\n")
                log_file.flush()
            if checkpoint_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(params, Path(checkpoint_dir) / f"iter_{it + 1:05d}.ckpt")
            if on_iteration:
                on_iteration(it, params)
    finally:
        if log_file:
            log_file.close()
    return TrainResult(params, records, collect_total, timings)


def config_dict(cfg: GrpoConfig) -> dict:
    return asdict(cfg)
