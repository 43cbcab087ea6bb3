"""Shared training runs for the acceptance tests.

One dataset and one SFT checkpoint serve every directional criterion; GRPO arms
differ only in the field under study and in the GRPO seed. Held-out EM is averaged
over ``EVAL_SEEDS`` sampling seeds, shared across arms (common random numbers).
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from flowrl.config import ExperimentConfig, config_from_dict
from flowrl.evaluate import evaluate_vr
from flowrl.flowgen import PolicyParams
from flowrl.pipeline import Dataset, build_dataset, initial_params, run_sft
from flowrl.grpo import train

SEEDS = (0, 1, 2, 3, 4)
EVAL_SEEDS = 8

BASE = {
    "task": "maze",
    "seed": 0,
    "data": {"kind": "regular", "sizes": [[4, 4], [5, 5], [6, 6]], "frames": 36, "cond_shape": [6, 6],
             "demo_count": 100000, "train_count": 40, "heldout_count": 20},
    "model": {"hidden": 256},
    "sft": {"epochs": 20, "lr": 1e-3, "batch_size": 64},
    "grpo": {"iterations": 200, "batch_size": 4, "group_size": 8, "lr": 1e-4, "s_train": 30, "s_infer": 50,
             "beta_kl": 0.04, "noise_scale": 0.5, "reward": {"name": "game"}},
    "eval": {"s_infer": 50, "noise_scale": 0.5},
}

ARMS = {
    "dense": {},
    "em_only": {"grpo": {"reward": {"name": "em_only"}}},
    "steps10": {"grpo": {"s_train": 10}},
    "steps50": {"grpo": {"s_train": 50}},
    "cold": {"sft": {"epochs": 0}},
}


def arm_config(arm: str, seed: int) -> ExperimentConfig:
    raw = copy.deepcopy(BASE)
    for section, values in ARMS[arm].items():
        raw[section] = {**raw[section], **values}
    raw["grpo"]["seed"] = seed
    return config_from_dict(raw)


def heldout_em(cfg: ExperimentConfig, ds: Dataset, params: PolicyParams) -> float:
    suite = ds.suite("heldout")
    return float(np.mean([evaluate_vr(params, suite, cfg.eval.s_infer, cfg.eval.noise_scale, 1000 + k).em
                          for k in range(EVAL_SEEDS)]))


@dataclass
class ArmRun:
    arm: str
    seed: int
    heldout_em: float
    final_train_reward: float
    final_train_em: float
    collection_seconds: float
    wall_seconds: float
    records: list = field(repr=False, default_factory=list)


@dataclass
class Lab:
    ds: Dataset
    sft_params: PolicyParams
    sft_seconds: float
    runs: dict = field(default_factory=dict)
    _base_em: dict = field(default_factory=dict)

    @classmethod
    def build(cls) -> "Lab":
        cfg = arm_config("dense", 0)
        t0 = time.perf_counter()
        ds = build_dataset(cfg)
        params = run_sft(cfg, ds).params
        return cls(ds, params, time.perf_counter() - t0)

    def start_params(self, arm: str) -> PolicyParams:
        cfg = arm_config(arm, 0)
        return self.sft_params if cfg.sft.epochs > 0 else initial_params(cfg)

    def base_em(self, arm: str) -> float:
        key = "cold" if arm == "cold" else "sft"
        if key not in self._base_em:
            self._base_em[key] = heldout_em(arm_config(arm, 0), self.ds, self.start_params(arm))
        return self._base_em[key]

    def run(self, arm: str, seed: int, tail: int = 20) -> ArmRun:
        if (arm, seed) in self.runs:
            return self.runs[(arm, seed)]
        cfg = arm_config(arm, seed)
        t0 = time.perf_counter()
        res = train(cfg.grpo, self.ds.suite("train"), self.start_params(arm))
        wall = time.perf_counter() - t0
        last = res.records[-tail:]
        run = ArmRun(arm, seed, heldout_em(cfg, self.ds, res.params),
                     float(np.mean([r["mean_reward"] for r in last])),
                     float(np.mean([r["components"]["em"] for r in last])),
                     res.collection_seconds, wall, res.records)
        self.runs[(arm, seed)] = run
        return run
