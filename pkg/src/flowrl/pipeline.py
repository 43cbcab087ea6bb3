"""Dataset building and the gen-data / sft / grpo / eval / scale stages.

Every stage is a pure function of its config, its inputs on disk and its seed, so
re-running a stage reproduces its artifacts byte for byte.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import Executor, ProcessPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .envgen import Maze, NavScene, gen_nav_scene, gen_regular_maze, gen_trapfield, load_maze, maze_to_text, save_maze, solve_optimal, make_demo
from .errors import ArtifactIOError, FormatError, GenerationFailure
from .evaluate import best_of_k, evaluate_nav, evaluate_vr
from .flowgen import PolicyParams, encode_maze, init_params, load_checkpoint, save_checkpoint
from .grpo import SftResult, TrainResult, sft_train, train
from .rewards import make_reward
from .tasks import MazeTask, NavTask, Task, derive_seed, task_dims

log = logging.getLogger(__name__)

SPLITS = ("train", "heldout")
_SPLIT_KEY = {"demo": 1, "train": 2, "heldout": 3}


def split_seed(base: int, split: str, index: int) -> int:
    return derive_seed(base, _SPLIT_KEY[split], index)


def _size(cfg: ExperimentConfig, index: int) -> tuple[int, int]:
    w, h = cfg.data.sizes[index % len(cfg.data.sizes)]
    return int(w), int(h)


def make_maze(cfg: ExperimentConfig, seed: int, index: int) -> Maze:
    w, h = _size(cfg, index)
    if cfg.data.kind == "regular":
        return gen_regular_maze(seed, w, h)
    if cfg.data.kind == "trapfield":
        return gen_trapfield(seed, w, h, cfg.data.trap_fraction)
    raise NotImplementedError(f"maze kind {cfg.data.kind!r} is reserved and has no generator")


def _layout_key(maze: Maze) -> str:
    return maze_to_text(maze).split("\n", 1)[1]


@dataclass
class Dataset:
    cfg: ExperimentConfig
    root: Path | None
    splits: dict[str, list[Task]]
    demos: np.ndarray
    demo_conds: np.ndarray
    manifest: dict

    def suite(self, split: str) -> list[Task]:
        return self.splits[split]


def _maze_splits(cfg: ExperimentConfig) -> dict[str, list[Maze]]:
    """Train and held-out mazes; a held-out layout never repeats a train layout.

    Small sizes have few distinct layouts (a few hundred at 4x4), so collisions do occur.
    Sizes still cycle by position in the split.
    """
    train = [make_maze(cfg, split_seed(cfg.seed, "train", i), i) for i in range(cfg.data.train_count)]
    taken = {_layout_key(m) for m in train}
    heldout: list[Maze] = []
    draw = 0
    while len(heldout) < cfg.data.heldout_count:
        if draw > 1000 * (cfg.data.heldout_count + 1):
            raise GenerationFailure("not enough distinct layouts for a disjoint held-out split")
        pos = len(heldout)
        maze = make_maze(cfg, split_seed(cfg.seed, "heldout", draw), pos)
        draw += 1
        key = _layout_key(maze)
        if key in taken:
            continue
        taken.add(key)
        heldout.append(maze)
    return {"train": train, "heldout": heldout}


def _maze_demos(cfg: ExperimentConfig, heldout: Sequence[Maze]) -> tuple[list[int], np.ndarray, np.ndarray]:
    """Demonstrations on fresh mazes whose layouts never coincide with a held-out maze."""
    blocked = {_layout_key(m) for m in heldout}
    cap = tuple(cfg.data.cond_shape)
    seeds, vecs, conds = [], [], []
    i = 0
    while len(seeds) < cfg.data.demo_count:
        if i > 1000 * (cfg.data.demo_count + 1):
            raise GenerationFailure("every demo candidate collides with a held-out layout")
        seed = split_seed(cfg.seed, "demo", i)
        maze = make_maze(cfg, seed, i)
        i += 1
        if _layout_key(maze) in blocked:
            continue
        lat = make_demo(maze, solve_optimal(maze), cfg.data.frames)
        seeds.append(seed)
        vecs.append(lat.to_vector((float(maze.height), float(maze.width))))
        conds.append(encode_maze(maze, *cap))
    d, c = task_dims(cfg.data.frames, cap)
    return seeds, np.array(vecs).reshape(-1, d), np.array(conds).reshape(-1, c)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.task == "nav":
        counts = {"train": cfg.data.nav_train_count, "heldout": cfg.data.nav_heldout_count}
        scenes = {s: [gen_nav_scene(split_seed(cfg.seed, s, i)) for i in range(n)] for s, n in counts.items()}
        splits = {s: [NavTask(sc, cfg.data.nav_frames) for sc in v] for s, v in scenes.items()}
        demo_seeds = [split_seed(cfg.seed, "demo", i) for i in range(cfg.data.demo_count)]
        demo_tasks = [NavTask(gen_nav_scene(s), cfg.data.nav_frames) for s in demo_seeds]
        d, c = task_dims(cfg.data.nav_frames, None)
        demos = np.array([t.demo_vector() for t in demo_tasks]).reshape(-1, d)
        conds = np.array([t.cond for t in demo_tasks]).reshape(-1, c)
    else:
        mazes = _maze_splits(cfg)
        cap = tuple(cfg.data.cond_shape)
        splits = {s: [MazeTask(m, cfg.data.frames, cap) for m in v] for s, v in mazes.items()}
        demo_seeds, demos, conds = _maze_demos(cfg, mazes["heldout"])
    manifest = {
        "task": cfg.task,
        "seed": cfg.seed,
        "splits": {s: [t.name for t in v] for s, v in splits.items()},
        "demo_seeds": demo_seeds,
        "demo_count": len(demo_seeds),
        "latent_dim": int(demos.shape[1]),
        "cond_dim": int(conds.shape[1]),
    }
    return Dataset(cfg, None, splits, demos, conds, manifest)


def _scene_to_json(scene: NavScene) -> dict:
    return {"extent": scene.extent, "obstacles": scene.obstacles.tolist(), "landmark": scene.landmark.tolist(),
            "start": scene.start.tolist(), "reference": scene.reference.tolist(), "seed": scene.seed}


def _scene_from_json(d: dict) -> NavScene:
    return NavScene(float(d["extent"]), np.array(d["obstacles"], dtype=float).reshape(-1, 3),
                    np.array(d["landmark"], dtype=float), np.array(d["start"], dtype=float),
                    np.array(d["reference"], dtype=float), int(d["seed"]))


def write_dataset(ds: Dataset, root: str | Path) -> None:
    root = Path(root)
    for split, tasks in ds.splits.items():
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for i, t in enumerate(tasks):
            if isinstance(t, MazeTask):
                save_maze(t.maze, d / f"{i:04d}.maze")
            else:
                (d / f"{i:04d}.json").write_text(json.dumps(_scene_to_json(t.scene), sort_keys=True) + "\n")
    np.save(root / "demos.npy", ds.demos)
    np.save(root / "demo_conds.npy", ds.demo_conds)
    (root / "manifest.json").write_text(json.dumps(ds.manifest, indent=2, sort_keys=True) + "\n")
    ds.root = root


def load_dataset(cfg: ExperimentConfig, root: str | Path) -> Dataset:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        demos = np.load(root / "demos.npy")
        conds = np.load(root / "demo_conds.npy")
    except FileNotFoundError as exc:
        raise ArtifactIOError(exc.filename or root, "missing dataset file") from exc
    except (ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"{root}: unreadable dataset: {exc}") from exc
    if manifest.get("task") != cfg.task:
        raise FormatError(f"{root}: dataset built for task {manifest.get('task')!r}, config says {cfg.task!r}")
    splits: dict[str, list[Task]] = {}
    for split in SPLITS:
        d = root / split
        if not d.is_dir():
            raise ArtifactIOError(d, "missing split directory")
        if cfg.task == "nav":
            splits[split] = [NavTask(_scene_from_json(json.loads(p.read_text())), cfg.data.nav_frames)
                             for p in sorted(d.glob("*.json"))]
        else:
            splits[split] = [MazeTask(load_maze(p), cfg.data.frames, tuple(cfg.data.cond_shape))
                             for p in sorted(d.glob("*.maze"))]
    return Dataset(cfg, root, splits, demos, conds, manifest)


# --- stages ------------------------------------------------------------------------------


def initial_params(cfg: ExperimentConfig) -> PolicyParams:
    frames = cfg.data.nav_frames if cfg.task == "nav" else cfg.data.frames
    cap = None if cfg.task == "nav" else tuple(cfg.data.cond_shape)
    d, c = task_dims(frames, cap)
    return init_params(d, c, cfg.model.hidden, derive_seed(cfg.seed, cfg.model.init_seed, 7))


def run_sft(cfg: ExperimentConfig, ds: Dataset) -> SftResult:
    params = initial_params(cfg)
    if cfg.sft.epochs == 0:
        return SftResult(params, [])
    return sft_train(params, ds.demos, ds.demo_conds, cfg.sft.epochs, cfg.sft.lr,
                     derive_seed(cfg.seed, 11), cfg.sft.batch_size)


def worker_pool(workers: int):
    """A process pool for rendering and scoring, or no pool when ``workers`` <= 1."""
    if workers <= 1:
        return nullcontext(None)
    return ProcessPoolExecutor(max_workers=workers)


def run_grpo(cfg: ExperimentConfig, ds: Dataset, params: PolicyParams, log_path=None,
             checkpoint_dir=None, pool: Executor | None = None) -> TrainResult:
    return train(cfg.grpo, ds.suite("train"), params, log_path, checkpoint_dir, pool=pool)


def run_eval(cfg: ExperimentConfig, ds: Dataset, params: PolicyParams, split: str = "heldout",
             pool: Executor | None = None):
    suite = ds.suite(split)
    seed = derive_seed(cfg.seed, cfg.eval.sample_seed, 13)
    if cfg.task == "nav":
        return evaluate_nav(params, suite, cfg.eval.s_infer, cfg.eval.noise_scale, seed, pool)
    return evaluate_vr(params, suite, cfg.eval.s_infer, cfg.eval.noise_scale, seed, pool)


def run_scale(cfg: ExperimentConfig, ds: Dataset, params: PolicyParams, ks: Sequence[int],
              split: str = "heldout", pool: Executor | None = None) -> dict:
    reward = make_reward(cfg.grpo.reward)
    rows = []
    for i, task in enumerate(ds.suite(split)):
        res = best_of_k(params, task, ks, reward, cfg.eval.s_infer, cfg.eval.noise_scale,
                        derive_seed(cfg.seed, cfg.eval.sample_seed, 17, i), pool)
        rows.append({"task": task.name, **{f"k{k}": v for k, v in zip(res.ks, res.curve)}})
    ks = sorted(int(k) for k in ks)
    mean = [float(np.mean([r[f"k{k}"] for r in rows])) for k in ks]
    return {"ks": ks, "mean_curve": mean, "per_task": rows, "reward": cfg.grpo.reward}
