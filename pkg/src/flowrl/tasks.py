"""Task wrappers binding an environment to its condition vector, renderer and reward context."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envgen import CellPath, Maze, MazeKind, NavScene, gen_nav_scene, gen_regular_maze, gen_trapfield, make_demo, solve_optimal
from .flowgen import NAV_COND_DIM, encode_maze, encode_nav, maze_cond_dim
from .render import BG_REGIONS, MazeCanvas, NavCanvas, TrajectoryLatent, Video, latent_dim, render_nav_video, render_video, reference_video
from .rewards import SampleContext


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from integer keys."""
    state = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


@dataclass
class MazeTask:
    maze: Maze
    frames: int
    cond_shape: tuple[int, int]
    gt: CellPath = field(init=False)
    cond: np.ndarray = field(init=False, repr=False)
    canvas: MazeCanvas = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.gt = solve_optimal(self.maze)
        self.cond = encode_maze(self.maze, *self.cond_shape)
        self.canvas = MazeCanvas(self.maze)

    @property
    def extent(self) -> tuple[float, float]:
        return (float(self.maze.height), float(self.maze.width))

    @property
    def name(self) -> str:
        return f"{self.maze.kind.value}-{self.maze.width}x{self.maze.height}-{self.maze.seed}"

    @property
    def kind(self) -> str:
        return self.maze.kind.value

    def latent(self, vec: np.ndarray) -> TrajectoryLatent:
        return TrajectoryLatent.from_vector(vec, self.frames, self.extent)

    def video(self, vec: np.ndarray) -> Video:
        return render_video(self.maze, self.latent(vec), canvas=self.canvas)

    def demo_vector(self) -> np.ndarray:
        return make_demo(self.maze, self.gt, self.frames).to_vector(self.extent)

    def context(self, video: Video) -> SampleContext:
        return SampleContext(video, maze=self.maze, gt_path=self.gt, canonical_bg=self.canvas.background)


@dataclass
class NavTask:
    scene: NavScene
    frames: int
    cond_dim: int = NAV_COND_DIM
    cond: np.ndarray = field(init=False, repr=False)
    canvas: NavCanvas = field(init=False, repr=False)
    ref_video: Video = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.cond = encode_nav(self.scene, self.cond_dim)
        self.canvas = NavCanvas(self.scene)
        self.ref_video = reference_video(self.scene)

    @property
    def extent(self) -> tuple[float, float]:
        return (self.scene.extent, self.scene.extent)

    @property
    def name(self) -> str:
        return f"nav-{self.scene.seed}"

    @property
    def kind(self) -> str:
        return "nav"

    def latent(self, vec: np.ndarray) -> TrajectoryLatent:
        return TrajectoryLatent.from_vector(vec, self.frames, self.extent)

    def video(self, vec: np.ndarray) -> Video:
        lat = self.latent(vec)
        return render_nav_video(self.scene, lat.waypoints, lat.bg_field, canvas=self.canvas)

    def demo_vector(self) -> np.ndarray:
        from .envgen import resample_polyline

        wp = resample_polyline(self.scene.reference, self.frames)
        return TrajectoryLatent(wp, np.zeros((self.frames, BG_REGIONS))).to_vector(self.extent)

    def context(self, video: Video) -> SampleContext:
        return SampleContext(video, ref_video=self.ref_video)


Task = MazeTask | NavTask


def build_maze_tasks(seeds, sizes, kind: str, frames: int, cond_shape: tuple[int, int],
                     trap_fraction: float = 0.2) -> list[MazeTask]:
    """One maze per seed; sizes cycle through ``sizes`` as (width, height)."""
    tasks = []
    for i, seed in enumerate(seeds):
        w, h = sizes[i % len(sizes)]
        if MazeKind(kind) is MazeKind.REGULAR:
            maze = gen_regular_maze(int(seed), w, h)
        elif MazeKind(kind) is MazeKind.TRAPFIELD:
            maze = gen_trapfield(int(seed), w, h, trap_fraction)
        else:
            raise NotImplementedError(f"maze kind {kind!r} is reserved and has no generator")
        tasks.append(MazeTask(maze, frames, cond_shape))
    return tasks


def build_nav_tasks(seeds, frames: int, cond_dim: int = NAV_COND_DIM) -> list[NavTask]:
    return [NavTask(gen_nav_scene(int(s)), frames, cond_dim) for s in seeds]


def task_dims(frames: int, cond_shape: tuple[int, int] | None) -> tuple[int, int]:
    cond = maze_cond_dim(*cond_shape) if cond_shape else NAV_COND_DIM
    return latent_dim(frames), cond
