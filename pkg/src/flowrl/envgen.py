"""Procedural maze and navigation environments with ground-truth solutions.

Cells are addressed as ``(row, col)``; row 0 is the top row. Continuous maze
coordinates use the same order, with cell ``(r, c)`` covering
``[r, r+1) x [c, c+1)`` so its center sits at ``(r + 0.5, c + 0.5)``.
Navigation scenes use planar ``(x, y)`` metres instead.
"""

from __future__ import annotations

import enum
import heapq
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, GenerationFailure, InvalidArgument

Cell = tuple[int, int]
CellPath = tuple[Cell, ...]

# BFS expansion order: up, right, down, left.
NEIGHBOR_ORDER: tuple[Cell, ...] = ((-1, 0), (0, 1), (1, 0), (0, -1))

MIN_SIDE = 3
MAX_TRAP_FRACTION = 0.4
TRAP_RETRY_BUDGET = 1000


class MazeKind(str, enum.Enum):
    REGULAR = "regular"
    TRAPFIELD = "trapfield"
    # Named for config compatibility only; no generator or renderer exists.
    IRREGULAR = "irregular"
    MAZE3D = "maze3d"
    SOKOBAN = "sokoban"


IMPLEMENTED_KINDS = (MazeKind.REGULAR, MazeKind.TRAPFIELD)


@dataclass(eq=False)
class Maze:
    """Grid maze.

    ``east[r, c]`` is True when a wall separates ``(r, c)`` from ``(r, c+1)``;
    ``south[r, c]`` likewise for ``(r, c)`` and ``(r+1, c)``. Storing each edge
    once makes the wall relation symmetric by construction.
    """

    width: int
    height: int
    east: np.ndarray
    south: np.ndarray
    start: Cell
    goal: Cell
    traps: frozenset[Cell] = field(default_factory=frozenset)
    kind: MazeKind = MazeKind.REGULAR
    seed: int = 0

    def in_bounds(self, cell: Cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def wall(self, a: Cell, b: Cell) -> bool:
        """True if ``a`` and ``b`` are not orthogonally adjacent or a wall separates them."""
        (r0, c0), (r1, c1) = a, b
        if not (self.in_bounds(a) and self.in_bounds(b)):
            return True
        if r0 == r1 and abs(c0 - c1) == 1:
            return bool(self.east[r0, min(c0, c1)])
        if c0 == c1 and abs(r0 - r1) == 1:
            return bool(self.south[min(r0, r1), c0])
        return True

    def open_neighbors(self, cell: Cell) -> list[Cell]:
        r, c = cell
        out = []
        for dr, dc in NEIGHBOR_ORDER:
            nb = (r + dr, c + dc)
            if self.in_bounds(nb) and not self.wall(cell, nb) and nb not in self.traps:
                out.append(nb)
        return out

    def cells(self):
        for r in range(self.height):
            for c in range(self.width):
                yield (r, c)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Maze):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.east, other.east)
            and np.array_equal(self.south, other.south)
            and self.start == other.start
            and self.goal == other.goal
            and self.traps == other.traps
            and self.kind == other.kind
            and self.seed == other.seed
        )


def _closed_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    return np.ones((height, width - 1), dtype=bool), np.ones((height - 1, width), dtype=bool)


def _carve(east: np.ndarray, south: np.ndarray, a: Cell, b: Cell) -> None:
    (r0, c0), (r1, c1) = a, b
    if r0 == r1:
        east[r0, min(c0, c1)] = False
    else:
        south[min(r0, r1), c0] = False


def _check_dims(width: int, height: int) -> None:
    if width < MIN_SIDE or height < MIN_SIDE:
        raise InvalidArgument(f"maze dimensions must be >= {MIN_SIDE}, got {width}x{height}")


def gen_regular_maze(seed: int, width: int, height: int) -> Maze:
    """Perfect maze by randomized depth-first carving from the start corner."""
    _check_dims(width, height)
    rng = np.random.default_rng(seed)
    east, south = _closed_grid(width, height)
    visited = np.zeros((height, width), dtype=bool)
    stack: list[Cell] = [(0, 0)]
    visited[0, 0] = True
    while stack:
        r, c = stack[-1]
        choices = [
            (r + dr, c + dc)
            for dr, dc in NEIGHBOR_ORDER
            if 0 <= r + dr < height and 0 <= c + dc < width and not visited[r + dr, c + dc]
        ]
        if not choices:
            stack.pop()
            continue
        nxt = choices[int(rng.integers(len(choices)))]
        _carve(east, south, (r, c), nxt)
        visited[nxt] = True
        stack.append(nxt)
    return Maze(width, height, east, south, (0, 0), (height - 1, width - 1),
                frozenset(), MazeKind.REGULAR, seed)


def gen_trapfield(seed: int, width: int, height: int, trap_fraction: float) -> Maze:
    """Open grid with traps placed by rejection sampling until start and goal stay connected."""
    _check_dims(width, height)
    if not 0.0 <= trap_fraction <= MAX_TRAP_FRACTION:
        raise InvalidArgument(f"trap_fraction must lie in [0, {MAX_TRAP_FRACTION}], got {trap_fraction}")
    rng = np.random.default_rng(seed)
    east = np.zeros((height, width - 1), dtype=bool)
    south = np.zeros((height - 1, width), dtype=bool)
    start, goal = (0, 0), (height - 1, width - 1)
    candidates = [(r, c) for r in range(height) for c in range(width) if (r, c) not in (start, goal)]
    n_traps = int(round(trap_fraction * len(candidates)))
    for _ in range(TRAP_RETRY_BUDGET):
        picks = rng.choice(len(candidates), size=n_traps, replace=False)
        traps = frozenset(candidates[i] for i in sorted(picks))
        maze = Maze(width, height, east, south, start, goal, traps, MazeKind.TRAPFIELD, seed)
        if _bfs_parents(maze) is not None:
            return maze
    raise GenerationFailure(
        f"no connected trapfield after {TRAP_RETRY_BUDGET} attempts (seed={seed}, fraction={trap_fraction})"
    )


def _bfs_parents(maze: Maze) -> dict[Cell, Cell | None] | None:
    parents: dict[Cell, Cell | None] = {maze.start: None}
    queue = deque([maze.start])
    while queue:
        cell = queue.popleft()
        if cell == maze.goal:
            return parents
        for nb in maze.open_neighbors(cell):
            if nb not in parents:
                parents[nb] = cell
                queue.append(nb)
    return None


def solve_optimal(maze: Maze) -> CellPath:
    """Canonical shortest start-to-goal path (BFS, expansion order up/right/down/left)."""
    parents = _bfs_parents(maze)
    if parents is None:
        raise GenerationFailure("maze has no start-to-goal path")
    path = [maze.goal]
    while parents[path[-1]] is not None:
        path.append(parents[path[-1]])
    return tuple(reversed(path))


def dijkstra_length(maze: Maze) -> int | None:
    """Cell count of a shortest path via Dijkstra on unit weights; None when unreachable."""
    dist = {maze.start: 0}
    heap = [(0, maze.start)]
    while heap:
        d, cell = heapq.heappop(heap)
        if cell == maze.goal:
            return d + 1
        if d > dist[cell]:
            continue
        for nb in maze.open_neighbors(cell):
            if d + 1 < dist.get(nb, 1 << 30):
                dist[nb] = d + 1
                heapq.heappush(heap, (d + 1, nb))
    return None


def is_valid_path(maze: Maze, path: CellPath) -> bool:
    if not path:
        return False
    if any(not maze.in_bounds(c) or c in maze.traps for c in path):
        return False
    return all(not maze.wall(a, b) for a, b in zip(path, path[1:]))


def check_maze_invariants(maze: Maze) -> None:
    """Raise AssertionError describing the first violated Maze invariant."""
    assert maze.start != maze.goal, "start equals goal"
    assert maze.start not in maze.traps and maze.goal not in maze.traps, "start/goal is a trap"
    assert maze.east.shape == (maze.height, maze.width - 1)
    assert maze.south.shape == (maze.height - 1, maze.width)
    assert _bfs_parents(maze) is not None, "no trap-avoiding path"
    for a in maze.cells():
        for dr, dc in NEIGHBOR_ORDER:
            b = (a[0] + dr, a[1] + dc)
            assert maze.wall(a, b) == maze.wall(b, a), f"asymmetric wall {a}-{b}"


def cell_center(cell: Cell) -> np.ndarray:
    return np.array([cell[0] + 0.5, cell[1] + 0.5])


def resample_polyline(points: np.ndarray, count: int) -> np.ndarray:
    """Linear interpolation of ``points`` at ``count`` uniform fractional indices."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n == 1:
        return np.repeat(points, count, axis=0)
    s = np.arange(count) * (n - 1) / (count - 1) if count > 1 else np.zeros(1)
    lo = np.minimum(np.floor(s).astype(int), n - 2)
    frac = (s - lo)[:, None]
    return points[lo] * (1.0 - frac) + points[lo + 1] * frac


def make_demo(maze: Maze, path: CellPath, frame_count: int):
    """Demonstration latent: path cell centers resampled to ``frame_count`` waypoints."""
    from .render import BG_REGIONS, TrajectoryLatent

    if frame_count < len(path):
        raise InvalidArgument(f"frame_count {frame_count} shorter than path length {len(path)}")
    if frame_count < 2:
        raise InvalidArgument("frame_count must be >= 2")
    centers = np.array([cell_center(c) for c in path])
    waypoints = resample_polyline(centers, frame_count)
    return TrajectoryLatent(waypoints, np.zeros((frame_count, BG_REGIONS)))


# --- serialization -------------------------------------------------------------


def maze_to_text(maze: Maze) -> str:
    lines = [f"MAZE {maze.kind.value} {maze.width} {maze.height} {maze.seed}"]
    for row in maze.east:
        lines.append("E " + "".join("1" if w else "0" for w in row))
    for row in maze.south:
        lines.append("S " + "".join("1" if w else "0" for w in row))
    lines.append(f"START {maze.start[0]} {maze.start[1]}")
    lines.append(f"GOAL {maze.goal[0]} {maze.goal[1]}")
    for r, c in sorted(maze.traps):
        lines.append(f"TRAP {r} {c}")
    return "\n".join(lines) + "\n"


def maze_from_text(text: str) -> Maze:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    try:
        tag, kind, w, h, seed = lines[0].split()
        if tag != "MAZE":
            raise FormatError(f"expected MAZE header, got {tag!r}")
        width, height = int(w), int(h)
        east_rows = [ln[2:] for ln in lines if ln.startswith("E ")]
        south_rows = [ln[2:] for ln in lines if ln.startswith("S ")]
        if len(east_rows) != height or len(south_rows) != height - 1:
            raise FormatError("wall bitmap row count does not match dimensions")
        east = np.array([[ch == "1" for ch in row] for row in east_rows], dtype=bool).reshape(height, width - 1)
        south = np.array([[ch == "1" for ch in row] for row in south_rows], dtype=bool).reshape(height - 1, width)
        start = goal = None
        traps = set()
        for ln in lines:
            parts = ln.split()
            if parts[0] == "START":
                start = (int(parts[1]), int(parts[2]))
            elif parts[0] == "GOAL":
                goal = (int(parts[1]), int(parts[2]))
            elif parts[0] == "TRAP":
                traps.add((int(parts[1]), int(parts[2])))
        if start is None or goal is None:
            raise FormatError("missing START or GOAL line")
        return Maze(width, height, east, south, start, goal, frozenset(traps), MazeKind(kind), int(seed))
    except (ValueError, IndexError) as exc:
        raise FormatError(f"malformed maze text: {exc}") from exc


def save_maze(maze: Maze, path: str | Path) -> None:
    Path(path).write_text(maze_to_text(maze))


def load_maze(path: str | Path) -> Maze:
    return maze_from_text(Path(path).read_text())


# --- navigation scenes ----------------------------------------------------------

ROOM_SIZE = 10.0
STOP_OFFSET = 0.3
DETOUR_CLEARANCE = 0.6
MIN_CLEARANCE = 0.15


@dataclass(eq=False)
class NavScene:
    """Planar room with disc obstacles, a goal landmark and a scripted reference rollout (x, y metres)."""

    extent: float
    obstacles: np.ndarray  # (k, 3): x, y, radius
    landmark: np.ndarray
    start: np.ndarray
    reference: np.ndarray  # (T*, 2)
    seed: int = 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NavScene):
            return NotImplemented
        return (
            self.extent == other.extent
            and self.seed == other.seed
            and all(np.array_equal(getattr(self, k), getattr(other, k))
                    for k in ("obstacles", "landmark", "start", "reference"))
        )


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    u = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + u * ab)))


def _polyline_clear(vertices: list[np.ndarray], obstacles: np.ndarray, margin: float) -> bool:
    for a, b in zip(vertices, vertices[1:]):
        for x, y, r in obstacles:
            if _segment_distance(np.array([x, y]), a, b) <= r + margin:
                return False
    return True


def _sample_polyline(vertices: list[np.ndarray], count: int) -> np.ndarray:
    pts = np.array(vertices)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, cum[-1], count)
    return np.column_stack([np.interp(targets, cum, pts[:, 0]), np.interp(targets, cum, pts[:, 1])])


def gen_nav_scene(seed: int) -> NavScene:
    """Room with 0-3 obstacles; the reference rollout follows a waypoint controller
    (straight to the landmark, one side-step waypoint per blocking obstacle) and is
    sampled uniformly by arc length."""
    rng = np.random.default_rng(seed)
    while True:
        start = rng.uniform(1.0, ROOM_SIZE - 1.0, size=2)
        landmark = rng.uniform(1.0, ROOM_SIZE - 1.0, size=2)
        if np.linalg.norm(landmark - start) < 5.0:
            continue
        n_obs = int(rng.integers(0, 4))
        obstacles = []
        for _ in range(n_obs):
            for _attempt in range(50):
                center = rng.uniform(1.5, ROOM_SIZE - 1.5, size=2)
                radius = float(rng.uniform(0.5, 1.0))
                if np.linalg.norm(center - start) < radius + 0.8 or np.linalg.norm(center - landmark) < radius + 0.8:
                    continue
                if any(np.hypot(center[0] - ox, center[1] - oy) < radius + orad + 0.8 for ox, oy, orad in obstacles):
                    continue
                obstacles.append((float(center[0]), float(center[1]), radius))
                break
        obs = np.array(obstacles, dtype=float).reshape(-1, 3)
        direction = (landmark - start) / np.linalg.norm(landmark - start)
        stop = landmark - STOP_OFFSET * direction
        normal = np.array([-direction[1], direction[0]])
        blocking = sorted(
            (float((np.array([x, y]) - start) @ direction), (x, y, r))
            for x, y, r in obs
            if _segment_distance(np.array([x, y]), start, stop) <= r + DETOUR_CLEARANCE
        )
        vertices = [start]
        for _, (x, y, r) in blocking:
            c = np.array([x, y])
            side = -1.0 if float((c - start) @ normal) > 0 else 1.0
            vertices.append(c + side * normal * (r + DETOUR_CLEARANCE) * 1.5)
        vertices.append(stop)
        inside = all(0.3 <= v[0] <= ROOM_SIZE - 0.3 and 0.3 <= v[1] <= ROOM_SIZE - 0.3 for v in vertices)
        if not inside or not _polyline_clear(vertices, obs, MIN_CLEARANCE):
            continue
        count = int(rng.integers(20, 41))
        reference = _sample_polyline(vertices, count)
        return NavScene(ROOM_SIZE, obs, landmark, start, reference, seed)


def check_nav_invariants(scene: NavScene) -> None:
    ref = scene.reference
    assert 20 <= len(ref) <= 40
    assert np.all((ref[0] >= 0) & (ref[0] <= scene.extent)), "rollout starts outside room"
    assert np.linalg.norm(ref[-1] - scene.landmark) <= 0.5, "rollout ends away from landmark"
    for x, y, r in scene.obstacles:
        for a, b in zip(ref, ref[1:]):
            assert _segment_distance(np.array([x, y]), a, b) > r, "rollout intersects obstacle"
