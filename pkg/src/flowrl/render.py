"""Deterministic rasterization of environments plus a trajectory latent into frame sequences.

Frames are ``uint8`` arrays of shape ``(H, W, 3)``. A maze coordinate ``(r, c)``
maps to the pixel-space point ``(oy + 0.5 + r * cell_px, ox + 0.5 + c * cell_px)``
where pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)``; cell borders therefore land
on the centers of one-pixel wall lines and cell centers on interior pixel centers.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envgen import Maze, NavScene
from .errors import ArtifactIOError, FormatError

FRAME_SIZE = 32
BG_REGIONS = 4
MAZE_MARGIN = 3

WALL = np.array([0, 0, 0], dtype=np.uint8)
CORRIDOR = np.array([200, 200, 200], dtype=np.uint8)
TRAP = np.array([200, 30, 30], dtype=np.uint8)
GOAL = np.array([30, 180, 30], dtype=np.uint8)
AGENT = np.array([20, 40, 255], dtype=np.uint8)

NAV_FLOOR = np.array([40, 40, 40], dtype=np.uint8)
NAV_OBSTACLE = np.array([90, 20, 20], dtype=np.uint8)
NAV_LANDMARK = np.array([20, 110, 20], dtype=np.uint8)
NAV_AGENT_GLOW = np.array([150, 170, 215], dtype=float)
NAV_GLOW_WIDTH_M = 1.5

# latent bg_field unit -> 8-bit brightness offset
BG_GAIN = 50.0

warnings: Counter = Counter()


@dataclass(frozen=True)
class Geometry:
    """Pixel layout of a video. ``units_w``/``units_h`` are the environment extent
    (cells for mazes, metres for rooms); ``cell_px`` is pixels per unit."""

    units_w: float
    units_h: float
    cell_px: float
    agent_radius_px: float
    frames: int
    frame_w: int = FRAME_SIZE
    frame_h: int = FRAME_SIZE

    @property
    def origin(self) -> tuple[int, int]:
        oy = int((self.frame_h - (self.units_h * self.cell_px + 1)) // 2)
        ox = int((self.frame_w - (self.units_w * self.cell_px + 1)) // 2)
        return oy, ox

    def to_pixel(self, pos) -> np.ndarray:
        pos = np.asarray(pos, dtype=float)
        oy, ox = self.origin
        return np.stack([oy + 0.5 + pos[..., 0] * self.cell_px, ox + 0.5 + pos[..., 1] * self.cell_px], axis=-1)

    def to_units(self, pix) -> np.ndarray:
        pix = np.asarray(pix, dtype=float)
        oy, ox = self.origin
        return np.stack([(pix[..., 0] - oy - 0.5) / self.cell_px, (pix[..., 1] - ox - 0.5) / self.cell_px], axis=-1)

    def with_frames(self, frames: int) -> "Geometry":
        return Geometry(self.units_w, self.units_h, self.cell_px, self.agent_radius_px, frames, self.frame_w, self.frame_h)


@dataclass
class TrajectoryLatent:
    """F waypoints (environment units) plus F x B regional background offsets (latent units)."""

    waypoints: np.ndarray
    bg_field: np.ndarray

    def __post_init__(self) -> None:
        self.waypoints = np.asarray(self.waypoints, dtype=float)
        self.bg_field = np.asarray(self.bg_field, dtype=float)
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 2:
            raise ValueError(f"waypoints must be (F, 2), got {self.waypoints.shape}")
        if self.bg_field.shape != (len(self.waypoints), BG_REGIONS):
            raise ValueError(f"bg_field must be ({len(self.waypoints)}, {BG_REGIONS}), got {self.bg_field.shape}")

    @property
    def frames(self) -> int:
        return len(self.waypoints)

    def to_vector(self, extent: tuple[float, float]) -> np.ndarray:
        """Flatten to the generative vector: waypoints scaled to [-1, 1] per axis, then bg_field."""
        scale = np.asarray(extent, dtype=float)
        return np.concatenate([(2.0 * self.waypoints / scale - 1.0).ravel(), self.bg_field.ravel()])

    @classmethod
    def from_vector(cls, vec: np.ndarray, frames: int, extent: tuple[float, float]) -> "TrajectoryLatent":
        vec = np.asarray(vec, dtype=float)
        scale = np.asarray(extent, dtype=float)
        wp = (vec[: 2 * frames].reshape(frames, 2) + 1.0) * scale / 2.0
        return cls(wp, vec[2 * frames: 2 * frames + BG_REGIONS * frames].reshape(frames, BG_REGIONS))


def latent_dim(frames: int) -> int:
    return 2 * frames + BG_REGIONS * frames


@dataclass
class Video:
    frames: np.ndarray  # (F, H, W, 3) uint8
    geometry: Geometry

    def __post_init__(self) -> None:
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (F, H, W, 3), got {self.frames.shape}")
        if len(self.frames) < 2:
            raise ValueError("a video needs at least 2 frames")

    def __len__(self) -> int:
        return len(self.frames)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Video):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.frames, other.frames)


def maze_geometry(maze: Maze, frames: int = 1, size: int = FRAME_SIZE) -> Geometry:
    usable = size - 1 - 2 * MAZE_MARGIN
    cell_px = min(usable // maze.width, usable // maze.height)
    radius = max(1.25, 0.3 * cell_px)
    return Geometry(maze.width, maze.height, float(cell_px), radius, frames, size, size)


def nav_geometry(scene: NavScene, frames: int = 1, size: int = FRAME_SIZE) -> Geometry:
    cell_px = (size - 1) / scene.extent
    return Geometry(scene.extent, scene.extent, cell_px, NAV_GLOW_WIDTH_M * cell_px, frames, size, size)


def _pixel_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w]
    return ys + 0.5, xs + 0.5


def _quadrant_masks(h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    top, left = ys < h // 2, xs < w // 2
    return np.stack([top & left, top & ~left, ~top & left, ~top & ~left])


class MazeCanvas:
    """Static layers of a maze rendering, reused for every frame of a video."""

    def __init__(self, maze: Maze, size: int = FRAME_SIZE) -> None:
        self.maze = maze
        self.geometry = maze_geometry(maze, 1, size)
        cp = int(self.geometry.cell_px)
        oy, ox = self.geometry.origin
        img = np.zeros((size, size, 3), dtype=np.uint8)
        corridor = np.zeros((size, size), dtype=bool)
        for r, c in maze.cells():
            y0, x0 = oy + r * cp + 1, ox + c * cp + 1
            cell_color = TRAP if (r, c) in maze.traps else GOAL if (r, c) == maze.goal else None
            if cell_color is None:
                corridor[y0:y0 + cp - 1, x0:x0 + cp - 1] = True
            else:
                img[y0:y0 + cp - 1, x0:x0 + cp - 1] = cell_color
            if c + 1 < maze.width and not maze.east[r, c]:
                corridor[y0:y0 + cp - 1, x0 + cp - 1] = True
            if r + 1 < maze.height and not maze.south[r, c]:
                corridor[y0 + cp - 1, x0:x0 + cp - 1] = True
        img[corridor] = CORRIDOR
        self.background = img
        self.corridor = corridor
        self.regions = (_quadrant_masks(size, size) & corridor).reshape(BG_REGIONS, -1).astype(float)
        self.centers = np.arange(size) + 0.5
        self.corridor_region = _quadrant_masks(size, size)[:, corridor].argmax(axis=0)

    def clamp(self, pos: np.ndarray) -> np.ndarray:
        pos = np.asarray(pos, dtype=float)
        hi = np.array([self.maze.height, self.maze.width], dtype=float)
        clamped = np.clip(pos, 0.0, hi)
        outside = np.any(clamped != pos, axis=-1)
        if np.any(outside):
            warnings["clamped_position"] += int(np.sum(outside))
        return clamped

    def render(self, positions: np.ndarray, bg_offsets: np.ndarray) -> np.ndarray:
        """Render F frames for agent ``positions`` (F, 2) and brightness ``bg_offsets`` (F, B)."""
        positions = self.clamp(np.atleast_2d(positions))
        bg_offsets = np.atleast_2d(np.asarray(bg_offsets, dtype=float))
        n = len(positions)
        # corridor pixels all share one base color, so each frame needs one shaded color per region
        palette = np.rint(np.clip(np.asarray(CORRIDOR, dtype=float) + bg_offsets[:, :, None], 0, 255))
        frames = np.repeat(self.background[None], n, axis=0)
        frames[:, self.corridor] = palette.astype(np.uint8)[:, self.corridor_region]
        pix = self.snap(positions)
        r = self.geometry.agent_radius_px
        c = self.centers
        d2 = (c[None, :, None] - pix[:, 0, None, None]) ** 2 + (c[None, None, :] - pix[:, 1, None, None]) ** 2
        frames[d2 <= r ** 2] = AGENT
        return frames

    def snap(self, positions: np.ndarray) -> np.ndarray:
        """Agent pixel center: snapped to the half-pixel lattice (so the rasterized disc is
        symmetric and its centroid exact), kept at least half a pixel inside the cell
        that contains the unsnapped position."""
        cp = self.geometry.cell_px
        limit = np.array([self.maze.height - 1, self.maze.width - 1])
        cell = np.clip(np.floor(positions), 0, limit)
        lo = self.geometry.to_pixel(cell) + 0.5
        hi = lo + cp - 1.0
        return np.clip(np.round(self.geometry.to_pixel(positions) * 2.0) / 2.0, lo, hi)


def canonical_background(maze: Maze, size: int = FRAME_SIZE) -> np.ndarray:
    """The maze with zero background perturbation and no agent."""
    return MazeCanvas(maze, size).background.copy()


def render_frame(maze: Maze, agent_pos, bg_offsets=None, size: int = FRAME_SIZE) -> np.ndarray:
    """Walls black, corridors light, traps red, goal green, agent a blue disc.
    ``bg_offsets`` are 8-bit brightness offsets for the four frame quadrants,
    applied to corridor pixels only and clamped to [0, 255]."""
    bg = np.zeros(BG_REGIONS) if bg_offsets is None else np.asarray(bg_offsets, dtype=float)
    return MazeCanvas(maze, size).render(np.asarray(agent_pos, dtype=float)[None], bg[None])[0]


def render_video(maze: Maze, latent: TrajectoryLatent, size: int = FRAME_SIZE, canvas: MazeCanvas | None = None) -> Video:
    if not (np.all(np.isfinite(latent.waypoints)) and np.all(np.isfinite(latent.bg_field))):
        raise ValueError("latent contains non-finite values")
    canvas = canvas or MazeCanvas(maze, size)
    frames = canvas.render(latent.waypoints, latent.bg_field * BG_GAIN)
    return Video(frames, canvas.geometry.with_frames(len(frames)))


class NavCanvas:
    """Top-down room view: dark floor, red obstacle discs, green landmark, agent as a radial glow.

    Positions are ``(x, y)`` metres; pixel rows follow ``y``.
    """

    def __init__(self, scene: NavScene, size: int = FRAME_SIZE) -> None:
        self.scene = scene
        self.geometry = nav_geometry(scene, 1, size)
        self.pix_y, self.pix_x = _pixel_centers(size, size)
        img = np.broadcast_to(NAV_FLOOR, (size, size, 3)).copy()
        floor = np.ones((size, size), dtype=bool)
        for x, y, r in scene.obstacles:
            py, px = self.geometry.to_pixel([y, x])
            disc = (self.pix_y - py) ** 2 + (self.pix_x - px) ** 2 <= (r * self.geometry.cell_px) ** 2
            img[disc] = NAV_OBSTACLE
            floor &= ~disc
        py, px = self.geometry.to_pixel([scene.landmark[1], scene.landmark[0]])
        disc = (self.pix_y - py) ** 2 + (self.pix_x - px) ** 2 <= (0.35 * self.geometry.cell_px) ** 2
        img[disc] = NAV_LANDMARK
        floor &= ~disc
        self.background = img
        self.floor = floor
        self.regions = (_quadrant_masks(size, size) & floor).reshape(BG_REGIONS, -1).astype(float)

    def render(self, positions: np.ndarray, bg_offsets: np.ndarray) -> np.ndarray:
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        clamped = np.clip(positions, 0.0, self.scene.extent)
        if np.any(clamped != positions):
            warnings["clamped_position"] += int(np.sum(np.any(clamped != positions, axis=-1)))
        n = len(clamped)
        size = self.background.shape[0]
        bg_offsets = np.atleast_2d(np.asarray(bg_offsets, dtype=float))
        shift = (bg_offsets @ self.regions).reshape(n, size, size, 1)
        base = self.background[None].astype(float) + np.where(self.floor[None, :, :, None], shift, 0.0)
        pix = self.geometry.to_pixel(clamped[:, ::-1])
        d2 = (self.pix_y[None] - pix[:, 0, None, None]) ** 2 + (self.pix_x[None] - pix[:, 1, None, None]) ** 2
        glow = np.exp(-d2 / (2.0 * self.geometry.agent_radius_px ** 2))[..., None] * NAV_AGENT_GLOW
        return np.rint(np.clip(base + glow, 0, 255)).astype(np.uint8)


def render_nav_video(scene: NavScene, positions: np.ndarray, bg_field: np.ndarray | None = None,
                     size: int = FRAME_SIZE, canvas: NavCanvas | None = None) -> Video:
    positions = np.asarray(positions, dtype=float)
    bg = np.zeros((len(positions), BG_REGIONS)) if bg_field is None else np.asarray(bg_field, dtype=float)
    canvas = canvas or NavCanvas(scene, size)
    frames = canvas.render(positions, bg * BG_GAIN)
    return Video(frames, canvas.geometry.with_frames(len(frames)))


def reference_video(scene: NavScene, size: int = FRAME_SIZE) -> Video:
    return render_nav_video(scene, scene.reference, size=size)


# --- disk format ------------------------------------------------------------------


def write_ppm(path: Path, frame: np.ndarray) -> None:
    h, w, _ = frame.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(frame, dtype=np.uint8).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported")
    body = data[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: pixel data truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def _fmt(v: float) -> str:
    return repr(float(v))


def write_video(video: Video, directory: str | Path) -> None:
    """One P6 file per frame (``0000.ppm``, ...) plus a ``geometry`` sidecar:
    ``GEOM w h cell_px agent_radius_px frames``."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        g = video.geometry
        for i, frame in enumerate(video.frames):
            write_ppm(d / f"{i:04d}.ppm", frame)
        (d / "geometry").write_text(
            f"GEOM {_fmt(g.units_w)} {_fmt(g.units_h)} {_fmt(g.cell_px)} {_fmt(g.agent_radius_px)} {len(video)}\n"
        )
    except OSError as exc:
        raise ArtifactIOError(d, str(exc)) from exc


def read_video(directory: str | Path) -> Video:
    d = Path(directory)
    if not d.is_dir():
        raise ArtifactIOError(d, "not a directory")
    sidecar = d / "geometry"
    if not sidecar.exists():
        raise FormatError(f"{d}: missing geometry sidecar")
    parts = sidecar.read_text().split()
    if len(parts) != 6 or parts[0] != "GEOM":
        raise FormatError(f"{sidecar}: malformed geometry line")
    try:
        uw, uh, cp, radius = (float(p) for p in parts[1:5])
        count = int(parts[5])
    except ValueError as exc:
        raise FormatError(f"{sidecar}: malformed geometry values") from exc
    files = sorted(p for p in d.iterdir() if p.suffix == ".ppm" and p.stem.isdigit())
    if len(files) != count:
        raise FormatError(f"{d}: sidecar declares {count} frames, found {len(files)}")
    try:
        frames = np.stack([read_ppm(p) for p in files])
    except OSError as exc:
        raise ArtifactIOError(d, str(exc)) from exc
    if len({f.shape for f in frames}) != 1:
        raise FormatError(f"{d}: frames differ in size")
    h, w = frames.shape[1:3]
    return Video(frames, Geometry(uw, uh, cp, radius, count, w, h))
