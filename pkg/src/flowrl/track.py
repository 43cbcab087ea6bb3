"""Agent tracking: colour-blob centroids per frame, mapped to a cell-level step sequence."""

from __future__ import annotations

import numpy as np

from .envgen import CellPath
from .errors import EmptyTrajectory
from .render import Video

MIN_AGENT_PIXELS = 3


def agent_mask(frames: np.ndarray) -> np.ndarray:
    """Agent-blue pixel rule: B >= 180, R <= 90, G <= 90."""
    r, g, b = frames[..., 0], frames[..., 1], frames[..., 2]
    return (b >= 180) & (r <= 90) & (g <= 90)


def _centroids(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = agent_mask(frames)
    counts = mask.sum(axis=(-2, -1))
    h, w = frames.shape[-3:-1]
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    with np.errstate(invalid="ignore", divide="ignore"):
        cy = (mask.sum(axis=-1) * ys).sum(axis=-1) / counts
        cx = (mask.sum(axis=-2) * xs).sum(axis=-1) / counts
    return np.stack([cy, cx], axis=-1), counts >= MIN_AGENT_PIXELS


def locate_agent(frame: np.ndarray) -> np.ndarray | None:
    """Pixel-space centroid ``(y, x)`` of agent-blue pixels, or None when fewer than 3.

    Disjoint blobs are not separated: the centroid is taken over their union.
    """
    centroid, found = _centroids(frame[None])
    return centroid[0] if found[0] else None


def track_positions(video: Video) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame agent positions in environment units and a found-mask."""
    pix, found = _centroids(video.frames)
    return video.geometry.to_units(pix), found


def extract_trajectory(video: Video) -> CellPath:
    """Cells visited by the tracked agent, with not-found frames dropped and
    consecutive duplicates collapsed."""
    units, found = track_positions(video)
    if not np.any(found):
        raise EmptyTrajectory("agent not found in any frame")
    cells = np.floor(units[found]).astype(int)
    max_r, max_c = int(video.geometry.units_h) - 1, int(video.geometry.units_w) - 1
    cells[:, 0] = np.clip(cells[:, 0], 0, max_r)
    cells[:, 1] = np.clip(cells[:, 1], 0, max_c)
    path: list[tuple[int, int]] = []
    for r, c in cells:
        cell = (int(r), int(c))
        if not path or path[-1] != cell:
            path.append(cell)
    return tuple(path)


def glow_positions(video: Video, background: np.ndarray, level: float = 0.5) -> np.ndarray:
    """Per-frame ``(y, x)`` unit positions of a soft agent glow.

    Uses the blue-minus-red excess over ``background``; uniform brightness shifts cancel
    in that difference. The centroid is taken over pixels at or above ``level`` times
    the frame's peak excess, so the wide tails do not bias it toward the room center.
    """
    frames = video.frames.astype(float)
    bg = np.asarray(background, dtype=float)
    excess = (frames[..., 2] - frames[..., 0]) - (bg[..., 2] - bg[..., 0])
    peak = excess.reshape(len(frames), -1).max(axis=1)
    if np.any(peak <= 0):
        raise EmptyTrajectory("no glow found in at least one frame")
    weight = np.where(excess >= level * peak[:, None, None], excess, 0.0)
    h, w = frames.shape[1:3]
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    total = weight.sum(axis=(1, 2))
    pix = np.stack([(weight.sum(axis=2) * ys).sum(axis=1) / total,
                    (weight.sum(axis=1) * xs).sum(axis=1) / total], axis=-1)
    return video.geometry.to_units(pix)
