"""Synthetic multi-view world used in place of real driving footage.

A point agent drives at constant speed through a square arena, steering
towards a slowly wandering target. Static disc obstacles are drawn per seed.
Each of the V cameras sees the arena through a fixed rotation + offset and
renders the agent as a Gaussian blob on top of the obstacle layer.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, astuple
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"LFDS"
DATASET_VERSION = 1
BLOB_SIGMA = 1.5
NUM_SCENES = 4
SCENE_SHADES = (0.3, 0.4, 0.5, 0.6)
TURN_RATE = 0.25
TARGET_SMOOTHING = 0.1
TARGET_STEP = 0.8


@dataclass(frozen=True)
class WorldConfig:
    arena_size: float = 16.0
    num_obstacles: int = 4
    agent_speed: float = 0.25
    num_views: int = 2
    frame_size: int = 16
    base_fps: int = 12

    def __post_init__(self):
        if self.frame_size < 8:
            raise ValueError("frame_size must be >= 8")
        if self.num_views < 1:
            raise ValueError("num_views must be >= 1")
        if not self.agent_speed > 0:
            raise ValueError("agent_speed must be > 0")
        if self.arena_size <= 0 or self.num_obstacles < 0 or self.base_fps < 1:
            raise ValueError("invalid world configuration")

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.num_views, self.frame_size, self.frame_size)


_CONFIG_FMT = "<dIdIII"


@dataclass
class WorldState:
    position: np.ndarray          # (2,)
    obstacles: np.ndarray         # (K, 3): x, y, radius
    scene_id: int = 0


@dataclass
class Episode:
    positions: np.ndarray         # (T, 2)
    velocities: np.ndarray        # (T, 2)
    waypoints: np.ndarray         # (T, 2)
    frames: np.ndarray            # (T, V, H, W) float32 in [0, 1]
    seed: int
    scene_id: int = 0
    obstacles: np.ndarray | None = None

    @property
    def num_steps(self) -> int:
        return len(self.positions)

    @property
    def states(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.positions, self.velocities))


def view_params(config: WorldConfig) -> np.ndarray:
    """(V, 3) rows of (rotation angle, x offset px, y offset px)."""
    rows = []
    for k in range(config.num_views):
        angle = 0.5 * math.pi * k
        shift = 0.25 * config.frame_size if k else 0.0
        rows.append((angle, shift, -shift))
    return np.array(rows)


def view_affine(view_index: int, config: WorldConfig) -> tuple[np.ndarray, np.ndarray]:
    """Matrix A and offset b so that pixel (col, row) = A @ world + b."""
    if not (0 <= view_index < config.num_views):
        raise IndexError(f"view_index {view_index} outside [0, {config.num_views})")
    angle, ox, oy = view_params(config)[view_index]
    s = config.frame_size / config.arena_size
    c, sn = math.cos(angle), math.sin(angle)
    a = s * np.array([[c, -sn], [sn, c]])
    centre_px = np.full(2, (config.frame_size - 1) / 2.0)
    centre_w = np.full(2, config.arena_size / 2.0)
    b = centre_px + np.array([ox, oy]) - a @ centre_w
    return a, b


def render(state: WorldState, view_index: int, config: WorldConfig) -> np.ndarray:
    a, b = view_affine(view_index, config)
    n = config.frame_size
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    pix = np.stack([cols, rows], axis=-1)                       # (H, W, 2) as (x, y)
    frame = np.zeros((n, n))
    if len(state.obstacles):
        world = (pix - b) @ np.linalg.inv(a).T
        shade = SCENE_SHADES[state.scene_id % NUM_SCENES]
        for ox, oy, r in state.obstacles:
            inside = (world[..., 0] - ox) ** 2 + (world[..., 1] - oy) ** 2 <= r * r
            frame[inside] = shade
    centre = a @ state.position + b
    d2 = ((pix - centre) ** 2).sum(axis=-1)
    blob = np.exp(-d2 / (2.0 * BLOB_SIGMA**2))
    return np.maximum(frame, blob)


def _reflect(p: np.ndarray, v: np.ndarray, size: float) -> None:
    for i in range(2):
        if p[i] < 0.0:
            p[i] = -p[i]
            v[i] = -v[i]
        elif p[i] > size:
            p[i] = 2.0 * size - p[i]
            v[i] = -v[i]


def simulate(config: WorldConfig, seed: int, num_steps: int, *, _speed: float | None = None) -> Episode:
    """Roll the world forward ``num_steps`` frames. ``_speed`` is a test hook."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    rng = np.random.default_rng(seed)
    size = config.arena_size
    speed = config.agent_speed if _speed is None else _speed
    scene_id = int(rng.integers(NUM_SCENES))
    radii = rng.uniform(0.08, 0.14, config.num_obstacles) * size
    centres = rng.uniform(0.15, 0.85, (config.num_obstacles, 2)) * size
    obstacles = np.column_stack([centres, radii]) if config.num_obstacles else np.zeros((0, 3))

    p = rng.uniform(0.2, 0.8, 2) * size
    heading = rng.uniform(0.0, 2.0 * math.pi)
    v = speed * np.array([math.cos(heading), math.sin(heading)])
    target = rng.uniform(0.2, 0.8, 2) * size
    wander = target.copy()

    positions = np.empty((num_steps, 2))
    velocities = np.empty((num_steps, 2))
    for k in range(num_steps):
        positions[k] = p
        velocities[k] = v
        wander = np.clip(wander + rng.normal(0.0, TARGET_STEP, 2) * size / 16.0, 0.0, size)
        target = target + TARGET_SMOOTHING * (wander - target)
        to_target = target - p
        dist = np.linalg.norm(to_target)
        vn = np.linalg.norm(v)
        if speed > 0 and dist > 1e-9 and vn > 0:
            d = (1.0 - TURN_RATE) * v / vn + TURN_RATE * to_target / dist
            dn = np.linalg.norm(d)
            if dn > 1e-12:
                v = speed * d / dn
        p = p + v
        _reflect(p, v, size)

    frames = np.empty((num_steps,) + config.frame_shape, dtype=np.float32)
    for k in range(num_steps):
        state = WorldState(positions[k], obstacles, scene_id)
        for view in range(config.num_views):
            frames[k, view] = render(state, view, config)
    return Episode(positions=positions, velocities=velocities, waypoints=positions.copy(),
                   frames=frames, seed=seed, scene_id=scene_id, obstacles=obstacles)


# ----------------------------------------------------------------------------
# dataset file


@dataclass
class DatasetSummary:
    num_episodes: int
    total_frames: int


def _write_episode(buf, ep: Episode) -> None:
    t, v, h, w = ep.frames.shape
    buf.write(struct.pack("<IIII", t, v, h, w))
    buf.write(struct.pack("<qI", int(ep.seed), int(ep.scene_id)))
    for arr in (ep.positions, ep.velocities, ep.waypoints):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(ep.frames, dtype="<f4").tobytes())


def write_dataset(path: str | Path, config: WorldConfig, episodes) -> DatasetSummary:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<I", DATASET_VERSION))
    buf.write(struct.pack(_CONFIG_FMT, *astuple(config)))
    episodes = list(episodes)
    buf.write(struct.pack("<I", len(episodes)))
    for ep in episodes:
        _write_episode(buf, ep)
    Path(path).write_bytes(buf.getvalue())
    return DatasetSummary(len(episodes), sum(ep.num_steps for ep in episodes))


def make_dataset(config: WorldConfig, num_episodes: int, steps_per_episode: int, seed: int,
                 path: str | Path) -> DatasetSummary:
    """Episode i is ``simulate(config, seed + i, steps_per_episode)``."""
    episodes = (simulate(config, seed + i, steps_per_episode) for i in range(num_episodes))
    return write_dataset(path, config, episodes)


def _read(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError("truncated dataset file")
    return raw


def read_dataset(path: str | Path) -> tuple[WorldConfig, list[Episode]]:
    with open(path, "rb") as fh:
        if _read(fh, 4) != DATASET_MAGIC:
            raise ValueError(f"{path}: bad magic, not a dataset file")
        (version,) = struct.unpack("<I", _read(fh, 4))
        if version != DATASET_VERSION:
            raise ValueError(f"{path}: dataset version {version}, expected {DATASET_VERSION}")
        config = WorldConfig(*struct.unpack(_CONFIG_FMT, _read(fh, struct.calcsize(_CONFIG_FMT))))
        (count,) = struct.unpack("<I", _read(fh, 4))
        episodes = []
        for _ in range(count):
            t, v, h, w = struct.unpack("<IIII", _read(fh, 16))
            seed, scene_id = struct.unpack("<qI", _read(fh, 12))
            tracks = [np.frombuffer(_read(fh, 16 * t), dtype="<f8").reshape(t, 2).astype(np.float64)
                      for _ in range(3)]
            frames = np.frombuffer(_read(fh, 4 * t * v * h * w), dtype="<f4").reshape(t, v, h, w)
            episodes.append(Episode(*tracks, frames=frames.astype(np.float32), seed=seed, scene_id=scene_id))
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after last episode")
    return config, episodes
