"""Three-stage training curriculum on toy-world windows.

stage 1  next-S prediction, condition and target frames share one fps drawn
         from {1, 2, 12}
stage 2  conditions fixed at 12 fps, targets at 12 fps (short) or 1 fps (long)
stage 3  as stage 2; 12-fps windows get a tail anchor that is re-noised along
         the anchor corruption path (``anchor_rate``) or, otherwise, a clean
         tail condition (anchor interpolation) or nothing
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .flowcore import ConditioningBundle, VelocityField, flow_matching_loss
from .nncore import optimizer_step
from .rng import stream
from .scheduler import JDCParams, TPDConfig

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage_steps: tuple[int, int, int] = (300, 3000, 3000)
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    log_every: int = 50
    cond_drop: float = 0.15
    anchor_rate: float = 0.75
    single_cond_rate: float = 0.25
    high_fps: int = 12
    stage1_fps: tuple[int, ...] = (1, 2, 12)
    long_fps: int = 1

    def __post_init__(self):
        if len(self.stage_steps) != 3 or min(self.stage_steps) < 0:
            raise ValueError("stage_steps must be three non-negative counts")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def total_steps(self) -> int:
        return sum(self.stage_steps)

    def stage_of(self, step: int) -> int:
        acc = 0
        for i, n in enumerate(self.stage_steps):
            acc += n
            if step < acc:
                return i + 1
        return 3


@dataclass
class EpisodeArrays:
    frames: np.ndarray       # (E, T, D) float32
    waypoints: np.ndarray    # (E, T, 2) arena-normalised
    scene_id: np.ndarray     # (E,)
    view_params: np.ndarray

    @classmethod
    def from_episodes(cls, episodes, arena_size: float, view_params: np.ndarray) -> "EpisodeArrays":
        frames = np.stack([ep.frames.reshape(ep.frames.shape[0], -1) for ep in episodes])
        return cls(frames=frames, waypoints=np.stack([ep.waypoints for ep in episodes]) / arena_size,
                   scene_id=np.array([ep.scene_id for ep in episodes]), view_params=view_params)


@dataclass
class WindowBatch:
    x1: np.ndarray
    cond: ConditioningBundle
    anchor_mask: np.ndarray
    num_cond: int


def sample_windows(data: EpisodeArrays, stage: int, cfg: TrainConfig, num_cond: int, num_noisy: int,
                   rng: np.random.Generator) -> WindowBatch:
    b = cfg.batch_size
    n, s = num_cond, num_noisy
    f = n + s
    e, t_len, d = data.frames.shape
    x1 = np.zeros((b, f, d))
    wps = np.zeros((b, f, 2))
    fps = np.zeros((b, f))
    offs = np.zeros((b, f))
    is_cond = np.zeros((b, f), bool)
    valid = np.ones((b, f), bool)
    anchor = np.zeros((b, f), bool)
    eps_idx = rng.integers(e, size=b)
    for i in range(b):
        if stage == 1:
            fps_c = fps_n = int(rng.choice(cfg.stage1_fps))
        else:
            fps_c = cfg.high_fps
            fps_n = cfg.high_fps if rng.random() < 0.5 else cfg.long_fps
        rc, rn = cfg.high_fps // fps_c, cfg.high_fps // fps_n
        lo, hi = (n - 1) * rc, t_len - 1 - s * rn
        if hi < lo:
            raise ValueError("episodes too short for the requested window")
        ref = int(rng.integers(lo, hi + 1))
        idx = np.concatenate([ref - rc * np.arange(n - 1, -1, -1), ref + rn * np.arange(1, s + 1)])
        ep = eps_idx[i]
        x1[i] = data.frames[ep, idx]
        wps[i] = data.waypoints[ep, idx]
        fps[i, :n], fps[i, n:] = fps_c, fps_n
        offs[i] = idx - ref
        is_cond[i, :n] = True
        if n > 1 and rng.random() < cfg.single_cond_rate:
            valid[i, :n - 1] = False
            x1[i, :n - 1] = 0.0
        if stage == 3 and fps_n == cfg.high_fps:
            u = rng.random()
            if u < cfg.anchor_rate:
                anchor[i, -1] = True
            elif u < cfg.anchor_rate + 0.5 * (1.0 - cfg.anchor_rate):
                is_cond[i, -1] = True
    cond = ConditioningBundle(
        waypoints=wps, fps_tag=fps, offsets=offs, is_cond=is_cond, valid=valid,
        scene_id=data.scene_id[eps_idx],
        drop_waypoints=rng.random(b) < cfg.cond_drop,
        drop_scene=rng.random(b) < cfg.cond_drop,
        view_params=data.view_params,
    )
    return WindowBatch(x1=x1, cond=cond, anchor_mask=anchor, num_cond=n)


def train_step(field: VelocityField, batch: WindowBatch, tpd: TPDConfig, jdc: JDCParams,
               rng: np.random.Generator) -> float:
    b = batch.x1.shape[0]
    x0 = rng.standard_normal(batch.x1.shape)
    n1 = rng.standard_normal(batch.x1.shape)
    t = rng.random(b)
    field.store.zero_grad()
    return flow_matching_loss(field, x0, batch.x1, t, batch.cond, batch.num_cond, tpd,
                              batch.anchor_mask, jdc, n1)


def train(field: VelocityField, data: EpisodeArrays, cfg: TrainConfig, tpd: TPDConfig, jdc: JDCParams,
          seed: int, num_cond: int, num_noisy: int, log_path: str | Path | None = None,
          on_stage_end: Callable[[int], None] | None = None) -> list[tuple[int, int, float, float]]:
    """Run the curriculum from ``field.store.step`` up to ``cfg.total_steps``.

    Each step draws from its own named stream, so resuming from a checkpoint
    reproduces the uninterrupted run. Returns (step, stage, loss, rate) rows.
    """
    store = field.store
    history = []
    fh = None
    if log_path is not None:
        exists = Path(log_path).exists() and store.step > 0
        fh = open(log_path, "a" if exists else "w", newline="")
        writer = csv.writer(fh)
        if not exists:
            writer.writerow(["step", "stage", "loss", "learning_rate"])
    try:
        while store.step < cfg.total_steps:
            step = store.step
            stage = cfg.stage_of(step)
            rng = stream(seed, "train", step)
            batch = sample_windows(data, stage, cfg, num_cond, num_noisy, rng)
            loss = train_step(field, batch, tpd, jdc, rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step} (stage {stage})")
            try:
                rate = optimizer_step(store, cfg.learning_rate, warmup_steps=cfg.warmup_steps)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"step {step} (stage {stage}): {exc}") from exc
            history.append((step, stage, loss, rate))
            if fh is not None and (step % cfg.log_every == 0 or step == cfg.total_steps - 1):
                writer.writerow([step, stage, repr(loss), repr(rate)])
                fh.flush()
            if step % max(cfg.log_every, 1) == 0:
                log.info("step %d stage %d loss %.4f", step, stage, loss)
            if on_stage_end is not None and (store.step == cfg.total_steps
                                             or cfg.stage_of(store.step) != stage):
                on_stage_end(stage)
    finally:
        if fh is not None:
            fh.close()
    return history
