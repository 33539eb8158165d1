"""Long-horizon rollout strategies.

recurrent       -- windows of S frames, each conditioned on the last N frames
divide_conquer  -- low-fps anchors first, then independent interpolation
                   windows between consecutive (frozen) anchors
coarse_refine   -- low-fps anchors first, then sequential high-fps windows
                   conditioned on the previous window's tail, each jointly
                   denoising and correcting the anchor at its tail

Global frame indices: the N init frames occupy 0..N-1 and the frame ``h``
steps past the last init frame (h = 1..horizon) sits at N - 1 + h. Anchor
offsets are multiples of high_fps / anchor_fps.

All strategies accept a batch of B independent rollouts.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .flowcore import ConditioningBundle, euler_sample
from .rng import stream
from .scheduler import ANCHOR, CONDITION, INTERPOLATION, JDCParams, TPDConfig, build_table, corrupt_anchor

log = logging.getLogger(__name__)

STRATEGIES = ("recurrent", "divide_conquer", "coarse_refine")
PROV_CONDITION = "condition"
PROV_GENERATED = "generated"
PROV_ANCHOR = "anchor-predicted"
PROV_CORRECTED = "anchor-corrected"
EMPTY = "empty"


@dataclass(frozen=True)
class GenerationPlan:
    strategy: str = "coarse_refine"
    num_cond: int = 4
    num_noisy: int = 12
    num_views: int = 2
    high_fps: int = 12
    anchor_fps: int = 1
    horizon: int = 120
    cfg_scale: float = 3.0
    num_steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; valid: {', '.join(STRATEGIES)}")
        if self.num_cond < 1 or self.num_noisy < 1:
            raise ValueError("num_cond and num_noisy must be >= 1")
        if self.anchor_fps < 1 or self.high_fps % self.anchor_fps:
            raise ValueError("anchor_fps must divide high_fps")
        if self.horizon < self.num_noisy:
            raise ValueError("horizon must be >= num_noisy")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")

    @property
    def stride(self) -> int:
        return self.high_fps // self.anchor_fps


@dataclass
class RolloutInputs:
    """Init frames and the full waypoint track for B rollouts."""

    init_frames: np.ndarray      # (B, N, V, H, W)
    waypoints: np.ndarray        # (B, L, 2) world units, global indices 0..L-1
    scene_id: np.ndarray         # (B,)
    arena_size: float
    view_params: np.ndarray      # (V, 3)

    @property
    def batch(self) -> int:
        return self.init_frames.shape[0]

    @property
    def frame_shape(self) -> tuple[int, ...]:
        return self.init_frames.shape[2:]

    @property
    def frame_dim(self) -> int:
        return int(np.prod(self.frame_shape))

    @classmethod
    def from_episodes(cls, episodes, num_cond: int, arena_size: float, view_params: np.ndarray):
        return cls(
            init_frames=np.stack([ep.frames[:num_cond] for ep in episodes]).astype(np.float64),
            waypoints=np.stack([ep.waypoints for ep in episodes]),
            scene_id=np.array([ep.scene_id for ep in episodes]),
            arena_size=arena_size,
            view_params=view_params,
        )


@dataclass
class AnchorSet:
    frames: np.ndarray           # (B, K, D)
    offsets: np.ndarray          # (K,) horizon offsets, multiples of the stride
    num_cond: int
    state: str = "clean-predicted"

    @property
    def indices(self) -> np.ndarray:
        return self.offsets + self.num_cond - 1

    def __len__(self) -> int:
        return len(self.offsets)


@dataclass
class ClipBuffer:
    frames: np.ndarray           # (B, T, V, H, W)
    provenance: list[str]
    strategy: str
    seed: int
    warnings: list[str] = field(default_factory=list)

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.frames.shape[1])


@dataclass
class Slot:
    role: str                    # condition | interpolation | anchor | empty
    index: int                   # global frame index (for waypoints and offsets)
    fps: int
    content: np.ndarray | None = None  # (B, D)


# ----------------------------------------------------------------------------
# one window


def _window_cond(inputs: RolloutInputs, slots: Sequence[Slot], num_cond: int) -> ConditioningBundle:
    b = inputs.batch
    ref = max((s.index for s in slots[:num_cond] if s.role != EMPTY), default=slots[num_cond].index - 1)
    last = inputs.waypoints.shape[1] - 1
    idx = np.array([min(max(s.index, 0), last) for s in slots])
    return ConditioningBundle(
        waypoints=inputs.waypoints[:, idx] / inputs.arena_size,
        fps_tag=np.tile(np.array([float(s.fps) for s in slots]), (b, 1)),
        offsets=np.tile(np.array([float(s.index - ref) for s in slots]), (b, 1)),
        is_cond=np.tile(np.array([s.role in (CONDITION, EMPTY) for s in slots]), (b, 1)),
        valid=np.tile(np.array([s.role != EMPTY for s in slots]), (b, 1)),
        scene_id=np.asarray(inputs.scene_id),
        drop_waypoints=np.zeros(b, bool),
        drop_scene=np.zeros(b, bool),
        view_params=inputs.view_params,
    )


def sample_window(field, inputs: RolloutInputs, slots: Sequence[Slot], plan: GenerationPlan,
                  tpd: TPDConfig, jdc: JDCParams | None, noise_rng: np.random.Generator,
                  jdc_rng: np.random.Generator | None = None) -> np.ndarray:
    """Denoise one window; returns (B, F, D) with condition slots untouched."""
    b, d = inputs.batch, inputs.frame_dim
    n = plan.num_cond
    roles = [CONDITION if s.role == EMPTY else s.role for s in slots]
    table = build_table(roles, _window_tpd(tpd, len(slots) - n, plan), jdc)
    noise = noise_rng.standard_normal((b, len(slots), d))
    x = np.zeros((b, len(slots), d))
    for j, s in enumerate(slots):
        if s.role == CONDITION:
            x[:, j] = s.content
        elif s.role == INTERPOLATION:
            x[:, j] = noise[:, j]
        elif s.role == ANCHOR:
            x[:, j] = corrupt_anchor(s.content, jdc.alpha2, jdc.sigma2, jdc_rng)
    cond = _window_cond(inputs, slots, n)
    return euler_sample(field, x, table, cond, plan.cfg_scale)


def _window_tpd(tpd: TPDConfig, count: int, plan: GenerationPlan) -> TPDConfig:
    if tpd.num_noisy_frames == count and tpd.num_steps == plan.num_steps:
        return tpd
    return TPDConfig(omega=tpd.omega, num_noisy_frames=count, num_steps=plan.num_steps, enabled=tpd.enabled)


# ----------------------------------------------------------------------------
# strategies


def _flat_init(inputs: RolloutInputs) -> np.ndarray:
    b, n = inputs.init_frames.shape[:2]
    return inputs.init_frames.reshape(b, n, -1).astype(np.float64)


def _finish(inputs, buf, prov, plan, strategy, warnings=()) -> ClipBuffer:
    n = plan.num_cond
    total = n + plan.horizon
    frames = buf[:, :total].reshape((inputs.batch, total) + inputs.frame_shape)
    return ClipBuffer(frames=frames, provenance=list(prov[:total]), strategy=strategy,
                      seed=plan.seed, warnings=list(warnings))


def _check_init(inputs: RolloutInputs, plan: GenerationPlan) -> None:
    if inputs.init_frames.shape[1] < plan.num_cond:
        raise ValueError(f"need at least {plan.num_cond} init frames")


def generate_recurrent(field, inputs: RolloutInputs, plan: GenerationPlan, tpd: TPDConfig,
                       strategy: str = "recurrent") -> ClipBuffer:
    _check_init(inputs, plan)
    n, s = plan.num_cond, plan.num_noisy
    init = _flat_init(inputs)[:, -n:]
    buf = np.zeros((inputs.batch, n + plan.horizon + s, inputs.frame_dim))
    buf[:, :n] = init
    prov = [PROV_CONDITION] * n + [PROV_GENERATED] * (plan.horizon + s)
    end, w = n, 0
    while end < n + plan.horizon:
        slots = [Slot(CONDITION, i, plan.high_fps, buf[:, i]) for i in range(end - n, end)]
        slots += [Slot(INTERPOLATION, end + k, plan.high_fps) for k in range(s)]
        out = sample_window(field, inputs, slots, plan, tpd, None, stream(plan.seed, "sample", "hi", w))
        buf[:, end:end + s] = out[:, n:]
        end += s
        w += 1
    return _finish(inputs, buf, prov, plan, strategy)


def generate_coarse(field, inputs: RolloutInputs, plan: GenerationPlan, tpd: TPDConfig) -> AnchorSet:
    """Low-fps anchors at offsets stride, 2*stride, ... <= horizon."""
    _check_init(inputs, plan)
    if plan.anchor_fps >= plan.high_fps:
        raise ValueError("anchor_fps must be lower than high_fps")
    n, s, r = plan.num_cond, plan.num_noisy, plan.stride
    wanted = plan.horizon // r
    init = _flat_init(inputs)[:, -n:]
    seq = [(i, plan.high_fps, init[:, i]) for i in range(n)]
    anchors: list[np.ndarray] = []
    w = 0
    while len(anchors) < wanted:
        tail = seq[-n:]
        ref = tail[-1][0]
        slots = [Slot(CONDITION, g, fps, content) for g, fps, content in tail]
        slots += [Slot(INTERPOLATION, ref + r * k, plan.anchor_fps) for k in range(1, s + 1)]
        out = sample_window(field, inputs, slots, plan, tpd, None, stream(plan.seed, "sample", "lo", w))
        for k in range(s):
            if len(anchors) == wanted:
                break
            anchors.append(out[:, n + k])
            seq.append((ref + r * (k + 1), plan.anchor_fps, out[:, n + k]))
        w += 1
    frames = np.stack(anchors, axis=1) if anchors else np.zeros((inputs.batch, 0, inputs.frame_dim))
    return AnchorSet(frames=frames, offsets=r * np.arange(1, wanted + 1), num_cond=n)


def generate_refine_window(field, inputs: RolloutInputs, buf: np.ndarray, end: int, anchors: AnchorSet,
                           plan: GenerationPlan, jdc: JDCParams, tpd: TPDConfig, window: int):
    """Denoise frames end..end+S-1 given buf[:, end-N:end] as conditions.

    Anchors falling inside the window are re-noised at g_max and corrected
    jointly with the interpolated frames. Returns (frames (B, S, D), roles).
    """
    n, s = plan.num_cond, plan.num_noisy
    by_index = {int(i): k for k, i in enumerate(anchors.indices)}
    slots = [Slot(CONDITION, i, plan.high_fps, buf[:, i]) for i in range(end - n, end)]
    for g in range(end, end + s):
        if g in by_index:
            slots.append(Slot(ANCHOR, g, plan.high_fps, anchors.frames[:, by_index[g]]))
        else:
            slots.append(Slot(INTERPOLATION, g, plan.high_fps))
    roles = [sl.role for sl in slots[n:]]
    has_anchor = ANCHOR in roles
    out = sample_window(field, inputs, slots, plan, tpd, jdc if has_anchor else None,
                        stream(plan.seed, "sample", "hi", window), stream(plan.seed, "jdc", window))
    return out[:, n:], roles


def generate_coarse_to_refine(field, inputs: RolloutInputs, plan: GenerationPlan, jdc: JDCParams,
                              tpd: TPDConfig) -> ClipBuffer:
    if plan.horizon <= plan.num_noisy:
        return generate_recurrent(field, inputs, plan, tpd, strategy="coarse_refine")
    anchors = generate_coarse(field, inputs, plan, tpd)
    n, s = plan.num_cond, plan.num_noisy
    buf = np.zeros((inputs.batch, n + plan.horizon + s, inputs.frame_dim))
    buf[:, :n] = _flat_init(inputs)[:, -n:]
    prov = [PROV_CONDITION] * n + [PROV_GENERATED] * (plan.horizon + s)
    warnings = []
    end, w = n, 0
    while end < n + plan.horizon:
        out, roles = generate_refine_window(field, inputs, buf, end, anchors, plan, jdc, tpd, w)
        if ANCHOR not in roles:
            msg = f"refine window {w} holds no anchor; sampled as a plain window"
            log.warning(msg)
            warnings.append(msg)
        buf[:, end:end + s] = out
        for k, role in enumerate(roles):
            if role == ANCHOR:
                prov[end + k] = PROV_CORRECTED
        end += s
        w += 1
    return _finish(inputs, buf, prov, plan, "coarse_refine", warnings)


def generate_divide_conquer(field, inputs: RolloutInputs, plan: GenerationPlan, tpd: TPDConfig,
                            order: Sequence[int] | None = None,
                            anchors: AnchorSet | None = None) -> ClipBuffer:
    """Frozen anchors, independent interpolation windows between them.

    ``order`` permutes window execution (the result must not depend on it).
    """
    if plan.horizon <= plan.num_noisy:
        return generate_recurrent(field, inputs, plan, tpd, strategy="divide_conquer")
    n, s, r = plan.num_cond, plan.num_noisy, plan.stride
    if s < r:
        raise ValueError("divide_conquer needs num_noisy >= high_fps / anchor_fps")
    if anchors is None:
        anchors = generate_coarse(field, inputs, plan, tpd)
    init = _flat_init(inputs)[:, -n:]
    buf = np.zeros((inputs.batch, n + plan.horizon + s, inputs.frame_dim))
    buf[:, :n] = init
    prov = [PROV_CONDITION] * n + [PROV_GENERATED] * (plan.horizon + s)
    by_index = {int(i): k for k, i in enumerate(anchors.indices)}
    num_windows = -(-plan.horizon // r)
    order = list(range(num_windows)) if order is None else list(order)
    if sorted(order) != list(range(num_windows)):
        raise ValueError("order must be a permutation of the window indices")
    last = n - 1 + plan.horizon
    for w in order:
        ref = n - 1 + w * r
        if w == 0:
            slots = [Slot(CONDITION, i, plan.high_fps, init[:, i]) for i in range(n)]
        else:
            slots = [Slot(EMPTY, ref - (n - 1 - i) * r, plan.anchor_fps) for i in range(n - 1)]
            slots.append(Slot(CONDITION, ref, plan.high_fps, anchors.frames[:, by_index[ref]]))
        for g in range(ref + 1, ref + s + 1):
            if g in by_index:
                slots.append(Slot(CONDITION, g, plan.high_fps, anchors.frames[:, by_index[g]]))
            else:
                slots.append(Slot(INTERPOLATION, g, plan.high_fps))
        out = sample_window(field, inputs, slots, plan, tpd, None, stream(plan.seed, "sample", "hi", w))
        stop = min(ref + r, last)
        buf[:, ref + 1:stop + 1] = out[:, n:n + stop - ref]
    for g, k in by_index.items():
        buf[:, g] = anchors.frames[:, k]
        prov[g] = PROV_ANCHOR
    return _finish(inputs, buf, prov, plan, "divide_conquer")


def generate(field, inputs: RolloutInputs, plan: GenerationPlan, tpd: TPDConfig, jdc: JDCParams) -> ClipBuffer:
    if plan.strategy == "recurrent":
        return generate_recurrent(field, inputs, plan, tpd)
    if plan.strategy == "divide_conquer":
        return generate_divide_conquer(field, inputs, plan, tpd)
    return generate_coarse_to_refine(field, inputs, plan, jdc, tpd)


# ----------------------------------------------------------------------------
# output files


def write_provenance(path: str | Path, clip: ClipBuffer) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "provenance", "strategy", "seed"])
        for i, p in enumerate(clip.provenance):
            w.writerow([i, p, clip.strategy, clip.seed])


def read_provenance(path: str | Path) -> list[str]:
    with open(path, newline="") as fh:
        return [row["provenance"] for row in csv.DictReader(fh)]
