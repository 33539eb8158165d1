"""Rectified-flow interpolation, training loss, guidance and Euler sampling."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from ..scheduler import CONDITION, JDCParams, ScheduleTable, TPDConfig, g_of, phase, sigma2_of, warp
from .model import ConditioningBundle


def interpolate(x0, x1, t):
    """x_t = (1 - t) x0 + t x1. ``t`` may be a scalar or broadcastable array."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0.0) | (t > 1.0)):
        raise ValueError("t must lie in [0, 1]")
    # the endpoints must come back bit-exact
    out = (1.0 - t) * x0 + t * x1
    out = np.where(t == 0.0, x0, out)
    out = np.where(t == 1.0, x1, out)
    return out if out.ndim else float(out)


def cfg_combine(v_cond, v_uncond, scale: float):
    if np.shape(v_cond) != np.shape(v_uncond):
        raise ValueError("guidance inputs must share a shape")
    if scale == 1.0:
        return np.array(v_cond, dtype=np.float64, copy=True)
    if scale == 0.0:
        return np.array(v_uncond, dtype=np.float64, copy=True)
    return v_uncond + scale * (v_cond - v_uncond)


def frame_timestamps(t: np.ndarray, is_cond: np.ndarray, num_cond_slots: int, tpd: TPDConfig | None) -> np.ndarray:
    """Per-slot warped timestamps for one global draw ``t`` per window."""
    b, f = is_cond.shape
    s_total = f - num_cond_slots
    out = np.ones((b, f))
    for j in range(num_cond_slots, f):
        s = j - num_cond_slots
        if tpd is not None and tpd.enabled:
            out[:, j] = warp(t, phase(s, s_total), tpd.omega)
        else:
            out[:, j] = t
    out[is_cond] = 1.0
    return out


def flow_matching_loss(field, x0: np.ndarray, x1: np.ndarray, t: np.ndarray,
                       cond: ConditioningBundle, num_cond_slots: int,
                       tpd: TPDConfig | None = None, anchor_mask: np.ndarray | None = None,
                       jdc: JDCParams | None = None, anchor_noise: np.ndarray | None = None,
                       backward: bool = True) -> float:
    """Masked flow-matching loss over a batch of windows.

    ``x0``/``x1`` are (B, F, D) noise and clean windows, ``t`` is one uniform
    draw per window. Ordinary noisy slots sit at their warped timestamp;
    anchor slots (``anchor_mask``) are built by the anchor corruption path at
    level g(t) and sit at 1 - g(t). ``anchor_noise`` supplies the inherent
    anchor noise n1 (defaults to zeros). The loss is the mean over noisy slots
    of ||y - v||^2, and parameter gradients are accumulated when
    ``backward`` is set.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    b, f, d = x1.shape
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    is_cond = np.asarray(cond.is_cond, bool)
    valid = np.asarray(cond.valid, bool)
    m = np.zeros((b, f), bool) if anchor_mask is None else np.asarray(anchor_mask, bool)
    if m.shape != (b, f):
        raise ValueError(f"anchor mask shape {m.shape} does not match windows {(b, f)}")
    if np.any(m & is_cond):
        raise ValueError("a slot cannot be both condition and anchor")
    if m.any() and jdc is None:
        raise ValueError("anchor slots need JDC parameters")

    tt = frame_timestamps(t, is_cond, num_cond_slots, tpd)
    y = x1 - x0
    x_in = interpolate(x0, x1, tt[..., None])

    if m.any():
        g = np.broadcast_to(g_of(t, jdc), (b,))
        n1 = np.zeros_like(x1) if anchor_noise is None else np.asarray(anchor_noise, dtype=np.float64)
        a1 = jdc.alpha1
        for bi, j in zip(*np.nonzero(m)):
            gb = float(g[bi])
            tt[bi, j] = 1.0 - gb
            if gb > a1:
                a2 = (gb - a1) / (1.0 - a1)
                sig = math.sqrt(sigma2_of(a1, a2))
                z = (1.0 - a1) * x1[bi, j] + a1 * n1[bi, j]
                x_in[bi, j] = (1.0 - a2) * z + a2 * sig * x0[bi, j]
                n_eff = (a1 * (1.0 - a2) * n1[bi, j] + a2 * sig * x0[bi, j]) / gb
                y[bi, j] = x1[bi, j] - n_eff
            else:
                x_in[bi, j] = interpolate(x0[bi, j], x1[bi, j], 1.0 - gb)

    x_in[is_cond] = x1[is_cond]
    x_in[~valid] = 0.0
    weight = (valid & ~is_cond).astype(np.float64)
    total = weight.sum()
    if total == 0:
        raise ValueError("window has no noisy slots")

    v, cache = field.forward(x_in, tt, cond)
    r = y - v
    loss = float((weight * (r * r).sum(axis=-1)).sum() / total)
    if backward:
        field.backward(-2.0 * r * (weight / total)[..., None], cache)
    return loss


def euler_sample(field: Callable, x: np.ndarray, schedule: ScheduleTable, cond: ConditioningBundle,
                 cfg_scale: float = 1.0, hold: np.ndarray | None = None) -> np.ndarray:
    """Integrate dx/dt = v(x, t) along a per-frame timestamp table.

    ``x`` is (B, F, D); frame j moves by v * (rows[i+1, j] - rows[i, j]) on
    step i. Condition columns (by role, or by ``hold``) are never touched.
    """
    schedule.validate()
    x = np.array(x, dtype=np.float64, copy=True)
    b, f = x.shape[:2]
    if schedule.num_frames != f:
        raise ValueError("schedule width does not match the number of frames")
    fixed = np.array([r == CONDITION for r in schedule.roles])
    if hold is not None:
        fixed = fixed | np.asarray(hold, bool)
    move = np.nonzero(~fixed)[0]
    uncond = cond.dropped() if cfg_scale != 1.0 else None
    rows = schedule.rows
    for i in range(schedule.num_steps):
        t_row = np.broadcast_to(rows[i], (b, f))
        v = field(x, t_row, cond)
        if uncond is not None:
            v = cfg_combine(v, field(x, t_row, uncond), cfg_scale)
        if not np.all(np.isfinite(v[:, move])):
            raise FloatingPointError(f"non-finite velocity at step {i}")
        dt = rows[i + 1, move] - rows[i, move]
        x[:, move] += v[:, move] * dt[None, :, None]
    return x
