"""Per-frame denoising schedules.

Two closed-form pieces live here:

* the progressive warp that lets frames close to the condition frames finish
  denoising earlier while every frame still reaches t = 1 on the final step;
* the anchor re-noising algebra used when predicted anchor frames are treated
  as partially noisy samples and corrected jointly with interpolated frames.

Timestamps follow the rectified-flow convention x_t = (1 - t) x0 + t x1, so
t = 0 is pure noise and t = 1 is clean data. The noise intensity is 1 - t.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CONDITION = "condition"
INTERPOLATION = "interpolation"
ANCHOR = "anchor"
ROLES = (CONDITION, INTERPOLATION, ANCHOR)


class NoCorruption(ValueError):
    """Raised when the requested anchor noise level is below the inherent level."""


@dataclass(frozen=True)
class TPDConfig:
    omega: float = math.pi / 2
    num_noisy_frames: int = 12
    num_steps: int = 50
    enabled: bool = True

    def __post_init__(self):
        if not (0.0 < self.omega <= math.pi / 2 + 1e-15):
            raise ValueError(f"omega must lie in (0, pi/2], got {self.omega}")
        if self.num_noisy_frames < 1:
            raise ValueError("num_noisy_frames must be >= 1")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")


@dataclass(frozen=True)
class JDCParams:
    """Inherent anchor noise ``alpha1`` and the corruption ceiling ``g_max``."""

    alpha1: float = 0.1
    g_max: float = 0.55

    def __post_init__(self):
        if not (0.0 <= self.alpha1 < 1.0):
            raise ValueError(f"alpha1 must lie in [0, 1), got {self.alpha1}")
        if not (self.alpha1 < self.g_max <= 1.0):
            raise ValueError(f"g_max must lie in (alpha1, 1], got {self.g_max}")

    @property
    def alpha2(self) -> float:
        return alpha2_of(self.g_max, self.alpha1)

    @property
    def sigma2(self) -> float:
        return sigma2_of(self.alpha1, self.alpha2)


def phase(s: int, total: int) -> float:
    if not (0 <= s < total):
        raise ValueError(f"noisy-frame index {s} outside [0, {total})")
    return 0.5 * math.pi * s / total


def warp(t, phase_s, omega: float = math.pi / 2):
    """Warped timestamp f(t, phase) for a noisy frame.

    Works elementwise on arrays. f(0) = 0 and f(1) = 1 hold exactly because
    numerator and denominator are the same expression at t = 0 and the
    numerator is cos(phase) - cos(phase) at t = 1.
    """
    t = np.asarray(t, dtype=np.float64)
    phase_s = np.asarray(phase_s, dtype=np.float64)
    if np.any((t < 0.0) | (t > 1.0)):
        raise ValueError("t must lie in [0, 1]")
    if np.any(omega + phase_s > math.pi + 1e-12):
        raise ValueError("omega + phase must not exceed pi")
    den = np.cos(omega + phase_s) - np.cos(phase_s)
    if np.any(np.abs(den) < 1e-15):
        raise ZeroDivisionError("degenerate warp denominator")
    num = np.cos((1.0 - t) * omega + phase_s) - np.cos(phase_s)
    out = 1.0 - num / den
    return out if out.ndim else float(out)


def g_of(t, params: JDCParams):
    """Anchor noise level: linear in the base noise intensity 1 - t."""
    t = np.asarray(t, dtype=np.float64)
    out = params.g_max * (1.0 - t)
    return out if out.ndim else float(out)


def alpha2_of(g: float, alpha1: float) -> float:
    if alpha1 >= 1.0:
        raise ValueError("alpha1 must be < 1")
    if g < alpha1:
        raise NoCorruption(f"g={g} below inherent level alpha1={alpha1}")
    return (g - alpha1) / (1.0 - alpha1)


def sigma2_of(alpha1: float, alpha2: float) -> float:
    if alpha2 <= 0.0:
        raise ZeroDivisionError("alpha2 = 0: nothing is added, variance undefined")
    return (alpha2 - 2.0 * alpha1 * alpha2 + 2.0 * alpha1) / alpha2


def corrupt_anchor(z: np.ndarray, alpha2: float, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """x_n = (1 - alpha2) z + alpha2 * sigma * eta, eta ~ N(0, 1)."""
    z = np.asarray(z, dtype=np.float64)
    if alpha2 <= 0.0:
        return z.copy()
    eta = rng.standard_normal(z.shape)
    return (1.0 - alpha2) * z + alpha2 * math.sqrt(sigma2) * eta


@dataclass
class ScheduleTable:
    """rows[i, j] is frame j's timestamp after i denoising steps."""

    rows: np.ndarray
    roles: tuple[str, ...]

    @property
    def num_steps(self) -> int:
        return self.rows.shape[0] - 1

    @property
    def num_frames(self) -> int:
        return self.rows.shape[1]

    def validate(self) -> None:
        if self.rows.ndim != 2 or self.rows.shape[1] != len(self.roles):
            raise ValueError("rows/roles shape mismatch")
        if np.any(np.diff(self.rows, axis=0) < 0.0):
            raise ValueError("schedule columns must be non-decreasing")
        if np.any(self.rows[-1] != 1.0):
            raise ValueError("last schedule row must be all 1.0")
        if np.any((self.rows < 0.0) | (self.rows > 1.0)):
            raise ValueError("timestamps must lie in [0, 1]")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + [f"frame{j}_{r}" for j, r in enumerate(self.roles)])
            for i, row in enumerate(self.rows):
                w.writerow([i] + [repr(float(v)) for v in row])


def noisy_positions(roles: Sequence[str]) -> tuple[int, int]:
    """(first slot after the leading condition block, count of slots from there)."""
    start = 0
    while start < len(roles) and roles[start] == CONDITION:
        start += 1
    return start, len(roles) - start


def build_table(roles: Sequence[str], tpd: TPDConfig, jdc: JDCParams | None = None) -> ScheduleTable:
    """Timestamp table for one window.

    Slots after the leading condition block are indexed s = 0..|S|-1 and must
    number exactly ``tpd.num_noisy_frames``; condition slots inside that range
    (e.g. a frozen tail frame) keep their phase position but stay at 1.
    """
    roles = tuple(roles)
    for r in roles:
        if r not in ROLES:
            raise ValueError(f"unknown frame role {r!r}")
    start, count = noisy_positions(roles)
    if count != tpd.num_noisy_frames:
        raise ValueError(f"{count} noisy slots but TPD expects {tpd.num_noisy_frames}")
    if ANCHOR in roles and jdc is None:
        raise ValueError("anchor slots need JDC parameters")

    n = tpd.num_steps
    grid = np.linspace(0.0, 1.0, n + 1)
    rows = np.ones((n + 1, len(roles)))
    for j, role in enumerate(roles):
        if role == INTERPOLATION:
            if tpd.enabled:
                rows[:, j] = warp(grid, phase(j - start, count), tpd.omega)
            else:
                rows[:, j] = grid
        elif role == ANCHOR:
            rows[:, j] = 1.0 - g_of(grid, jdc)
    rows[-1] = 1.0
    table = ScheduleTable(rows=rows, roles=roles)
    table.validate()
    return table
