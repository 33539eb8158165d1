"""Strategy comparison on held-out toy-world episodes."""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass

import numpy as np

from .metrics import FeatureEmbedder, drift_curve, flicker
from .orchestrator import STRATEGIES, ClipBuffer, GenerationPlan, RolloutInputs, generate
from .scheduler import JDCParams, TPDConfig
from .toyworld import WorldConfig, simulate, view_params

log = logging.getLogger(__name__)

REFERENCE_OFFSET = 500_000


@dataclass
class StrategyResult:
    strategy: str
    seed: int
    buckets: list                  # DriftBucket per horizon window
    flicker: float

    @property
    def last_frechet(self) -> float:
        return self.buckets[-1].value


def eval_episodes(world: WorldConfig, base: int, count: int, length: int):
    return [simulate(world, base + i, length) for i in range(count)]


def clip_flicker(clip: ClipBuffer, num_cond: int) -> float:
    """Mean flicker over the batch, from the last init frame onwards."""
    return float(np.mean([flicker(c[num_cond - 1:]) for c in clip.frames]))


def evaluate_clip(clip: ClipBuffer, reference: list[np.ndarray], num_cond: int, window: int,
                  embedder: FeatureEmbedder, min_samples: int = 100) -> tuple[list, float]:
    buckets = drift_curve(list(clip.frames), reference, window, embedder, num_cond, min_samples)
    return buckets, clip_flicker(clip, num_cond)


def run_comparison(field, world: WorldConfig, plan: GenerationPlan, tpd: TPDConfig, jdc: JDCParams,
                   seeds, episodes_per_seed: int, window: int, reference_episodes: int,
                   episode_seed_base: int, num_features: int = 32, feature_seed: int = 0,
                   min_samples: int = 100, strategies=STRATEGIES) -> list[StrategyResult]:
    """Roll out every strategy for every seed on the same init episodes."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    n = plan.num_cond
    length = n + plan.horizon
    vp = view_params(world)
    reference = [ep.frames for ep in
                 eval_episodes(world, episode_seed_base + REFERENCE_OFFSET, reference_episodes, length)]
    embedder = FeatureEmbedder(int(np.prod(world.frame_shape)), num_features, feature_seed)
    results = []
    for seed in seeds:
        eps = eval_episodes(world, episode_seed_base + seed * episodes_per_seed, episodes_per_seed, length)
        inputs = RolloutInputs.from_episodes(eps, n, world.arena_size, vp)
        for strategy in strategies:
            p = GenerationPlan(**{**plan.__dict__, "strategy": strategy, "seed": seed})
            clip = generate(field, inputs, p, tpd, jdc)
            buckets, fl = evaluate_clip(clip, reference, n, window, embedder, min_samples)
            log.info("seed %d %s last-bucket %.4f flicker %.5f", seed, strategy, buckets[-1].value, fl)
            results.append(StrategyResult(strategy, seed, buckets, fl))
    return results


def summarize(results: list[StrategyResult]) -> dict[str, dict[str, float]]:
    """Per-strategy medians over seeds."""
    out = {}
    for strategy in dict.fromkeys(r.strategy for r in results):
        rows = [r for r in results if r.strategy == strategy]
        num_buckets = len(rows[0].buckets)
        out[strategy] = {
            "median_last_frechet": statistics.median(r.last_frechet for r in rows),
            "median_flicker": statistics.median(r.flicker for r in rows),
            "median_bucket_frechet": [statistics.median(r.buckets[k].value for r in rows)
                                      for k in range(num_buckets)],
            "num_seeds": len(rows),
        }
    return out
