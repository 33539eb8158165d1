"""Command-line entry point: ``longflow <command> [options]``.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, save_config
from .evaluation import REFERENCE_OFFSET, eval_episodes, evaluate_clip, run_comparison, summarize
from .flowcore import VelocityField
from .metrics import FeatureEmbedder
from .nncore import load_checkpoint, save_checkpoint
from .orchestrator import STRATEGIES, ClipBuffer, RolloutInputs, generate, write_provenance
from .rng import stream
from .scheduler import ANCHOR, CONDITION, INTERPOLATION, JDCParams, TPDConfig, build_table
from .toyworld import Episode, make_dataset, read_dataset, view_params, write_dataset
from .training import EpisodeArrays, TrainingDiverged, train

log = logging.getLogger("longflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


def _report_paths(out: Path) -> tuple[Path, Path]:
    stem = out.with_suffix("") if out.suffix in (".csv", ".json") else out
    return stem.with_name(stem.name + ".csv"), stem.with_name(stem.name + ".json")


def _mkparent(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


def _data_seed(seed: int) -> int:
    return int(stream(seed, "data").integers(2**62))


def _load_field(path: str, cfg: RunConfig) -> VelocityField:
    from .flowcore import FieldConfig

    store, backbone, saved = load_checkpoint(path)
    fc = FieldConfig(**saved)
    expected = cfg.field_config()
    if fc != expected:
        raise UsageError(f"checkpoint {path} was trained with a different model configuration")
    return VelocityField(fc, store=store)


def _json_dump(path: Path, doc) -> None:
    _mkparent(path)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    _mkparent(out)
    summary = make_dataset(cfg.world, cfg.data.num_episodes, cfg.data.steps_per_episode,
                           _data_seed(cfg.seed), out)
    save_config(_sidecar(out, ".config.json"), cfg)
    log.info("wrote %d episodes (%d frames) to %s", summary.num_episodes, summary.total_frames, out)


def cmd_train(args, cfg: RunConfig) -> None:
    world, episodes = read_dataset(args.dataset)
    if world != cfg.world:
        raise UsageError("dataset world configuration differs from the run configuration")
    out = Path(args.out)
    _mkparent(out)
    save_config(_sidecar(out, ".config.json"), cfg)
    fc = cfg.field_config()
    if args.resume:
        field = _load_field(args.resume, cfg)
        log.info("resuming at global step %d", field.store.step)
    else:
        field = VelocityField(fc, stream(cfg.seed, "init"))
    data = EpisodeArrays.from_episodes(episodes, cfg.world.arena_size, view_params(cfg.world))

    def on_stage_end(stage: int) -> None:
        save_checkpoint(_sidecar(out, f".stage{stage}"), field.store, fc.backbone, fc.to_dict())

    try:
        train(field, data, cfg.train, cfg.tpd_config(), cfg.jdc, cfg.seed, cfg.plan.num_cond,
              cfg.plan.num_noisy, log_path=_sidecar(out, ".loss.csv"), on_stage_end=on_stage_end)
    except TrainingDiverged:
        log.error("training diverged; the last completed stage checkpoint is kept beside %s", out)
        raise
    save_checkpoint(out, field.store, fc.backbone, fc.to_dict())
    log.info("checkpoint written to %s (step %d)", out, field.store.step)


def _source_episodes(cfg: RunConfig, count: int, length: int):
    base = cfg.eval.episode_seed_base + cfg.seed * cfg.eval.episodes_per_seed
    return eval_episodes(cfg.world, base, count, length)


def cmd_sample(args, cfg: RunConfig) -> None:
    plan = cfg.generation_plan(**{k: v for k, v in (("strategy", args.strategy), ("horizon", args.horizon))
                                  if v is not None})
    field = _load_field(args.checkpoint, cfg)
    length = plan.num_cond + plan.horizon
    eps = _source_episodes(cfg, args.episodes, length)
    inputs = RolloutInputs.from_episodes(eps, plan.num_cond, cfg.world.arena_size, view_params(cfg.world))
    clip = generate(field, inputs, plan, cfg.tpd_config(), cfg.jdc)
    out = Path(args.out)
    _mkparent(out)
    write_clip(out, cfg, clip, eps)
    write_provenance(_sidecar(out, ".provenance.csv"), clip)
    save_config(_sidecar(out, ".config.json"), cfg)
    for w in clip.warnings:
        log.warning(w)


def write_clip(path: Path, cfg: RunConfig, clip: ClipBuffer, sources) -> None:
    """Generated frames in the dataset layout; tracks are the commanded ones."""
    t = clip.frames.shape[1]
    eps = [Episode(positions=src.positions[:t], velocities=src.velocities[:t], waypoints=src.waypoints[:t],
                   frames=frames.astype(np.float32), seed=src.seed, scene_id=src.scene_id)
           for src, frames in zip(sources, clip.frames)]
    write_dataset(path, cfg.world, eps)


def cmd_eval(args, cfg: RunConfig) -> None:
    world, clips = read_dataset(args.clip)
    n = cfg.plan.num_cond
    length = min(ep.frames.shape[0] for ep in clips)
    ref = eval_episodes(world, cfg.eval.episode_seed_base + REFERENCE_OFFSET, cfg.eval.reference_episodes, length)
    embedder = FeatureEmbedder(int(np.prod(world.frame_shape)), cfg.eval.num_features, cfg.eval.feature_seed)
    clip = ClipBuffer(frames=np.stack([ep.frames[:length] for ep in clips]), provenance=[],
                      strategy="", seed=cfg.seed)
    buckets, fl = evaluate_clip(clip, [ep.frames for ep in ref], n, cfg.eval.window, embedder,
                                cfg.eval.min_samples)
    csv_path, json_path = _report_paths(Path(args.out))
    _mkparent(csv_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "bucket_start", "bucket_stop", "value", "num_generated", "num_reference",
                    "valid", "seed"])
        for b in buckets:
            w.writerow(["frechet", b.start, b.stop, repr(b.value), b.num_generated, b.num_reference,
                        int(b.valid), cfg.seed])
        w.writerow(["flicker", "", "", repr(fl), len(clips), "", 1, cfg.seed])
    _json_dump(json_path, {
        "seed": cfg.seed,
        "flicker": fl,
        "frechet": [{"bucket": [b.start, b.stop], "value": None if not b.valid else b.value,
                     "num_generated": b.num_generated, "num_reference": b.num_reference,
                     "valid": b.valid} for b in buckets],
    })


def cmd_schedule(args, cfg: RunConfig) -> None:
    tpd = TPDConfig(omega=cfg.tpd.omega if args.omega is None else args.omega,
                    num_noisy_frames=cfg.plan.num_noisy if args.frames is None else args.frames,
                    num_steps=cfg.plan.num_steps if args.steps is None else args.steps,
                    enabled=cfg.tpd.enabled)
    jdc = None
    if not args.no_anchor:
        jdc = JDCParams(alpha1=cfg.jdc.alpha1 if args.alpha1 is None else args.alpha1,
                        g_max=cfg.jdc.g_max if args.gmax is None else args.gmax)
    s = tpd.num_noisy_frames
    roles = [CONDITION] * cfg.plan.num_cond + [INTERPOLATION] * (s - 1)
    roles.append(INTERPOLATION if jdc is None else ANCHOR)
    table = build_table(roles, tpd, jdc)
    out = Path(args.out)
    _mkparent(out)
    table.to_csv(out)


def cmd_compare(args, cfg: RunConfig) -> None:
    plan = cfg.generation_plan(**({} if args.horizon is None else {"horizon": args.horizon}))
    field = _load_field(args.checkpoint, cfg)
    num_seeds = cfg.eval.num_seeds if args.seeds is None else args.seeds
    if num_seeds < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = range(cfg.seed, cfg.seed + num_seeds)
    ev = cfg.eval
    results = run_comparison(field, cfg.world, plan, cfg.tpd_config(), cfg.jdc, seeds, ev.episodes_per_seed,
                             ev.window, ev.reference_episodes, ev.episode_seed_base, ev.num_features,
                             ev.feature_seed, ev.min_samples)
    summary = summarize(results)
    csv_path, json_path = _report_paths(Path(args.out))
    _mkparent(csv_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "seed", "last_bucket_frechet", "flicker"]
                   + [f"frechet_{b.start}_{b.stop}" for b in results[0].buckets])
        for r in results:
            w.writerow([r.strategy, r.seed, repr(r.last_frechet), repr(r.flicker)]
                       + [repr(b.value) for b in r.buckets])
        for strategy, row in summary.items():
            w.writerow([strategy, "median", repr(row["median_last_frechet"]), repr(row["median_flicker"])]
                       + [repr(v) for v in row["median_bucket_frechet"]])
    _json_dump(json_path, {
        "horizon": plan.horizon,
        "seeds": list(seeds),
        "window": ev.window,
        "per_seed": [{"strategy": r.strategy, "seed": r.seed, "last_bucket_frechet": r.last_frechet,
                      "flicker": r.flicker, "bucket_frechet": [b.value for b in r.buckets]} for r in results],
        "median": summary,
    })
    for strategy, row in summary.items():
        print(f"{strategy:15s} last-bucket frechet {row['median_last_frechet']:.4f}  "
              f"flicker {row['median_flicker']:.5f}")


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="longflow", description="Long-horizon flow generation on a synthetic world.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="run configuration JSON (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="root seed (overrides the config)")
        sp.add_argument("--out", required=True, help="output path")
        sp.set_defaults(func=fn)
        return sp

    add("gen-data", cmd_gen_data, "simulate the toy world and write a dataset file")
    sp = add("train", cmd_train, "run the three-stage training curriculum")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp = add("sample", cmd_sample, "roll out one strategy and write the clip")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--strategy", choices=STRATEGIES)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--episodes", type=int, default=1, help="number of rollouts in the batch")
    sp = add("eval", cmd_eval, "drift curve and flicker of a sampled clip file")
    sp.add_argument("--clip", required=True)
    sp = add("schedule", cmd_schedule, "write one window's timestamp table as CSV")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--frames", type=int)
    sp.add_argument("--omega", type=float)
    sp.add_argument("--alpha1", type=float)
    sp.add_argument("--gmax", type=float)
    sp.add_argument("--no-anchor", action="store_true", help="no anchor slot at the window tail")
    sp = add("compare", cmd_compare, "run every strategy over several seeds and report")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seeds", type=int, help="number of seeds, counting up from --seed")
    sp.add_argument("--horizon", type=int)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LONGFLOW_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg = load_config(args.config).with_seed(args.seed)
        args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"longflow: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"longflow: error: {exc}", file=sys.stderr)
        return 1
    except (FloatingPointError, ArithmeticError, OSError) as exc:
        print(f"longflow: runtime error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"longflow: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
