import numpy as np
import pytest
from hypothesis import settings

from longflow.flowcore import ConditioningBundle, FieldConfig, VelocityField

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def tiny_config(backbone: str = "mlp") -> FieldConfig:
    if backbone == "attn":
        return FieldConfig(frame_dim=16, backbone="attn", num_views=1, frame_size=4, hidden=8, cond_hidden=6,
                           num_frequencies=2, mix_dim=3, channels=4)
    return FieldConfig(frame_dim=6, hidden=8, cond_hidden=6, num_frequencies=2, mix_dim=3)


def random_field(backbone: str = "mlp", seed: int = 0, scale: float = 0.5) -> VelocityField:
    rng = np.random.default_rng(seed)
    field = VelocityField(tiny_config(backbone), rng)
    for p in field.store.params.values():
        p[...] = rng.normal(size=p.shape) * scale
    return field


def make_cond(b: int, num_cond: int, num_noisy: int, seed: int = 0, num_views: int = 1,
              drop: bool = False) -> ConditioningBundle:
    rng = np.random.default_rng(seed)
    f = num_cond + num_noisy
    is_cond = np.zeros((b, f), bool)
    is_cond[:, :num_cond] = True
    return ConditioningBundle(
        waypoints=rng.uniform(size=(b, f, 2)),
        fps_tag=np.full((b, f), 12.0),
        offsets=np.tile(np.arange(f) - num_cond + 1.0, (b, 1)),
        is_cond=is_cond,
        valid=np.ones((b, f), bool),
        scene_id=np.arange(b) % 4,
        drop_waypoints=np.full(b, drop),
        drop_scene=np.full(b, drop),
        view_params=np.tile([[0.3, 1.0, 2.0]], (num_views, 1)),
    )


@pytest.fixture
def field_factory():
    return random_field


def tiny_run_config(**overrides) -> dict:
    """A run configuration small enough for the whole CLI pipeline to finish in seconds."""
    doc = {
        "version": 1,
        "seed": 0,
        "world": {"frame_size": 8, "num_views": 1},
        "data": {"num_episodes": 4, "steps_per_episode": 200},
        "model": {"hidden": 16, "cond_hidden": 8, "num_frequencies": 3, "mix_dim": 4},
        "train": {"stage_steps": [2, 2, 2], "batch_size": 4, "warmup_steps": 2, "log_every": 1},
        "plan": {"num_views": 1, "num_steps": 3, "horizon": 24},
        "eval": {"num_seeds": 2, "episodes_per_seed": 2, "reference_episodes": 6, "min_samples": 10,
                 "num_features": 8},
    }
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if name:
            doc.setdefault(section, {})[name] = value
        else:
            doc[section] = value
    return doc


# acceptance report: one line per criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if report.when != "call" or not name.startswith("test_criterion_"):
        return
    number = int(name.split("_")[2])
    if report.failed and number not in ACCEPTANCE:
        message = str(report.longrepr).strip().splitlines()[-1] if report.longrepr else "error"
        record_criterion(number, False, message[:200])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
