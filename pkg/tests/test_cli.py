import csv
import hashlib
import json
import statistics

import numpy as np
import pytest

from conftest import tiny_run_config
from longflow.cli import main
from longflow.nncore import load_checkpoint
from longflow.orchestrator import STRATEGIES, read_provenance
from longflow.toyworld import read_dataset


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_cfg(path, **overrides):
    path.write_text(json.dumps(tiny_run_config(**overrides)))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(root / "run.json")
    assert main(["gen-data", "--config", cfg, "--out", str(root / "nested" / "data.lfds")]) == 0
    assert main(["train", "--config", cfg, "--dataset", str(root / "nested" / "data.lfds"),
                 "--out", str(root / "model.lfck")]) == 0
    return root, cfg


def test_gen_data_creates_dirs_and_snapshot(pipeline):
    root, cfg = pipeline
    data = root / "nested" / "data.lfds"
    world, eps = read_dataset(data)
    assert len(eps) == 4 and eps[0].frames.shape == (200, 1, 8, 8)
    snap = json.loads((root / "nested" / "data.lfds.config.json").read_text())
    assert snap["world"]["num_obstacles"] == 4           # defaults materialized
    assert main(["gen-data", "--config", cfg, "--out", str(root / "again.lfds")]) == 0
    assert _sha(root / "again.lfds") == _sha(data)
    assert main(["gen-data", "--config", cfg, "--seed", "1", "--out", str(root / "other.lfds")]) == 0
    assert _sha(root / "other.lfds") != _sha(data)


def test_malformed_config_names_key(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "bad.json", **{"train.lr": 0.5})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d.lfds")]) == 1
    assert "train.lr" in capsys.readouterr().err
    assert not (tmp_path / "d.lfds").exists()


def test_missing_config_file(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "d")]) == 1


def test_train_outputs(pipeline):
    root, _ = pipeline
    store, backbone, _ = load_checkpoint(root / "model.lfck")
    assert store.step == 6 and backbone == "mlp"
    for k in (1, 2, 3):
        assert load_checkpoint(root / f"model.lfck.stage{k}")[0].step == 2 * k
    rows = list(csv.reader((root / "model.lfck.loss.csv").open()))
    assert rows[0] == ["step", "stage", "loss", "learning_rate"]
    assert [int(r[0]) for r in rows[1:]] == list(range(6))


def test_train_zero_budget_and_initial_loss(pipeline, tmp_path):
    root, _ = pipeline
    cfg = _write_cfg(tmp_path / "z.json", **{"train.stage_steps": [0, 0, 0]})
    out = tmp_path / "z.lfck"
    assert main(["train", "--config", cfg, "--dataset", str(root / "nested" / "data.lfds"), "--out", str(out)]) == 0
    assert load_checkpoint(out)[0].step == 0

    cfg = _write_cfg(tmp_path / "one.json", **{"train.stage_steps": [1, 0, 0], "train.batch_size": 512})
    out = tmp_path / "one.lfck"
    assert main(["train", "--config", cfg, "--dataset", str(root / "nested" / "data.lfds"), "--out", str(out)]) == 0
    first = float(list(csv.reader((tmp_path / "one.lfck.loss.csv").open()))[1][2])
    _, eps = read_dataset(root / "nested" / "data.lfds")
    frames = np.concatenate([ep.frames.reshape(len(ep.frames), -1) for ep in eps]).astype(np.float64)
    expected = (frames**2).sum(axis=1).mean() + frames.shape[1]
    assert first == pytest.approx(expected, rel=0.10)


def test_resume_continues_global_step(pipeline, tmp_path):
    root, _ = pipeline
    data = str(root / "nested" / "data.lfds")
    cfg = _write_cfg(tmp_path / "half.json", **{"train.stage_steps": [2, 1, 0]})
    assert main(["train", "--config", cfg, "--dataset", data, "--out", str(tmp_path / "half.lfck")]) == 0
    full = _write_cfg(tmp_path / "full.json")
    assert main(["train", "--config", full, "--dataset", data, "--resume", str(tmp_path / "half.lfck"),
                 "--out", str(tmp_path / "resumed.lfck")]) == 0
    resumed = load_checkpoint(tmp_path / "resumed.lfck")[0]
    straight = load_checkpoint(root / "model.lfck")[0]
    assert resumed.step == 6
    for k in straight.params:
        np.testing.assert_array_equal(resumed[k], straight[k])
    steps = [int(r[0]) for r in list(csv.reader((tmp_path / "resumed.lfck.loss.csv").open()))[1:]]
    assert steps == [3, 4, 5]


def test_train_nan_aborts_keeping_last_good(pipeline, tmp_path, monkeypatch):
    root, cfg = pipeline
    import longflow.training as training

    real = training.train_step
    calls = {"n": 0}

    def flaky(field, *a, **kw):
        calls["n"] += 1
        if calls["n"] == 4:
            field.store["frame.out.b"][...] = np.nan
        return real(field, *a, **kw)

    monkeypatch.setattr(training, "train_step", flaky)
    out = tmp_path / "m.lfck"
    code = main(["train", "--config", cfg, "--dataset", str(root / "nested" / "data.lfds"), "--out", str(out)])
    assert code == 2
    assert not out.exists()
    good = load_checkpoint(tmp_path / "m.lfck.stage1")[0]
    assert good.step == 2 and all(np.all(np.isfinite(v)) for v in good.params.values())
    assert not (tmp_path / "m.lfck.stage2").exists()


def test_train_rejects_mismatched_dataset(pipeline, tmp_path):
    root, _ = pipeline
    cfg = _write_cfg(tmp_path / "w.json", world={"frame_size": 12, "num_views": 1})
    assert main(["train", "--config", cfg, "--dataset", str(root / "nested" / "data.lfds"),
                 "--out", str(tmp_path / "x")]) == 1


def test_sample_single_window_and_determinism(pipeline, tmp_path):
    root, cfg = pipeline
    args = ["sample", "--config", cfg, "--checkpoint", str(root / "model.lfck"), "--strategy", "recurrent",
            "--horizon", "12", "--episodes", "2"]
    assert main(args + ["--out", str(tmp_path / "a.lfds")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.lfds")]) == 0
    assert _sha(tmp_path / "a.lfds") == _sha(tmp_path / "b.lfds")
    assert _sha(tmp_path / "a.lfds.provenance.csv") == _sha(tmp_path / "b.lfds.provenance.csv")
    _, eps = read_dataset(tmp_path / "a.lfds")
    assert len(eps) == 2 and eps[0].frames.shape == (16, 1, 8, 8)
    prov = read_provenance(tmp_path / "a.lfds.provenance.csv")
    assert prov.count("generated") == 12


def test_sample_unknown_strategy_lists_valid(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    with pytest.raises(SystemExit) as exc:
        main(["sample", "--config", cfg, "--checkpoint", str(root / "model.lfck"), "--strategy", "zigzag",
              "--out", str(tmp_path / "s")])
    assert exc.value.code == 1
    err = capsys.readouterr().err
    assert all(s in err for s in STRATEGIES)


def test_sample_incompatible_checkpoint(pipeline, tmp_path):
    root, _ = pipeline
    cfg = _write_cfg(tmp_path / "m.json", **{"model.hidden": 32})
    assert main(["sample", "--config", cfg, "--checkpoint", str(root / "model.lfck"),
                 "--out", str(tmp_path / "s")]) == 1


def test_eval_reports(pipeline, tmp_path):
    root, cfg = pipeline
    clip = tmp_path / "c.lfds"
    assert main(["sample", "--config", cfg, "--checkpoint", str(root / "model.lfck"), "--episodes", "2",
                 "--out", str(clip)]) == 0
    assert main(["eval", "--config", cfg, "--clip", str(clip), "--out", str(tmp_path / "rep")]) == 0
    doc = json.loads((tmp_path / "rep.json").read_text())
    assert [b["bucket"] for b in doc["frechet"]] == [[0, 24]]
    assert doc["flicker"] >= 0.0
    assert (tmp_path / "rep.csv").read_text().startswith("metric,bucket_start")


def test_schedule_csv(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["schedule", "--steps", "5", "--frames", "3", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert len(rows) == 1 + 6
    table = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert np.all(table[0, 4:] < 1.0) and np.all(table[-1] == 1.0)
    assert main(["schedule", "--steps", "5", "--frames", "3", "--no-anchor", "--out", str(tmp_path / "n.csv")]) == 0
    assert main(["schedule", "--steps", "0", "--out", str(tmp_path / "bad.csv")]) == 1


def test_compare_report(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    out = tmp_path / "cmp"
    assert main(["compare", "--config", cfg, "--checkpoint", str(root / "model.lfck"), "--seeds", "3",
                 "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert all(s in printed for s in STRATEGIES)
    doc = json.loads((tmp_path / "cmp.json").read_text())
    assert doc["seeds"] == [0, 1, 2] and len(doc["per_seed"]) == 9
    for s in STRATEGIES:
        rows = [r for r in doc["per_seed"] if r["strategy"] == s]
        assert doc["median"][s]["median_last_frechet"] == statistics.median(r["last_bucket_frechet"] for r in rows)
        assert doc["median"][s]["median_flicker"] == statistics.median(r["flicker"] for r in rows)
    csv_rows = list(csv.DictReader((tmp_path / "cmp.csv").open()))
    medians = {r["strategy"]: float(r["last_bucket_frechet"]) for r in csv_rows if r["seed"] == "median"}
    assert medians == {s: doc["median"][s]["median_last_frechet"] for s in STRATEGIES}


def test_compare_single_seed(pipeline, tmp_path):
    root, cfg = pipeline
    assert main(["compare", "--config", cfg, "--checkpoint", str(root / "model.lfck"), "--seeds", "1",
                 "--out", str(tmp_path / "one.json")]) == 0
    rows = list(csv.DictReader((tmp_path / "one.csv").open()))
    assert sorted(r["strategy"] for r in rows if r["seed"] != "median") == sorted(STRATEGIES)
    assert main(["compare", "--config", cfg, "--checkpoint", str(root / "model.lfck"), "--seeds", "0",
                 "--out", str(tmp_path / "z")]) == 1


def test_log_level_env(monkeypatch, tmp_path):
    monkeypatch.setenv("LONGFLOW_LOG", "debug")
    assert main(["schedule", "--out", str(tmp_path / "s.csv")]) == 0


def test_negative_seed(tmp_path):
    assert main(["schedule", "--seed", "-3", "--out", str(tmp_path / "s.csv")]) == 1
