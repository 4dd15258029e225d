import json
import struct

import numpy as np
import pytest

from chexplore.errors import CheckpointError, CheckpointVersionError, ConfigError, FormatError, InvalidArgumentError
from chexplore.harness import checkpoint as ck
from chexplore.harness.cli import main
from chexplore.harness.config import load_config, make_config, resolve_config
from chexplore.harness.data import generate_synthetic_dataset, load_idx, load_idx_arrays, write_idx
from chexplore.harness.metrics import CSV_HEADER, read_metrics_csv, write_metrics_csv
from chexplore.harness.runner import build_trainer, run_experiment

TINY = {"dataset": "blobs", "n": 300, "noise": 0.8, "widths": [2, 6, 6, 3], "epochs": 4, "batch_size": 32,
        "dt_iters": 8}


# --------------------------------------------------------------------------- config


def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("")
    cfg = load_config(p)
    assert cfg.mode == "chex" and cfg.S == 0.5 and cfg.delta0 == 0.3 and cfg.dt_epochs == 2.0


def test_config_delta0_from_file(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("delta0 = 0.3\nscheduler = 'linear'\n")
    cfg = load_config(p)
    assert cfg.delta0 == 0.3 and cfg.scheduler == "linear"


def test_config_error_names_key(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("S = 1.2\n")
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert exc.value.key == "S" and "[0, 1)" in str(exc.value)


@pytest.mark.parametrize("text,key", [("delta0 = 0.0", "delta0"), ("t_max_fraction = 1.5", "t_max_fraction"),
                                      ("dt_iters = -1", "dt_iters"), ("scheduler = 'step'", "scheduler"),
                                      ("epochs = 'ten'", "epochs"), ("widths = [2]", "widths")])
def test_config_constraints(tmp_path, text, key):
    p = tmp_path / "c.toml"
    p.write_text(text)
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert exc.value.key == key


def test_config_parse_error(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("S = = 3")
    with pytest.raises(ConfigError):
        load_config(p)


def test_config_unknown_and_ignored_keys_warn():
    cfg = make_config({"mode": "plain", "delta0": 0.2, "colour": "blue"})
    assert any("colour" in w for w in cfg.warnings)
    assert any("delta0" in w for w in cfg.warnings)


def test_config_precedence(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("seed = 1\nS = 0.4\n")
    assert resolve_config(p, {}, environ={}).seed == 1
    assert resolve_config(p, {}, environ={"CHEX_SEED": "5"}).seed == 5
    cfg = resolve_config(p, {"seed": 9, "S": None}, environ={"CHEX_SEED": "5"})
    assert cfg.seed == 9 and cfg.S == 0.4


def test_config_to_iteration_grid():
    cfg = make_config({"epochs": 10, "batch_size": 60, "dt_epochs": 2.0, "t_max_fraction": 0.8})
    run = cfg.exploration(2400)
    assert (run.total_iters, run.dt, run.t_max, run.n_steps) == (400, 80, 320, 4)


# --------------------------------------------------------------------------- data


def test_blobs_noise_free_plain_training_is_perfect():
    cfg = make_config(dict(TINY, noise=0.0, classes=2, mode="plain", widths=[2, 6, 2], epochs=6))
    data = generate_synthetic_dataset("blobs", 300, 2, 0.0, 0)
    tr = build_trainer(cfg, data).run()
    assert tr.history[-1].acc == 1.0


def test_dataset_is_deterministic_and_stratified():
    a = generate_synthetic_dataset("spirals", 3000, 3, 0.1, 4)
    b = generate_synthetic_dataset("spirals", 3000, 3, 0.1, 4)
    assert np.array_equal(a.x_train, b.x_train) and np.array_equal(a.y_eval, b.y_eval)
    assert a.x_train.shape == (2400, 2) and a.x_eval.shape == (600, 2)
    assert np.bincount(a.y_eval).tolist() == [200, 200, 200]


def test_dataset_validation():
    with pytest.raises(InvalidArgumentError):
        generate_synthetic_dataset("blobs", 15, 2, 0.1, 0)
    with pytest.raises(InvalidArgumentError):
        generate_synthetic_dataset("moons", 100, 2, 0.1, 0)


def _idx_fixture(tmp_path, n=4):
    images = np.zeros((n, 2, 3), dtype=np.uint8)
    images[0, 0, 0] = 255
    write_idx(tmp_path / "img.idx", images)
    write_idx(tmp_path / "lab.idx", np.array([0, 1, 0, 1][:n], dtype=np.uint8))
    return tmp_path / "img.idx", tmp_path / "lab.idx"


def test_idx_fixture_loads(tmp_path):
    x, y = load_idx_arrays(*_idx_fixture(tmp_path))
    assert x.shape == (4, 6) and y.tolist() == [0, 1, 0, 1]
    assert x[0, 0] == 1.0 and x.max() == 1.0


def test_idx_dataset_split(tmp_path):
    images = np.random.default_rng(0).integers(0, 256, size=(20, 2, 2), dtype=np.uint8)
    write_idx(tmp_path / "i", images)
    write_idx(tmp_path / "l", np.repeat([0, 1], 10).astype(np.uint8))
    d = load_idx(tmp_path / "i", tmp_path / "l")
    assert d.x_train.shape == (16, 4) and d.x_eval.shape == (4, 4)


def test_idx_truncated_file(tmp_path):
    img, lab = _idx_fixture(tmp_path)
    raw = img.read_bytes()
    img.write_bytes(raw[:-3])
    with pytest.raises(FormatError) as exc:
        load_idx_arrays(img, lab)
    assert "byte offset" in str(exc.value)
    img.write_bytes(raw[:6])
    with pytest.raises(FormatError):
        load_idx_arrays(img, lab)


def test_idx_bad_magic_and_count_mismatch(tmp_path):
    img, lab = _idx_fixture(tmp_path)
    with pytest.raises(FormatError):
        load_idx_arrays(lab, img)
    write_idx(lab, np.array([0, 1, 0], dtype=np.uint8))
    with pytest.raises(FormatError):
        load_idx_arrays(img, lab)
    img.write_bytes(struct.pack(">H", 8))
    with pytest.raises(FormatError):
        load_idx_arrays(img, lab)


# --------------------------------------------------------------------------- checkpoints


def _trainer(mode="chex", **kw):
    cfg = make_config(dict(TINY, mode=mode, **kw))
    data = generate_synthetic_dataset(cfg.dataset, cfg.n, cfg.classes, cfg.noise, cfg.data_seed)
    return cfg, data, build_trainer(cfg, data)


def test_checkpoint_round_trip_is_deep_equal(tmp_path):
    cfg, data, tr = _trainer(init_scheme="ema")
    tr.run(until=20)
    assert len(tr.cache) > 0
    snap = ck.capture(tr, cfg.echo())
    ck.save_checkpoint(tmp_path / "c.json", snap)
    back = ck.load_checkpoint(tmp_path / "c.json")
    assert back.to_json() == snap.to_json()
    assert json.dumps(back.to_json(), sort_keys=True) == json.dumps(snap.to_json(), sort_keys=True)


@pytest.mark.parametrize("mode", ["chex", "gradual", "one_shot_early"])
def test_resume_equals_uninterrupted(tmp_path, mode):
    cfg, data, full = _trainer(mode)
    full.run()
    _, _, part = _trainer(mode)
    part.run(until=13)
    ck.save_checkpoint(tmp_path / "c.json", ck.capture(part))
    resumed = ck.restore(ck.load_checkpoint(tmp_path / "c.json"), data).run()
    strip = lambda rows: [ck.metrics_row_to_json(r) for r in rows]
    assert strip(resumed.history) == strip(full.history)
    for k in full.net.params:
        assert resumed.net.params[k].tobytes() == full.net.params[k].tobytes()


def test_corrupt_checkpoint_is_rejected_and_untouched(tmp_path):
    _, _, tr = _trainer()
    tr.run(until=10)
    path = tmp_path / "c.json"
    ck.save_checkpoint(path, ck.capture(tr))
    raw = path.read_bytes()
    path.write_bytes(raw[:-40])
    with pytest.raises(CheckpointError):
        ck.load_checkpoint(path)
    assert path.read_bytes() == raw[:-40]
    doc = json.loads(raw)
    doc["body"]["loss_sum"] += 1.0
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        ck.load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    _, _, tr = _trainer()
    snap = ck.capture(tr)
    snap.version = 99
    ck.save_checkpoint(tmp_path / "c.json", snap)
    with pytest.raises(CheckpointVersionError):
        ck.load_checkpoint(tmp_path / "c.json")


def test_metrics_csv_round_trip(tmp_path):
    _, _, tr = _trainer()
    tr.run()
    write_metrics_csv(tmp_path / "m.csv", tr.history)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    back = read_metrics_csv(tmp_path / "m.csv")
    assert [ck.metrics_row_to_json(r) for r in back] == [ck.metrics_row_to_json(r) for r in tr.history]


def test_run_experiment_resume_matches(tmp_path):
    cfg = make_config(TINY)
    full = run_experiment(cfg, tmp_path / "full")
    run_experiment(cfg, tmp_path / "part", stop_at=17)
    resumed = run_experiment(cfg, tmp_path / "res", resume=tmp_path / "part" / "checkpoint.json")
    assert resumed.metrics_csv.read_bytes() == full.metrics_csv.read_bytes()


# --------------------------------------------------------------------------- CLI


def _write_config(tmp_path, **extra):
    values = dict(TINY, **extra)
    lines = []
    for k, v in values.items():
        lines.append(f"{k} = {json.dumps(v)}")
    p = tmp_path / "c.toml"
    p.write_text("\n".join(lines) + "\n")
    return p


def test_cli_run_is_deterministic(tmp_path):
    cfg = _write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--seed", "7", "--out", str(out)]) == 0
    first = out.rename(tmp_path / "first")
    assert main(["run", "--config", str(cfg), "--seed", "7", "--out", str(out)]) == 0
    for name in ("metrics.csv", "metrics.json", "checkpoint.json"):
        assert (first / name).read_bytes() == (out / name).read_bytes()


def test_cli_env_seed(tmp_path, monkeypatch):
    cfg = _write_config(tmp_path)
    monkeypatch.setenv("CHEX_SEED", "7")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "env")]) == 0
    monkeypatch.delenv("CHEX_SEED")
    assert main(["run", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "metrics.csv").read_bytes() == (tmp_path / "flag" / "metrics.csv").read_bytes()


def test_cli_ablate_scheduler(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["ablate", "--config", str(cfg), "--axis", "scheduler", "--seeds", "2", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    for name in ("constant", "linear", "cosine"):
        assert name in out
        cell = json.loads((tmp_path / "ablate_scheduler" / f"{name}.json").read_text())
        assert len(cell["accuracies"]) == 2
    rows = (tmp_path / "ablate_scheduler" / "summary.csv").read_text().splitlines()
    assert len(rows) == 4


def test_cli_ablate_parallel_matches_serial(tmp_path):
    cfg = _write_config(tmp_path)
    args = ["ablate", "--config", str(cfg), "--axis", "delta0", "--values", "0.1,0.3", "--seeds", "2"]
    assert main(args + ["--out", str(tmp_path / "s")]) == 0
    assert main(args + ["--out", str(tmp_path / "p"), "--jobs", "2"]) == 0
    s = (tmp_path / "s" / "ablate_delta0" / "summary.csv").read_text()
    assert s == (tmp_path / "p" / "ablate_delta0" / "summary.csv").read_text()


def test_cli_flops_and_export(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    assert main(["flops", str(tmp_path / "r" / "checkpoint.json")]) == 0
    assert "total:" in capsys.readouterr().out
    assert main(["export", str(tmp_path / "r" / "checkpoint.json"), "--out", str(tmp_path / "m.csv")]) == 0
    assert (tmp_path / "m.csv").read_bytes() == (tmp_path / "r" / "metrics.csv").read_bytes()
    assert main(["export", str(tmp_path / "m.csv"), "--format", "json", "--out", str(tmp_path / "m.json")]) == 0
    assert json.loads((tmp_path / "m.json").read_text())["metrics"]


def test_cli_error_exit_codes(tmp_path, capsys):
    assert main(["frobnicate"]) == 1
    assert main([]) == 1
    bad = tmp_path / "bad.toml"
    bad.write_text("S = 1.2\n")
    assert main(["run", "--config", str(bad)]) == 1
    assert "S" in capsys.readouterr().err
    assert main(["flops", str(tmp_path / "missing.json")]) == 1


def test_cli_oracle_check(capsys):
    assert main(["oracle-check"]) == 0
    assert "FAIL" not in capsys.readouterr().out
