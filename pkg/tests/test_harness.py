import csv
import json
import math

import numpy as np
import pytest

from snmappo import cli, harness
from snmappo.errors import ConfigError, NumericError
from snmappo.harness import METRIC_COLUMNS, build_config, parse_config, read_csv, run_sweep, run_training

TINY = {"ppo.rollout_length": 128, "ppo.chunk_length": 32, "ppo.epochs": 1, "eval_interval": 1,
        "eval_episodes": 2, "checkpoint_interval": 1}


def tiny_config(tmp_path, **kw):
    values = {"env": "skirmish-5v6", "total_env_steps": 256, "out_dir": str(tmp_path), **TINY, **kw}
    return build_config(values)


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


def test_minimal_config(tmp_path):
    path = write_json(tmp_path / "c.json", {"env": "skirmish-5v6", "variant": "MidSN", "seeds": [1]})
    cfg = parse_config(path, {"out_dir": str(tmp_path / "out")})
    assert cfg.variant == "MidSN" and cfg.ppo.variant == "MidSN" and cfg.seeds == [1]
    assert cfg.ppo.learning_rate == 5e-4
    echoed = json.loads((tmp_path / "out" / "resolved_config.json").read_text())
    assert echoed["variant"] == "MidSN" and echoed["ppo.td_steps"] == 10


def test_override_beats_file(tmp_path):
    path = write_json(tmp_path / "c.json", {"env": "skirmish-5v6", "variant": "MidSN", "ppo.gamma": 0.9})
    cfg = parse_config(path, {"variant": "LastSN", "gamma": 0.95, "out_dir": str(tmp_path)})
    assert cfg.variant == "LastSN" and cfg.ppo.gamma == 0.95


def test_nested_ppo_section(tmp_path):
    path = write_json(tmp_path / "c.json", {"ppo": {"epochs": 2}, "out_dir": str(tmp_path)})
    assert parse_config(path).ppo.epochs == 2


@pytest.mark.parametrize("doc, key", [
    ({"ppo.learning_rate": -1.0}, "learning_rate"),
    ({"bogus": 1}, "bogus"),
    ({"ppo.epochs": "four"}, "ppo.epochs"),
    ({"ppo.epochs": True}, "ppo.epochs"),
    ({"seeds": [1, 1]}, "seeds"),
    ({"env": "moon"}, "env"),
    ({"total_env_steps": 10}, "total_env_steps"),
    ({"precision": "float16"}, "precision"),
])
def test_config_errors_name_the_key(tmp_path, doc, key):
    path = write_json(tmp_path / "c.json", {**doc, "out_dir": str(tmp_path)})
    with pytest.raises(ConfigError, match=key):
        parse_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.json")


def test_training_smoke_and_schema(tmp_path):
    cfg = tiny_config(tmp_path, variant="LastSN")
    path = run_training(cfg, 0)
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert len(rows) == 3
    data = read_csv(path)
    assert all(r["variant"] == "LastSN" for r in data)
    steps = [int(r["env_steps"]) for r in data]
    assert steps == sorted(set(steps))
    for r in data:
        for c in METRIC_COLUMNS[1:]:
            assert math.isfinite(float(r[c]))
        assert float(r["log10_critic_grad_norm"]) == pytest.approx(math.log10(float(r["critic_grad_norm_preclip"])),
                                                                   abs=1e-12)
    run_dir = cfg.run_dir(0)
    assert (run_dir / "checkpoint.pkl").exists()
    assert (run_dir / "status.txt").read_text().strip() == "completed"
    assert len(read_csv(run_dir / "eval.csv")) == 2


def test_identical_runs_are_byte_identical(tmp_path):
    a = run_training(tiny_config(tmp_path / "a"), 3)
    b = run_training(tiny_config(tmp_path / "b"), 3)
    assert a.read_bytes() == b.read_bytes()


def test_resume_reproduces_uninterrupted_run(tmp_path):
    full = run_training(tiny_config(tmp_path / "a", total_env_steps=640), 5)
    cfg = tiny_config(tmp_path / "b", total_env_steps=640)
    run_training(cfg, 5, stop_after_updates=2)
    assert len(read_csv(cfg.run_dir(5) / "metrics.csv")) == 2
    resumed = run_training(cfg, 5, resume=True)
    assert full.read_bytes() == resumed.read_bytes()
    assert (tmp_path / "a").joinpath(full.parent.name, "eval.csv").read_bytes() == \
        cfg.run_dir(5).joinpath("eval.csv").read_bytes()


def test_resume_discards_rows_after_checkpoint(tmp_path):
    cfg = tiny_config(tmp_path, total_env_steps=512, checkpoint_interval=2)
    full = run_training(tiny_config(tmp_path / "ref", total_env_steps=512, checkpoint_interval=2), 1).read_bytes()
    run_training(cfg, 1, stop_after_updates=3)
    # simulate a crash after update 3 whose checkpoint holds update 2
    harness.save_checkpoint(cfg.run_dir(1) / "checkpoint.pkl",
                            _trainer_after(cfg, 1, updates=2))
    assert run_training(cfg, 1, resume=True).read_bytes() == full


def _trainer_after(cfg, seed, updates):
    t = harness.Trainer(cfg, seed)
    for _ in range(updates):
        t.train_step()
        if t.updates % cfg.eval_interval == 0:
            t.evaluate()
    return t


def test_time_limit_stops_cleanly(tmp_path):
    cfg = tiny_config(tmp_path, total_env_steps=100_000, time_limit=0.01)
    path = run_training(cfg, 0)
    assert (cfg.run_dir(0) / "status.txt").read_text().strip() == "timeout"
    assert len(read_csv(path)) >= 1


def test_sweep_single_seed_std_zero(tmp_path):
    res = run_sweep(tiny_config(tmp_path, seeds=[4]))
    rows = read_csv(res.summary_path)
    assert rows and all(float(r[k]) == 0.0 for r in rows for k in r if k.endswith("_std"))


def test_sweep_summary_is_mean_of_seeds(tmp_path):
    res = run_sweep(tiny_config(tmp_path, seeds=[1, 2, 3]))
    assert len(res.run_files) == 3 and not res.failed
    runs = [read_csv(res.run_files[s]) for s in (1, 2, 3)]
    summary = read_csv(res.summary_path)
    for i, row in enumerate(summary):
        vals = np.array([float(r[i]["value_loss"]) for r in runs])
        assert float(row["value_loss_mean"]) == pytest.approx(vals.mean(), rel=1e-12)
        assert float(row["value_loss_std"]) == pytest.approx(vals.std(), rel=1e-9, abs=1e-15)


def test_sweep_records_failures(tmp_path, monkeypatch):
    original = harness.Trainer.train_step

    def flaky(self):
        if self.seed == 2:
            raise NumericError("injected")
        return original(self)

    monkeypatch.setattr(harness.Trainer, "train_step", flaky)
    res = run_sweep(tiny_config(tmp_path, seeds=[1, 2]))
    assert set(res.failed) == {2} and set(res.run_files) == {1}
    rows = read_csv(res.summary_path)
    assert all(r["warning"] == "1" and r["n_seeds"] == "1" for r in rows)
    assert "failed" in (tiny_config(tmp_path).run_dir(2) / "status.txt").read_text()


def test_random_baseline():
    out = harness.measure_random_baseline("warehouse-tiny-2ag", episodes=2, seed=0)
    assert out["episodes"] == 2 and out["deliveries"] >= 0


# ------------------------------------------------------------------ CLI


def test_cli_train_eval_and_errors(tmp_path, capsys):
    path = write_json(tmp_path / "c.json", {"env": "skirmish-5v5", **TINY, "total_env_steps": 128})
    assert cli.main(["train", "--config", str(path), "--seed", "2", "--out", str(tmp_path / "o")]) == 0
    ckpt = tmp_path / "o" / "skirmish-5v5_none_seed2" / "checkpoint.pkl"
    assert ckpt.exists()
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--episodes", "2"]) == 0
    out = capsys.readouterr().out
    assert '"win_rate"' in out
    assert cli.main(["train", "--config", str(path), "--set", "ppo.learning_rate=-1"]) == 1
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.pkl")]) == 1
    assert cli.main(["baseline", "--env", "skirmish-5v5", "--episodes", "1"]) == 0


def test_cli_sweep(tmp_path):
    path = write_json(tmp_path / "c.json", {"env": "warehouse-tiny-2ag", **TINY, "total_env_steps": 128,
                                            "seeds": [0, 1], "out_dir": str(tmp_path / "s")})
    assert cli.main(["sweep", "--config", str(path)]) == 0
    assert (tmp_path / "s" / "summary_warehouse-tiny-2ag_none.csv").exists()


def test_cli_runtime_failure_exit_code(tmp_path, monkeypatch):
    def boom(self):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(harness.Trainer, "train_step", boom)
    assert cli.main(["train", "--env", "skirmish-5v5", "--steps", "1024", "--out", str(tmp_path)]) == 2


def test_analyze_gradients_cli(tmp_path):
    good = tmp_path / "good.csv"
    assert cli.main(["analyze-gradients", "--trials", "10", "--out", str(good)]) == 0
    rows = read_csv(good)
    assert {"predicted_ratio", "observed_ratio_min", "observed_ratio_max"} <= set(rows[0])
    assert all(r["passed"] == "1" for r in rows)
    bad = tmp_path / "bad.csv"
    assert cli.main(["analyze-gradients", "--trials", "10", "--skip-stop-gradient", "--out", str(bad)]) == 3


def test_parallel_sweep_matches_sequential(tmp_path):
    seq = run_sweep(tiny_config(tmp_path / "seq", seeds=[1, 2]))
    par = run_sweep(tiny_config(tmp_path / "par", seeds=[1, 2], workers=2))
    for s in (1, 2):
        assert seq.run_files[s].read_bytes() == par.run_files[s].read_bytes()
    assert seq.summary_path.read_bytes() == par.summary_path.read_bytes()
