from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from pregrasp.cli import cli_main
from pregrasp.environment import EnvConfig, observation_scale
from pregrasp.harness import (
    METRICS_COLUMNS,
    CheckpointVersionError,
    ConfigDigestError,
    CorruptCheckpointError,
    RunConfig,
    RunConfigError,
    bundle_tensors,
    checkpoint_meta,
    load_checkpoint,
    load_run_config,
    read_metrics,
    record_trace,
    resume_state,
    save_checkpoint,
    write_metrics,
    write_trace,
)
from pregrasp.neuralnet import ShapeError
from pregrasp.sac import MetricsRow, TrainerConfig, TrainState, make_bundle, train

SMOKE = {
    "env": {"episode_length": 20, "max_relative_speed": 0.2},
    "trainer": {"episodes": 4, "batch_size": 16, "hidden_sizes": [16, 16], "buffer_capacity": 10000,
                "warmup_steps": 30, "update_after": 30, "eval_every": 2, "eval_trials": 1, "seed": 3},
    "output": {"directory": "unused", "run_name": "smoke", "deterministic": True},
}


def write_config(tmp_path: Path, data: dict, name="config.json") -> Path:
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def trained_bundle(seed=0, hidden=(8, 8), scaled=True):
    scale = observation_scale(EnvConfig()) if scaled else None
    bundle = make_bundle(40, 6, hidden, np.random.default_rng(seed), obs_scale=scale)
    rng = np.random.default_rng(seed + 1)
    for p in bundle_tensors(bundle).values():
        p += rng.normal(size=p.shape)  # also fills the optimiser moments
    bundle.log_alpha = -1.2345678901234567
    for k, opt in enumerate(bundle.optimizers.values()):
        opt.step = 17 + k
    return bundle


def meta_for(cfg: RunConfig, bundle, episode=0):
    state = TrainState(bundle, episode, 123, np.random.default_rng(0).bit_generator.state)
    return checkpoint_meta(cfg, state, "test", (40, 6))


def config_with_hidden(hidden):
    data = json.loads(json.dumps(SMOKE))
    data["trainer"]["hidden_sizes"] = list(hidden)
    return RunConfig.from_dict(data)


@pytest.fixture
def checkpoint(tmp_path):
    cfg = config_with_hidden((8, 8))
    bundle = trained_bundle()
    path = tmp_path / "ckpt.json"
    save_checkpoint(bundle, meta_for(cfg, bundle), path)
    return path, bundle, cfg


# ---------------------------------------------------------------- run config
def test_run_config_round_trip():
    cfg = RunConfig.from_dict(SMOKE)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.env.episode_length == 20 and cfg.trainer.hidden_sizes == (16, 16)


@pytest.mark.parametrize("data,field", [
    ({"env": {"dt": -1}}, "env.dt"),
    ({"trainer": {"batchsize": 3}}, "trainer.batchsize"),
    ({"output": {"dir": "x"}}, "output.dir"),
    ({"extra": {}}, "extra"),
    ({"trainer": {"gamma": 2.0}}, "trainer.gamma"),
    ({"output": {"deterministic": "yes"}}, "output.deterministic"),
])
def test_run_config_errors_name_field(data, field):
    with pytest.raises(RunConfigError, match=field.replace(".", r"\.")):
        RunConfig.from_dict(data)


def test_missing_or_malformed_config_file(tmp_path):
    with pytest.raises(RunConfigError):
        load_run_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(RunConfigError, match="invalid JSON"):
        load_run_config(bad)


def test_digest_ignores_episode_budget_only():
    a = RunConfig.from_dict(SMOKE)
    more = json.loads(json.dumps(SMOKE))
    more["trainer"]["episodes"] = 99
    more["output"]["directory"] = "elsewhere"
    assert RunConfig.from_dict(more).digest() == a.digest()
    more["trainer"]["seed"] = 4
    assert RunConfig.from_dict(more).digest() != a.digest()


# ---------------------------------------------------------------- checkpoints
def test_checkpoint_round_trip_is_bitwise(checkpoint):
    path, bundle, _ = checkpoint
    loaded, meta = load_checkpoint(path)
    want, got = bundle_tensors(bundle), bundle_tensors(loaded)
    assert want.keys() == got.keys()
    for name in want:
        assert want[name].tobytes() == got[name].tobytes(), name
    assert loaded.log_alpha == bundle.log_alpha
    assert {k: v.step for k, v in loaded.optimizers.items()} == {k: v.step for k, v in bundle.optimizers.items()}
    assert meta["seed"] == 3 and meta["episode"] == 0


def test_checkpoint_without_input_scale_round_trips(tmp_path):
    bundle = trained_bundle(scaled=False)
    path = tmp_path / "plain.json"
    save_checkpoint(bundle, meta_for(config_with_hidden((8, 8)), bundle), path)
    loaded, _ = load_checkpoint(path)
    assert all(net.input_scale is None for net in loaded.networks().values())
    assert "actor.input_scale" not in bundle_tensors(loaded)


def test_checkpoint_keeps_input_scale(checkpoint):
    path, bundle, _ = checkpoint
    loaded, _ = load_checkpoint(path)
    for name, net in loaded.networks().items():
        assert net.input_scale.tobytes() == getattr(bundle, name).input_scale.tobytes(), name
    assert loaded.critic1.input_scale.shape == (46,)


def test_checkpoint_tensor_naming(checkpoint):
    path, _, _ = checkpoint
    names = {t["name"] for t in json.loads(path.read_text())["tensors"]}
    assert {"actor.W0", "actor.b2", "target2.W1", "value.b0", "log_alpha",
            "opt.actor.m.W0", "opt.critic1.v.b2", "opt.log_alpha.m.value", "actor.input_scale"} <= names


def test_truncated_checkpoint_is_reported(checkpoint):
    path, _, _ = checkpoint
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_damaged_payload_is_reported(checkpoint):
    path, _, _ = checkpoint
    doc = json.loads(path.read_text())
    doc["payload"]["actor.W0"] = doc["payload"]["actor.W0"][:-8]
    path.write_text(json.dumps(doc))
    with pytest.raises(CorruptCheckpointError, match="actor.W0"):
        load_checkpoint(path)


def test_newer_format_version_refused(checkpoint):
    path, _, _ = checkpoint
    doc = json.loads(path.read_text())
    doc["format_version"] = 2
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_width_mismatch_names_tensor(tmp_path):
    cfg = config_with_hidden((256, 256))
    bundle = make_bundle(40, 6, (256, 256), np.random.default_rng(0))
    path = tmp_path / "wide.json"
    save_checkpoint(bundle, meta_for(cfg, bundle), path)
    narrow = make_bundle(40, 6, (128, 128), np.random.default_rng(0))
    with pytest.raises(ShapeError, match="actor.W0"):
        load_checkpoint(path, template=narrow)


def test_resume_rejects_changed_config(checkpoint):
    path, _, cfg = checkpoint
    changed = json.loads(json.dumps(cfg.to_dict()))
    changed["trainer"]["gamma"] = 0.9
    with pytest.raises(ConfigDigestError):
        resume_state(path, RunConfig.from_dict(changed))
    state = resume_state(path, cfg)
    assert state.episode == 0 and state.total_steps == 123


# ---------------------------------------------------------------- metrics and traces
def test_empty_metrics_has_header_only(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics([], path)
    assert path.read_text().splitlines() == [",".join(METRICS_COLUMNS)]


def test_metrics_columns_follow_row_order():
    assert tuple(f for f in MetricsRow.__dataclass_fields__) == METRICS_COLUMNS


def test_smoke_run_writes_one_row_per_episode(tmp_path):
    env = EnvConfig(episode_length=20)
    trainer = TrainerConfig(episodes=10, batch_size=16, hidden_sizes=(8,), warmup_steps=50,
                            update_after=50, eval_every=10, eval_trials=1)
    report = train(env, trainer, deterministic=True)
    path = tmp_path / "m.csv"
    write_metrics(report.metrics, path)
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRICS_COLUMNS
    assert len(rows) == 11
    parsed = read_metrics(path)
    assert [int(r["episode"]) for r in parsed] == list(range(10))
    assert float(parsed[3]["reward_total"]) == report.metrics[3].reward_total


def test_trace_has_one_record_per_step(tmp_path):
    actor = make_bundle(40, 6, (8,), np.random.default_rng(0)).actor
    trace = record_trace(actor, EnvConfig(), seed=2)
    assert len(trace) == 500
    assert [r["step"] for r in trace] == list(range(500))
    for rec in trace[:: 50]:
        assert rec["d"] >= 0.0 and rec["f_n"] >= 0.0
        assert len(rec["gripper_pose"]) == 7 and len(rec["target_pose"]) == 7 and len(rec["action"]) == 6
        assert set(rec["reward"]) == {"rd", "rtheta", "rtop", "pf", "total"}
    path = tmp_path / "trace.json"
    write_trace(trace, path)
    assert json.loads(path.read_text()) == trace


# ---------------------------------------------------------------- CLI
def test_cli_train_eval_sweep_trace(tmp_path, capsys):
    cfg = write_config(tmp_path, SMOKE)
    out = tmp_path / "run"
    assert cli_main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("metrics.csv", "config.json", "best.ckpt.json", "progress.ckpt.json", "final.ckpt.json"):
        assert (out / name).exists(), name
    assert len(read_metrics(out / "metrics.csv")) == 4
    capsys.readouterr()

    ckpt = str(out / "best.ckpt.json")
    args = ["eval", "--checkpoint", ckpt, "--episodes", "2", "--velocity-cap", "0.3", "--json"]
    assert cli_main(args) == 0
    first = capsys.readouterr().out
    assert cli_main(args) == 0
    assert capsys.readouterr().out == first
    assert json.loads(first)["velocity_cap"] == 0.3

    assert cli_main(["sweep", "--checkpoint", ckpt, "--caps", "0.4,0.3,0.2,0.1", "--episodes", "1"]) == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert len(table) == 5
    assert "Maximum Relative Velocity" in table[0] and "Mean Eval Success Rate" in table[0]
    assert [line.split("|")[0].strip() for line in table[1:]] == ["0.4 m/s", "0.3 m/s", "0.2 m/s", "0.1 m/s"]

    trace = tmp_path / "trace.json"
    assert cli_main(["trace", "--checkpoint", ckpt, "--seed", "1", "--out", str(trace)]) == 0
    assert len(json.loads(trace.read_text())) == 20


def test_cli_resume_appends(tmp_path):
    cfg = write_config(tmp_path, SMOKE)
    out = tmp_path / "run"
    assert cli_main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    longer = json.loads(json.dumps(SMOKE))
    longer["trainer"]["episodes"] = 6
    cfg6 = write_config(tmp_path, longer, "six.json")
    assert cli_main(["train", "--config", str(cfg6), "--out", str(out), "--resume"]) == 0
    assert [int(r["episode"]) for r in read_metrics(out / "metrics.csv")] == list(range(6))
    assert load_checkpoint(out / "final.ckpt.json")[1]["episode"] == 6


def test_cli_malformed_config_creates_nothing(tmp_path, capsys):
    bad = json.loads(json.dumps(SMOKE))
    bad["trainer"]["tau"] = 3.0
    cfg = write_config(tmp_path, bad)
    out = tmp_path / "never"
    assert cli_main(["train", "--config", str(cfg), "--out", str(out)]) != 0
    assert "trainer.tau" in capsys.readouterr().err
    assert not out.exists()


def test_cli_rejects_unknown_flag_and_missing_file(tmp_path, capsys):
    assert cli_main(["eval", "--checkpoint", "x.json", "--bogus"]) != 0
    assert "--bogus" in capsys.readouterr().err
    assert cli_main(["eval", "--checkpoint", str(tmp_path / "absent.json")]) != 0
    assert "absent.json" in capsys.readouterr().err
    assert cli_main(["sweep", "--checkpoint", "x.json", "--caps", "fast"]) != 0
    assert "--caps" in capsys.readouterr().err


def test_cli_grad_check(capsys):
    assert cli_main(["grad-check", "--max-entries", "40"]) == 0
    out = capsys.readouterr().out
    worst = float(out.strip().splitlines()[-1].split()[-1])
    assert worst < 1e-5
