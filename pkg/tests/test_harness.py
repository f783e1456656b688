"""Harness: config round trip, binary checkpoints, metrics, CLI, pipelines."""

import json
import struct

import numpy as np
import pytest

from flowpath import cli
from flowpath.checkpoint import (
    MAGIC,
    Checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from flowpath.config import RunConfig, load_config
from flowpath.errors import CheckpointError, ValidationError
from flowpath.metrics import read_csv_without_columns, write_csv
from flowpath.pipeline import (
    IRL_METRICS_HEADER,
    run_plan,
    run_synthesize,
    stage_evaluate,
    stage_gen_data,
    stage_train_irl,
)

from conftest import file_digest, tiny_config


def test_config_round_trip_default_and_modified():
    cfg = RunConfig()
    assert RunConfig.from_json(cfg.to_json()) == cfg
    cfg.seed = 91
    cfg.world.dim = 9
    cfg.flow.clamp = 1.25
    cfg.irl.outer_iters = 7
    cfg.out_dir = "somewhere/else"
    assert RunConfig.from_json(cfg.to_json()) == cfg


def test_config_rejects_unknown_keys_and_bad_values():
    data = RunConfig().to_dict()
    data["flow"]["mystery"] = 3
    with pytest.raises(ValidationError):
        RunConfig.from_dict(data)
    with pytest.raises(ValidationError):
        RunConfig.from_dict({"irl": {"inner_iters": 0}})


def test_config_file_loading(tmp_path):
    cfg = RunConfig(seed=5)
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert load_config(path) == cfg


def sample_checkpoint() -> Checkpoint:
    rng = np.random.default_rng(0)
    return Checkpoint(
        config=RunConfig(seed=13),
        params={"group_a": [("w", rng.standard_normal((3, 2))), ("b", rng.standard_normal(3))],
                "group_b": [("v", rng.standard_normal(5))]},
        opt_states={"group_a": {"learning_rate": 0.01, "beta1": 0.9, "beta2": 0.999,
                                "eps": 1e-8, "step_count": 7,
                                "m": [np.zeros((3, 2)), np.zeros(3)],
                                "v": [np.ones((3, 2)), np.ones(3)]}},
        rng_state=np.random.default_rng(3).bit_generator.state,
        meta={"stage": "test", "next_iteration": 2},
    )


def test_checkpoint_save_load_save_byte_identical(tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, sample_checkpoint())
    loaded = load_checkpoint(p1)
    save_checkpoint(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.config.seed == 13
    assert loaded.meta["next_iteration"] == 2
    orig = sample_checkpoint()
    for (na, aa), (nb, ab) in zip(orig.params["group_a"], loaded.params["group_a"]):
        assert na == nb
        assert np.array_equal(aa, ab)
    assert loaded.opt_states["group_a"]["step_count"] == 7


def test_checkpoint_layout_magic_and_version(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, sample_checkpoint())
    raw = p.read_bytes()
    assert raw[:4] == MAGIC == b"FPCK"
    assert struct.unpack("<I", raw[4:8])[0] == 1


def test_checkpoint_version_mismatch(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, sample_checkpoint())
    raw = bytearray(p.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)


def test_checkpoint_truncation_and_bad_magic(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, sample_checkpoint())
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_metrics_csv_roundtrip_and_masking(tmp_path):
    path = tmp_path / "m.csv"
    write_csv(path, ["iteration", "value", "wall_seconds"],
              [[0, 0.5, 1.25], [1, -0.125, 2.5]])
    text = path.read_text()
    assert text.splitlines()[0] == "iteration,value,wall_seconds"
    masked = read_csv_without_columns(path, {"wall_seconds"})
    assert masked == "iteration,value\n0,0.5\n1,-0.125\n"


def test_gen_data_deterministic_bytes(tmp_path):
    cfg1 = tiny_config(str(tmp_path / "w1"), seed=7)
    cfg2 = tiny_config(str(tmp_path / "w2"), seed=7)
    stage_gen_data(cfg1)
    stage_gen_data(cfg2)
    for name in ("train_sequences.jsonl", "heldout_sequences.jsonl",
                 "pool_sequences.jsonl"):
        assert (tmp_path / "w1" / name).read_bytes() == \
            (tmp_path / "w2" / name).read_bytes()


def test_irl_metrics_schema(tiny_run):
    lines = (tiny_run["out"] / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(IRL_METRICS_HEADER)
    assert len(lines) == 1 + tiny_run["cfg"].irl.outer_iters
    summary = json.loads((tiny_run["out"] / "summary.json").read_text())
    assert summary["iterations"] == tiny_run["cfg"].irl.outer_iters


def test_resume_reproduces_uninterrupted_run(tiny_run):
    out = tiny_run["out"]
    cfg = tiny_run["cfg"]
    full_ckpt = (out / "model.ckpt").read_bytes()
    full_metrics = read_csv_without_columns(out / "metrics.csv", {"wall_seconds"})
    stage_train_irl(cfg, stop_after=1)
    assert not np.array_equal((out / "irl_latest.ckpt").read_bytes(), full_ckpt)
    stage_train_irl(cfg, resume=str(out / "irl_latest.ckpt"))
    assert (out / "model.ckpt").read_bytes() == full_ckpt
    assert read_csv_without_columns(out / "metrics.csv", {"wall_seconds"}) == full_metrics


def test_plan_on_untrained_checkpoint_bookkeeping(tiny_run):
    out = tiny_run["out"]
    # the pairs checkpoint has no policy group; a uniform policy is implied
    ck = str(out / "pairs.ckpt")
    result = run_plan(ck, _subject_inputs(tiny_run, age=18), target=50)
    ages = result["ages"]
    assert ages[0] == 18
    assert ages[-1] >= 50
    assert all(b - a == act for a, b, act in zip(ages, ages[1:], result["actions"]))


def _subject_inputs(run, age):
    from flowpath.pipeline import default_subject_inputs

    return default_subject_inputs(run["cfg"], 12, age)


def test_synthesize_single_action(tiny_run):
    out = tiny_run["out"]
    res = run_synthesize(str(out / "model.ckpt"), _subject_inputs(tiny_run, 20),
                         action=9)
    assert res["ages"] == [20, 29]
    assert len(res["observations"][1]) == tiny_run["cfg"].world.dim
    with pytest.raises(ValidationError):
        run_synthesize(str(out / "model.ckpt"), _subject_inputs(tiny_run, 20))


def test_evaluate_writes_report(tiny_run):
    report = stage_evaluate(tiny_run["cfg"])
    on_disk = json.loads((tiny_run["out"] / "evaluation.json").read_text())
    assert set(report["fidelity"]) == set(on_disk["fidelity"])
    assert 0.0 <= report["path_recovery"]["match_rate"] <= 1.0


# ---------------------------------------------------------------------------
# CLI surface
# ---------------------------------------------------------------------------

def test_cli_unknown_subcommand(capsys):
    assert cli.main(["definitely-not-a-command"]) == 1
    err = capsys.readouterr().err
    assert "usage" in err.lower()


def test_cli_unknown_flag(capsys):
    assert cli.main(["gen-data", "--frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_cli_gen_data_and_seed_env(tmp_path, monkeypatch, capsys):
    # config file with a tiny world; --seed beats the env var
    cfg = tiny_config(str(tmp_path / "w"), seed=1)
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(cfg.to_json())
    assert cli.main(["gen-data", "--config", str(cfg_path)]) == 0
    first = file_digest(tmp_path / "w" / "train_sequences.jsonl")

    monkeypatch.setenv("FLOWPATH_SEED", "1")
    assert cli.main(["gen-data", "--out", str(tmp_path / "w2")]) == 0
    capsys.readouterr()
    # env seed 1 with default world differs from config world (different sizes)
    assert (tmp_path / "w2" / "train_sequences.jsonl").exists()
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out",
                     str(tmp_path / "w3")]) == 0
    assert file_digest(tmp_path / "w3" / "train_sequences.jsonl") == first


def test_cli_plan_and_truncated_checkpoint(tiny_run, tmp_path, capsys):
    ck = tiny_run["out"] / "model.ckpt"
    code = cli.main(["plan", "--checkpoint", str(ck), "--age", "18",
                     "--target", "50", "--subject-seed", "4"])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["ages"][0] == 18 and out["ages"][-1] >= 50

    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(ck.read_bytes()[:300])
    assert cli.main(["plan", "--checkpoint", str(trunc), "--age", "18",
                     "--target", "50"]) == 2
    assert "truncated" in capsys.readouterr().err


def test_cli_plan_multi_input_file(tiny_run, tmp_path, capsys):
    from flowpath.world import make_archetype, observe

    cfg = tiny_run["cfg"]
    arch = make_archetype(cfg.world, 5)
    payload = {
        "ages": [20, 28],
        "observations": [[float(v) for v in observe(cfg.world, arch, 20)],
                         [float(v) for v in observe(cfg.world, arch, 28)]],
    }
    inp = tmp_path / "inputs.json"
    inp.write_text(json.dumps(payload))
    code = cli.main(["plan", "--checkpoint", str(tiny_run["out"] / "model.ckpt"),
                     "--age", "28", "--target", "40", "--input", str(inp)])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["start_age"] == 28
    assert out["ages"][-1] >= 40


def test_cli_plan_validation_error(tiny_run, capsys):
    code = cli.main(["plan", "--checkpoint", str(tiny_run["out"] / "model.ckpt"),
                     "--age", "50", "--target", "20", "--subject-seed", "4"])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_cli_synthesize_to_file(tiny_run, tmp_path):
    dest = tmp_path / "synth.json"
    code = cli.main(["synthesize", "--checkpoint",
                     str(tiny_run["out"] / "model.ckpt"), "--age", "20",
                     "--action", "5", "--subject-seed", "4", "--out", str(dest)])
    assert code == 0
    data = json.loads(dest.read_text())
    assert data["ages"] == [20, 25]


def test_cli_gradcheck_and_oracle_check(capsys):
    assert cli.main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3 and "FAIL" not in out
    assert cli.main(["oracle-check", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 5 and "FAIL" not in out


def test_age_fidelity_needs_heldout_data(tiny_run):
    from flowpath.evaluate import evaluate_age_fidelity
    from flowpath.errors import InsufficientDataError
    from flowpath.pipeline import model_from_checkpoint, policy_from_checkpoint

    ckpt = load_checkpoint(tiny_run["out"] / "model.ckpt")
    model = model_from_checkpoint(ckpt)
    policy = policy_from_checkpoint(ckpt)
    from flowpath.world import read_sequences

    train = read_sequences(tiny_run["out"] / "train_sequences.jsonl")
    train_states = [s for _, t in train for s in t.states]
    with pytest.raises(InsufficientDataError):
        evaluate_age_fidelity(model, policy, ckpt.config.world, train_states, [])


def test_aborted_irl_leaves_resumable_checkpoint_and_metrics(tmp_path):
    from flowpath.irl import IrlIterationError
    from flowpath.pipeline import stage_gen_data, stage_pretrain_flow, stage_train_pairs

    cfg = tiny_config(str(tmp_path / "w"), seed=4)
    cfg.irl.outer_iters = 3
    stage_gen_data(cfg)
    stage_pretrain_flow(cfg)
    stage_train_pairs(cfg)
    # poison the synthesis model so rollouts fail numerically inside iter 0
    pairs = load_checkpoint(tmp_path / "w" / "pairs.ckpt")
    _, arr = pairs.params["transform"][0]
    arr[...] = 1e300
    save_checkpoint(tmp_path / "w" / "pairs.ckpt", pairs)
    with np.errstate(all="ignore"), pytest.raises(IrlIterationError) as exc:
        stage_train_irl(cfg)
    assert exc.value.iteration == 0
    latest = load_checkpoint(tmp_path / "w" / "irl_latest.ckpt")
    assert latest.meta["next_iteration"] == 0  # boundary before the failure


def test_config_rejects_unknown_sections():
    with pytest.raises(ValidationError, match="sections"):
        RunConfig.from_dict({"wrold": {"dim": 4}})


def test_restore_group_errors(tmp_path):
    from flowpath.checkpoint import restore_group

    live = [("a", np.zeros(3))]
    with pytest.raises(CheckpointError, match="missing"):
        restore_group(live, [("b", np.zeros(3))])
    with pytest.raises(CheckpointError, match="shape"):
        restore_group(live, [("a", np.zeros(4))])


def test_synthesize_rejects_both_action_and_target(tiny_run):
    with pytest.raises(ValidationError):
        run_synthesize(str(tiny_run["out"] / "model.ckpt"),
                       _subject_inputs(tiny_run, 20), action=3, target=30)
    with pytest.raises(ValidationError):
        run_synthesize(str(tiny_run["out"] / "model.ckpt"),
                       _subject_inputs(tiny_run, 20), action=99)


def test_cli_train_irl_stop_after_and_resume(tmp_path, capsys):
    cfg = tiny_config(str(tmp_path / "w"), seed=6)
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(cfg.to_json())
    for cmd in ("gen-data", "pretrain-flow", "train-pairs"):
        assert cli.main([cmd, "--config", str(cfg_path)]) == 0
    assert cli.main(["train-irl", "--config", str(cfg_path)]) == 0
    capsys.readouterr()
    full = (tmp_path / "w" / "model.ckpt").read_bytes()

    assert cli.main(["train-irl", "--config", str(cfg_path),
                     "--stop-after", "1"]) == 0
    assert "resume" in capsys.readouterr().out
    assert cli.main(["train-irl", "--config", str(cfg_path), "--resume",
                     str(tmp_path / "w" / "irl_latest.ckpt")]) == 0
    assert (tmp_path / "w" / "model.ckpt").read_bytes() == full
