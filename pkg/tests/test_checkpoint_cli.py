import json
import struct
from pathlib import Path

import numpy as np
import pytest

from ibrl import checkpoint as ck
from ibrl.cli import main
from ibrl.config import ConfigError, parse_config, render_config
from ibrl.envs import grid as gw
from ibrl.policy import make_bundle


TINY_CARTPOLE = """
[run]
name = tiny
env = cartpole
seeds = 3

[train]
n_steps = 64
minibatch_size = 32
epochs = 1
total_steps = 256

[anneal]
total_iterations = 30
warmup_fraction = 0.34

[eval]
episodes = 2
"""

TINY_GRID = """
[run]
name = tinygrid
env = grid

[train]
n_envs = 4
total_steps = 400

[grid]
maze_seeds = 1, 2
"""


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# ------------------------------------------------------------------ checkpoint format


def sample_checkpoint():
    bundle = make_bundle("cartpole", np.random.default_rng(0))
    return ck.bundle_checkpoint(bundle, "abc123", 42, 5e-5, {"note": "x"})


def test_checkpoint_round_trip_is_byte_identical():
    blob = ck.to_bytes(sample_checkpoint())
    again = ck.to_bytes(ck.from_bytes(blob))
    assert blob == again
    loaded = ck.from_bytes(blob)
    assert loaded.iteration == 42 and loaded.beta == 5e-5 and loaded.config_hash == "abc123"


def test_checkpoint_restores_identical_bundle():
    bundle = make_bundle("grid", np.random.default_rng(1))
    back = ck.bundle_from_checkpoint(ck.from_bytes(ck.to_bytes(ck.bundle_checkpoint(bundle, "h", 0, 0.0))))
    for (n, a), (_, b) in zip(bundle.named_parameters(), back.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_checkpoint_version_and_corruption_rejected():
    blob = bytearray(ck.to_bytes(sample_checkpoint()))
    bad_version = bytes(blob[:8]) + struct.pack("<I", 99) + bytes(blob[12:])
    with pytest.raises(ck.CheckpointError, match="version 99"):
        ck.from_bytes(bad_version)
    blob[-3] ^= 0xFF
    with pytest.raises(ck.CheckpointError, match="hash"):
        ck.from_bytes(bytes(blob))
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.from_bytes(b"garbage")
    with pytest.raises(ck.CheckpointError, match="config"):
        ck.from_bytes(ck.to_bytes(sample_checkpoint()), expected_hash="other")


# ------------------------------------------------------------------ config


def test_config_defaults_follow_environment():
    cfg = parse_config(TINY_CARTPOLE)
    assert cfg.train.algorithm == "ppo" and cfg.train.lr == 3e-4 and cfg.train.n_steps == 64
    grid = parse_config(TINY_GRID)
    assert grid.train.algorithm == "a2c" and grid.train.lr == 7e-4 and grid.train.code_dim == 64
    assert grid.grid.maze_seeds == (1, 2)


def test_config_errors_name_the_field():
    with pytest.raises(ConfigError, match="env"):
        parse_config("[run]\nname = x\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        parse_config("[run]\nname = x\nenv = grid\n[train]\nlearning_rate = 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        parse_config("[run]\nname = x\nenv = grid\n[bogus]\n")
    with pytest.raises(ConfigError, match="lr"):
        parse_config("[run]\nname = x\nenv = grid\n[train]\nlr = fast\n")


def test_rendered_config_parses_back_identically():
    cfg = parse_config(TINY_CARTPOLE)
    assert parse_config(render_config(cfg)) == cfg
    assert parse_config(render_config(cfg)).digest() == cfg.digest()


# ------------------------------------------------------------------ CLI


def test_missing_field_exits_2(tmp_path, capsys):
    assert main(["train", write(tmp_path, "[run]\nenv = cartpole\n")]) == 2
    assert "name" in capsys.readouterr().err


def test_train_writes_run_directory_and_is_deterministic(tmp_path):
    cfg = write(tmp_path, TINY_CARTPOLE)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["train", cfg, "--beta", "0", "--out", str(out_a)]) == 0
    assert main(["train", cfg, "--beta", "0", "--out", str(out_b)]) == 0
    for name in ("config.copy", "metrics.csv", "manifest.json", "checkpoints/final.ckpt"):
        assert (out_a / name).is_file()
    assert (out_a / "eval").is_dir()
    assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()
    manifest = json.loads((out_a / "manifest.json").read_text())
    assert manifest["tag"] == "baseline"
    assert set(manifest["files"]) == {"config.copy", "metrics.csv", "checkpoints/final.ckpt"}
    assert manifest == json.loads((out_b / "manifest.json").read_text())
    assert len((out_a / "metrics.csv").read_text().splitlines()) == 1 + 4


def test_train_refuses_to_overwrite_without_force(tmp_path):
    cfg = write(tmp_path, TINY_CARTPOLE)
    out = tmp_path / "run"
    assert main(["train", cfg, "--out", str(out)]) == 0
    assert main(["train", cfg, "--out", str(out)]) == 3
    assert main(["train", cfg, "--out", str(out), "--force"]) == 0


def test_grid_train_runs(tmp_path):
    out = tmp_path / "g"
    assert main(["train", write(tmp_path, TINY_GRID), "--beta", "0.05", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["tag"] == "ib"


def test_anneal_family_and_resume_bitwise(tmp_path):
    cfg = write(tmp_path, TINY_CARTPOLE)
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["anneal", cfg, "--out", str(full)]) == 0
    family = json.loads((full / "family.json").read_text())
    assert len(family["checkpoints"]) == 10
    for e in family["checkpoints"]:
        assert (full / e["checkpoint"]).is_file()
    from ibrl.annealing import AnnealSchedule, beta_at
    sched = AnnealSchedule(**family["schedule"])
    assert [e["beta"] for e in family["checkpoints"]] == [beta_at(sched, e["iteration"])
                                                          for e in family["checkpoints"]]
    assert "selected" in family

    assert main(["anneal", cfg, "--out", str(part), "--stop-after", "17"]) == 0
    assert main(["anneal", cfg, "--out", str(part), "--resume"]) == 0
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()
    for e in family["checkpoints"]:
        assert (full / e["checkpoint"]).read_bytes() == (part / e["checkpoint"]).read_bytes()
    assert (full / "family.json").read_bytes() == (part / "family.json").read_bytes()


def test_eval_outputs_and_errors(tmp_path, capsys):
    cfg = write(tmp_path, TINY_CARTPOLE)
    out = tmp_path / "run"
    assert main(["train", cfg, "--out", str(out)]) == 0
    ckpt = str(out / "checkpoints" / "final.ckpt")
    assert main(["eval", ckpt, "--grid", "test", "--episodes", "2"]) == 0
    rows = (out / "eval" / "final_test.csv").read_text().strip().splitlines()
    assert len(rows) == 82 and "train_box" in rows[0]
    assert (out / "eval" / "final_test.svg").read_text().startswith("<svg")
    assert main(["eval", ckpt, "--extreme", "--episodes", "2"]) == 0
    assert len((out / "eval" / "final_extreme.csv").read_text().strip().splitlines()) == 7

    corrupted = tmp_path / "bad.ckpt"
    blob = bytearray(Path(ckpt).read_bytes())
    blob[-1] ^= 0xFF
    corrupted.write_bytes(bytes(blob))
    capsys.readouterr()
    assert main(["eval", str(corrupted)]) == 3
    assert "hash" in capsys.readouterr().err

    maze = tmp_path / "maze.txt"
    maze.write_text(gw.generate_maze(0).to_text())
    assert main(["export-embeddings", ckpt, str(maze)]) == 3


def test_export_embeddings_writes_row_per_free_cell(tmp_path):
    out = tmp_path / "g"
    assert main(["train", write(tmp_path, TINY_GRID), "--out", str(out)]) == 0
    layout = gw.generate_maze(5)
    maze = tmp_path / "maze.txt"
    maze.write_text(layout.to_text())
    csv_path = tmp_path / "emb.csv"
    assert main(["export-embeddings", str(out / "checkpoints" / "final.ckpt"), str(maze),
                 "--out", str(csv_path)]) == 0
    lines = csv_path.read_text().strip().splitlines()
    assert len(lines) == 1 + len(layout.free_cells())
    assert "value" in lines[0].split(",")


def test_transfer_command_emits_three_curves(tmp_path):
    text = TINY_GRID + "\n[transfer]\nsplit_seeds = 4\npretrain_steps = 160\nretrain_steps = 160\nwindow = 2\n"
    out = tmp_path / "t"
    assert main(["transfer", write(tmp_path, text), "--out", str(out)]) == 0
    rows = (out / "transfer.csv").read_text().strip().splitlines()
    assert {r.split(",")[1] for r in rows[1:]} == {"baseline", "ablation", "ib"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [4]
    assert "transfer.csv" in manifest["files"]


def test_selfcheck_passes(capsys):
    assert main(["selfcheck"]) == 0
    assert capsys.readouterr().out.count("PASS") == 5
