"""End-to-end command behavior: exit codes, file layout, config plumbing."""

import hashlib
import json
import re
from pathlib import Path

import numpy as np
import pytest

from warpworld.attention import expected_true_blocks
from warpworld.cli import main
from warpworld.config import (
    RunConfig,
    from_dict,
    load_config,
    parse_override,
    save_config,
    set_key,
)
from warpworld.diffusion import load_checkpoint

TINY = {
    "seed": 5,
    "model": {"depth": 1, "dim": 32, "n_heads": 2, "n_classes": 2,
              "clip_len": 3, "image_size": 16, "pe_factors": [1],
              "time_feat": 8},
    "curation": {"n_scenes": 2, "clips_per_scene": 2, "frames_per_clip": 7,
                 "image_size": 16, "curation_per_clip": 1},
    "train": {"steps": 6, "batch_size": 2, "warmup": 2, "log_every": 0},
    "sampler": {"steps": 2, "n_memories": 2, "iou_samples": 200},
    "retrieval": {"top_m": 3, "samples": 500},
    "eval": {"cycle_length": 5},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Curated tiny dataset plus a short training run, shared read-only."""
    ws = tmp_path_factory.mktemp("cli")
    doc = dict(TINY)
    doc["dataset"] = str(ws / "ds")
    doc["out"] = str(ws / "run")
    cfg_path = ws / "tiny.json"
    with open(cfg_path, "w") as f:
        json.dump(doc, f)
    assert main(["curate", "--config", str(cfg_path)]) == 0
    assert main(["train", "--config", str(cfg_path)]) == 0
    return ws, str(cfg_path)


def _tree_hashes(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


# ---------------------------------------------------------------------------
# parser contracts


def test_help_lists_every_command(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for cmd in ("curate", "train", "generate", "eval", "inspect-retrieval",
                "bench-attention"):
        assert cmd in text


def test_subcommand_help_lists_common_flags(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--set", "--out"):
        assert flag in text


def test_unknown_flag_is_an_error():
    with pytest.raises(SystemExit) as e:
        main(["train", "--bogus-flag"])
    assert e.value.code == 2


def test_no_command_shows_help(capsys):
    assert main([]) == 2
    assert "COMMAND" in capsys.readouterr().out


def test_unknown_set_key_names_the_dotted_path(capsys):
    rc = main(["train", "--set", "train.lrr=5"])
    assert rc == 1
    assert "unknown config key: train.lrr" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# curate


def test_curate_reports_counts_and_layout(workspace, capsys):
    ws, cfg_path = workspace
    root = ws / "ds"
    assert (root / "scene001" / "clip001" / "poses.json").is_file()
    assert (root / "scene000" / "scene.json").is_file()
    frames = list((root / "scene000" / "clip000" / "frames").glob("*.png"))
    assert len(frames) == 7


def test_curate_rerun_is_byte_identical(tmp_path, capsys):
    doc = dict(TINY)
    doc["dataset"] = str(tmp_path / "ds")
    doc["out"] = str(tmp_path / "run")
    cfg_path = tmp_path / "c.json"
    with open(cfg_path, "w") as f:
        json.dump(doc, f)
    assert main(["curate", "--config", str(cfg_path)]) == 0
    first = _tree_hashes(tmp_path / "ds")
    import shutil

    shutil.rmtree(tmp_path / "ds")
    assert main(["curate", "--config", str(cfg_path)]) == 0
    assert _tree_hashes(tmp_path / "ds") == first
    assert len(first) > 0


def test_curate_invalid_root_exits_nonzero_with_path(tmp_path, capsys):
    blocker = tmp_path / "file.txt"
    blocker.write_text("x")
    bad = str(blocker / "sub")
    rc = main(["curate", "--set", f"dataset={bad}"])
    assert rc == 1
    assert bad in capsys.readouterr().err


def test_set_override_changes_scene_count(tmp_path, capsys):
    doc = dict(TINY)
    doc["dataset"] = str(tmp_path / "ds")
    cfg_path = tmp_path / "c.json"
    with open(cfg_path, "w") as f:
        json.dump(doc, f)
    rc = main(["curate", "--config", str(cfg_path),
               "--set", "curation.n_scenes=1",
               "--set", "curation.clips_per_scene=1"])
    assert rc == 0
    out = capsys.readouterr().out
    assert re.search(r"scenes:\s*1\b", out)
    assert not (tmp_path / "ds" / "scene001").exists()


# ---------------------------------------------------------------------------
# train


def test_train_writes_checkpoint_and_loss_curve(workspace):
    ws, _ = workspace
    params, cfg = load_checkpoint(ws / "run" / "model.uc")
    assert cfg.image_size == 16 and cfg.clip_len == 3
    assert params["in.w"].dtype == np.float32
    rows = (ws / "run" / "loss.csv").read_text().strip().splitlines()
    assert rows[0] == "step,loss"
    assert len(rows) == 1 + TINY["train"]["steps"]


def test_train_missing_dataset_names_the_path(capsys):
    rc = main(["train", "--set", "dataset=/nonexistent/ds"])
    assert rc == 1
    assert "/nonexistent/ds" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# generate


def test_generate_oracle_velocity_is_exact(workspace, tmp_path, capsys):
    ws, cfg_path = workspace
    out = tmp_path / "gen"
    rc = main(["generate", "--config", cfg_path, "--oracle-velocity",
               "--out", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    m = re.search(r"max abs error (\S+)", text)
    assert m, text
    assert float(m.group(1)) < 1e-5
    assert len(list((out / "frames").glob("*.png"))) == 3
    assert (out / "poses.json").is_file()
    info = json.loads((out / "info.json").read_text())
    assert info["mode"] == "oracle-velocity" and info["steps"] == 1


def test_generate_model_with_history_writes_clip(workspace, tmp_path, capsys):
    ws, cfg_path = workspace
    out = tmp_path / "gen"
    rc = main(["generate", "--config", cfg_path, "--frame", "2",
               "--use-history", "--ckpt", str(ws / "run" / "model.uc"),
               "--out", str(out)])
    assert rc == 0
    assert len(list((out / "frames").glob("*.png"))) == 3
    info = json.loads((out / "info.json").read_text())
    assert len(info["retrieved_times"]) == 2  # n_memories from config
    assert all(0 <= t < 2 for t in info["retrieved_times"])


def test_generate_missing_checkpoint_exits_nonzero(workspace, tmp_path, capsys):
    ws, cfg_path = workspace
    rc = main(["generate", "--config", cfg_path, "--out", str(tmp_path / "g")])
    assert rc == 1
    assert "model.uc" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval


def test_eval_oracle_cycle_hits_the_psnr_cap(workspace, tmp_path, capsys):
    ws, cfg_path = workspace
    out = tmp_path / "ev"
    rc = main(["eval", "--config", cfg_path, "--set", "eval.generator=oracle",
               "--out", str(out)])
    assert rc == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["psnr_db"] == 99.0
    assert doc["ssim"] == pytest.approx(1.0, abs=1e-9)
    assert (out / "report.txt").is_file() and (out / "report.csv").is_file()


def test_eval_model_memory_init_produces_report(workspace, tmp_path, capsys):
    ws, cfg_path = workspace
    out = tmp_path / "ev"
    rc = main(["eval", "--config", cfg_path,
               "--set", "eval.protocol=memory-init",
               "--ckpt", str(ws / "run" / "model.uc"), "--out", str(out)])
    assert rc == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["meta"]["protocol"] == "memory_init"
    assert 0.0 <= doc["psnr_db"] <= 99.0


def test_eval_rejects_unknown_protocol(capsys):
    rc = main(["eval", "--set", "eval.protocol=zigzag"])
    assert rc == 1
    assert "zigzag" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# inspect-retrieval and bench


def test_inspect_retrieval_prints_ranked_table(workspace, capsys):
    ws, cfg_path = workspace
    rc = main(["inspect-retrieval", "--config", cfg_path])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert "rank" in lines[1]
    assert len(lines) == 2 + TINY["retrieval"]["top_m"]
    first = lines[2].split()
    assert float(first[3]) <= 1.0  # iou column


def test_bench_attention_reports_counts_and_speedup(capsys):
    rc = main(["bench-attention", "--n-frames", "2", "--n-memories", "3",
               "--grid", "2", "--heads", "2", "--head-dim", "16",
               "--reps", "1"])
    assert rc == 0
    out = capsys.readouterr().out
    assert f"closed form {expected_true_blocks(2, 3)}" in out
    assert "speedup" in out


# ---------------------------------------------------------------------------
# config document behavior


def test_config_defaults_round_trip(tmp_path):
    cfg = RunConfig()
    save_config(cfg, tmp_path / "c.json")
    again = load_config(tmp_path / "c.json")
    assert again == cfg


def test_config_defaults_match_module_defaults():
    cfg = RunConfig()
    m = cfg.to_model_config()
    assert (m.depth, m.dim, m.n_heads) == (4, 128, 8)
    assert (m.clip_len, m.image_size, m.patch) == (9, 64, 8)
    assert cfg.train.steps == 2000 and cfg.sampler.steps == 50
    assert cfg.sampler.cfg_scale == 2.0 and cfg.sampler.n_memories == 4
    assert cfg.retrieval.samples == 4096
    assert cfg.curation.frames_per_clip == 33


def test_set_key_coerces_onto_field_types():
    cfg = RunConfig()
    set_key(cfg, "train.lr", 2)            # int onto float
    assert cfg.train.lr == 2.0 and isinstance(cfg.train.lr, float)
    set_key(cfg, "train.steps", 10.0)      # integral float onto int
    assert cfg.train.steps == 10 and isinstance(cfg.train.steps, int)
    set_key(cfg, "model.pe_factors", [1])  # list onto tuple
    assert cfg.model.pe_factors == (1,)
    with pytest.raises(ValueError, match="train.steps"):
        set_key(cfg, "train.steps", 10.5)
    with pytest.raises(ValueError, match="unknown config key: nope.x"):
        set_key(cfg, "nope.x", 1)
    with pytest.raises(ValueError, match="is a section"):
        set_key(cfg, "train", 1)


def test_parse_override_json_with_string_fallback():
    assert parse_override("train.lr=2e-3") == ("train.lr", 2e-3)
    assert parse_override("dataset=data/toy") == ("dataset", "data/toy")
    assert parse_override("model.pe_factors=[1, 2]") == ("model.pe_factors", [1, 2])
    with pytest.raises(ValueError, match="KEY=VALUE"):
        parse_override("no-equals-sign")


def test_from_dict_rejects_unknown_section_keys():
    with pytest.raises(ValueError, match="unknown config key: train.bogus"):
        from_dict({"train": {"bogus": 1}})
    with pytest.raises(ValueError, match="unknown config key: extra"):
        from_dict({"extra": 1})


def test_validate_rejects_bad_values():
    cfg = RunConfig()
    cfg.train.m_probs = (0.5, 0.6)
    with pytest.raises(ValueError, match="m_probs"):
        cfg.validate()
    cfg = RunConfig()
    cfg.eval.protocol = "zigzag"
    with pytest.raises(ValueError, match="zigzag"):
        cfg.validate()
    cfg = RunConfig()
    cfg.train.steps = 0
    with pytest.raises(ValueError, match="train.steps"):
        cfg.validate()
