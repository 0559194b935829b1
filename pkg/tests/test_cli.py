import subprocess
import sys

import pytest

from poseattn import cli
from poseattn.train import EvalReport

TINY = """
c1 = 4
c2 = 4
d_s = 8
patch_side = 16
crop_side = 16
glimpse_c1 = 2
glimpse_c2 = 4
d_g = 8
d_h = 8
att_hidden = 8
tatt_hidden = 8
glimpse_pretrain_steps = 3
min_epochs = 0
max_epochs = 1
batch_size = 8
val_fraction = 0.25
test_subsequences = 2
data.classes = 4
data.videos_per_class = 4
data.frames = 24
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert run("gen-data", "--config", cfg, "--seed", 1, "--out", root / "data") == 0
    assert run("train", "--config", cfg, "--stage", "pose", "--data", root / "data/train/manifest.txt",
               "--out", root / "pose") == 0
    assert run("train", "--config", cfg, "--stage", "rgb", "--variant", "full", "--data",
               root / "data/train/manifest.txt", "--checkpoint", root / "pose/pose.ckpt", "--out", root / "rgb") == 0
    return root, cfg


def test_pipeline_outputs(work):
    root, cfg = work
    assert (root / "data/train/manifest.txt").exists() and (root / "data/test/manifest.txt").exists()
    assert (root / "pose/pose.ckpt").exists() and (root / "pose/pose.log").read_text().strip()
    assert (root / "rgb/rgb.ckpt").exists()
    assert run("eval", "--config", cfg, "--stream", "fused", "--data", root / "data/test/manifest.txt",
               "--checkpoint", root / "rgb/rgb.ckpt", "--out", root / "eval") == 0
    rep = EvalReport.from_text((root / "eval/report.json").read_text())
    assert rep.total == 8 and rep.stream == "fused" and rep.n_subsequences == 2


def test_eval_is_reproducible(work):
    root, cfg = work
    texts = []
    for name in ("e1", "e2"):
        assert run("eval", "--config", cfg, "--stream", "pose", "--data", root / "data/test/manifest.txt",
                   "--checkpoint", root / "pose/pose.ckpt", "--out", root / name) == 0
        texts.append((root / name / "report.json").read_bytes())
    assert texts[0] == texts[1]


def test_export_trace(work):
    root, cfg = work
    assert run("export-trace", "--config", cfg, "--data", root / "data/test/manifest.txt",
               "--checkpoint", root / "rgb/rgb.ckpt", "--out", root / "trace") == 0
    from poseattn.glimpse import read_trace

    records = read_trace(root / "trace/trace.jsonl")
    assert len(records) == 8
    assert all(abs(sum(p) - 1) < 1e-5 for r in records for p in r["spatial"])


def test_gen_data_idempotent(work, tmp_path):
    root, cfg = work
    assert run("gen-data", "--config", cfg, "--seed", 1, "--out", tmp_path / "again") == 0
    for rel in ("train/manifest.txt", "test/manifest.txt", "spec.txt"):
        assert (tmp_path / "again" / rel).read_bytes() == (root / "data" / rel).read_bytes()
    files = sorted(p.relative_to(root / "data") for p in (root / "data").rglob("*") if p.is_file())
    for rel in files:
        assert (tmp_path / "again" / rel).read_bytes() == (root / "data" / rel).read_bytes(), rel


def test_rgb_without_checkpoint_fails_cleanly(work, tmp_path, capsys):
    root, cfg = work
    out = tmp_path / "bad"
    assert run("train", "--config", cfg, "--stage", "rgb", "--data", root / "data/train/manifest.txt",
               "--out", out) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error:") and "pose checkpoint" in err[0]
    assert not out.exists()


def test_failure_keeps_existing_files(work, tmp_path, capsys):
    root, cfg = work
    out = tmp_path / "keep"
    out.mkdir()
    (out / "mine.txt").write_text("x")
    assert run("eval", "--config", cfg, "--data", tmp_path / "missing.txt", "--checkpoint",
               root / "pose/pose.ckpt", "--out", out) == 1
    assert [p.name for p in out.iterdir()] == ["mine.txt"]
    assert len(capsys.readouterr().err.strip().splitlines()) == 1


def test_class_count_mismatch_rejected(work, tmp_path, capsys):
    root, cfg = work
    other = tmp_path / "other.cfg"
    other.write_text(TINY.replace("data.classes = 4", "data.classes = 6"))
    assert run("gen-data", "--config", other, "--out", tmp_path / "six") == 0
    assert run("eval", "--config", cfg, "--stream", "pose", "--data", tmp_path / "six/test/manifest.txt",
               "--checkpoint", root / "pose/pose.ckpt", "--out", tmp_path / "ev") == 1
    assert "class" in capsys.readouterr().err


def test_rgb_stream_needs_rgb_checkpoint(work, tmp_path, capsys):
    root, cfg = work
    assert run("eval", "--config", cfg, "--stream", "rgb", "--data", root / "data/test/manifest.txt",
               "--checkpoint", root / "pose/pose.ckpt", "--out", tmp_path / "ev") == 1
    assert capsys.readouterr().err.startswith("error:")


def test_transfer_identity_topology(work, tmp_path):
    root, cfg = work
    assert run("transfer", "--config", cfg, "--source-checkpoint", root / "rgb/rgb.ckpt", "--data", root / "data",
               "--out", tmp_path / "tr") == 0
    lines = (tmp_path / "tr/report.txt").read_text().splitlines()
    assert lines[0].startswith("finetuned\t") and lines[1].startswith("scratch\t")
    assert (tmp_path / "tr/transfer.ckpt").exists()


def test_transfer_with_joint_map(work, tmp_path):
    root, cfg = work
    # identity map written out explicitly, with one joint synthesized as a midpoint of itself
    from poseattn.skeleton import load_topology

    names = load_topology("desk12").names
    lines = [f"{n} = {n}" for n in names[1:]] + [f"{names[0]} = mid({names[0]}, {names[0]})"]
    jm = tmp_path / "map.txt"
    jm.write_text("\n".join(lines) + "\n")
    assert run("transfer", "--config", cfg, "--source-checkpoint", root / "pose/pose.ckpt", "--data",
               root / "data", "--joint-map", jm, "--out", tmp_path / "tr") == 0


def test_transfer_bad_joint_map(work, tmp_path, capsys):
    root, cfg = work
    jm = tmp_path / "map.txt"
    jm.write_text("nonexistent = also_missing\n")
    assert run("transfer", "--config", cfg, "--source-checkpoint", root / "pose/pose.ckpt", "--data",
               root / "data", "--joint-map", jm, "--out", tmp_path / "tr") == 1
    assert not (tmp_path / "tr").exists()
    assert len(capsys.readouterr().err.strip().splitlines()) == 1


def test_ablate_small(work, tmp_path):
    root, cfg = work
    assert run("ablate", "--config", cfg, "--data", root / "data", "--out", tmp_path / "ab") == 0
    rows = (tmp_path / "ab/ablation.tsv").read_text().strip().splitlines()
    assert len(rows) == 13


def test_gradcheck_rejects_full_scale(tmp_path, capsys):
    assert run("gradcheck", "--scale", "full", "--out", tmp_path / "g") == 1
    assert "desk" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no_such_key = 1\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "d") == 1
    assert "no_such_key" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()


def test_help_lists_every_flag():
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0]
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
            if action.option_strings and action.dest != "help":
                assert action.help, (name, action.dest)
    out = subprocess.run([sys.executable, "-m", "poseattn.cli", "train", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for flag in ("--config", "--seed", "--out", "--stage", "--variant", "--stream", "--scale",
                 "--source-checkpoint", "--joint-map", "--data", "--checkpoint"):
        assert flag in out.stdout
    top = subprocess.run([sys.executable, "-m", "poseattn.cli", "--help"], capture_output=True, text=True).stdout
    for cmd in cli.COMMANDS:
        assert cmd in top
