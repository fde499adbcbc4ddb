import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from gaitkit import cli
from gaitkit.backbone import analytic_parameter_count
from gaitkit.data import DatasetIndex, SequenceEntry, SilhouetteSequence, normalize, save_sequence
from gaitkit.simo import SimoConfig, build_motion_sequence
from gaitkit.training import OptimizerConfig, load_config

from conftest import TINY_SYNTH, tiny_backbone, tiny_experiment

COMMANDS = ["gen", "train", "eval", "ablate", "export-masks", "info"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    assert magic == b"P5" and maxval == b"255"
    w, h = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.yaml").write_text(yaml.safe_dump(TINY_SYNTH))
    (root / "exp.yaml").write_text(tiny_experiment().to_yaml())
    assert cli.main(["gen", "--config", str(root / "synth.yaml"), "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def trained(files):
    assert cli.main(["train", "--config", str(files / "exp.yaml"), "--data", str(files / "data"),
                     "--out", str(files / "run")]) == 0
    return files / "run"


# ---------------------------------------------------------------- parser

def test_help_at_every_level(capsys):
    with pytest.raises(SystemExit) as exc:
        run("--help")
    assert exc.value.code == 0
    top = capsys.readouterr().out
    assert all(c in top for c in COMMANDS)
    for command in COMMANDS:
        with pytest.raises(SystemExit) as exc:
            run(command, "--help")
        assert exc.value.code == 0
        assert "--threads" in capsys.readouterr().out


def test_no_subcommand_prints_usage(capsys):
    assert run() == 2
    err = capsys.readouterr().err
    assert err.startswith("usage: gaitkit") and "a command is required" in err


def test_usage_errors_exit_2(capsys):
    for argv in (["train"], ["frobnicate"], ["info"], ["export-masks", "--data", "x", "--subject", "1",
                                                       "--seq", "0", "--out", "y"]):
        with pytest.raises(SystemExit) as exc:
            run(*argv)
        assert exc.value.code == 2
    capsys.readouterr()


def test_threads_fallback(monkeypatch):
    monkeypatch.delenv("GAITKIT_THREADS", raising=False)
    assert cli._threads(None) == (os.cpu_count() or 1)
    monkeypatch.setenv("GAITKIT_THREADS", "3")
    assert cli._threads(None) == 3
    assert cli._threads(2) == 2
    monkeypatch.setenv("GAITKIT_THREADS", "lots")
    with pytest.raises(cli.UsageError):
        cli._threads(None)


def test_bad_threads_env_is_a_usage_error(files, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("GAITKIT_THREADS", "0")
    assert run("gen", "--config", files / "synth.yaml", "--out", tmp_path) == 2
    assert "GAITKIT_THREADS must be >= 1" in capsys.readouterr().err


# ---------------------------------------------------------------- gen

def test_gen_writes_index_and_counts(files, capsys, tmp_path):
    assert (files / "data" / "index.json").is_file()
    assert run("gen", "--config", files / "synth.yaml", "--out", tmp_path / "d") == 0
    out = capsys.readouterr().out
    assert "subjects: 4" in out and "sequences: 24" in out


def test_gen_is_deterministic(files, tmp_path, monkeypatch):
    monkeypatch.setenv("GAITKIT_THREADS", "2")
    assert run("gen", "--config", files / "synth.yaml", "--out", tmp_path / "again") == 0
    assert tree_digest(tmp_path / "again") == tree_digest(files / "data")


def test_gen_reads_synth_section_of_experiment_config(tmp_path):
    doc = tiny_experiment().to_dict()
    doc["synth"] = dict(TINY_SYNTH)
    (tmp_path / "exp.yaml").write_text(yaml.safe_dump(doc))
    assert run("gen", "--config", tmp_path / "exp.yaml", "--out", tmp_path / "d") == 0
    assert len(DatasetIndex.load(tmp_path / "d").entries) == 24


def test_gen_missing_config(tmp_path, capsys):
    assert run("gen", "--config", tmp_path / "nope.yaml", "--out", tmp_path / "d") == 2
    assert "config file not found" in capsys.readouterr().err
    (tmp_path / "bad.yaml").write_text("n_subject: 3\n")
    assert run("gen", "--config", tmp_path / "bad.yaml", "--out", tmp_path / "d") == 2


# ---------------------------------------------------------------- train

def test_train_outputs(trained, capsys):
    names = sorted(p.name for p in trained.iterdir())
    assert names == ["ckpt_0000002.gckp", "ckpt_0000004.gckp", "config.yaml", "last.gckp",
                     "metrics.jsonl", "timing.jsonl"]
    assert len((trained / "metrics.jsonl").read_text().splitlines()) == 4


def test_train_resume_matches(files, trained, tmp_path):
    assert run("train", "--config", files / "exp.yaml", "--data", files / "data", "--out", tmp_path,
               "--iters", 4) == 0
    (tmp_path / "ckpt_0000004.gckp").unlink()
    (tmp_path / "last.gckp").unlink()
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()[:2]
    (tmp_path / "metrics.jsonl").write_text("\n".join(lines) + "\n")
    assert run("train", "--config", files / "exp.yaml", "--data", files / "data", "--out", tmp_path,
               "--resume", tmp_path / "ckpt_0000002.gckp") == 0
    assert (tmp_path / "last.gckp").read_bytes() == (trained / "last.gckp").read_bytes()
    assert (tmp_path / "metrics.jsonl").read_bytes() == (trained / "metrics.jsonl").read_bytes()


def test_train_bad_inputs(files, tmp_path, capsys):
    assert run("train", "--config", files / "exp.yaml", "--data", tmp_path, "--out", tmp_path / "r") == 2
    assert "index.json" in capsys.readouterr().err
    assert run("train", "--config", files / "exp.yaml", "--data", files / "data", "--out", tmp_path / "r",
               "--resume", tmp_path / "missing.gckp") == 2
    assert run("train", "--config", tmp_path / "none.yaml", "--data", files / "data", "--out", tmp_path) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_abort_exits_3(files, tmp_path, capsys):
    cfg = tiny_experiment(optimizer=OptimizerConfig(lr=1e300, lr_low=1e300, decay_at=3))
    (tmp_path / "exp.yaml").write_text(cfg.to_yaml())
    assert run("train", "--config", tmp_path / "exp.yaml", "--data", files / "data", "--out", tmp_path / "r") == 3
    assert "training aborted" in capsys.readouterr().err
    assert (tmp_path / "r" / "abort.json").is_file()


def test_ten_iteration_smoke_run_is_fast(files, tmp_path):
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "gaitkit.cli", "train", "--config", str(files / "exp.yaml"),
                           "--data", str(files / "data"), "--out", str(tmp_path), "--iters", "10"],
                          capture_output=True, text=True, env={**os.environ, "GAITKIT_THREADS": "1"})
    elapsed = time.perf_counter() - start
    assert proc.returncode == 0, proc.stderr
    assert "iterations: 10" in proc.stdout
    assert elapsed < 60


# ---------------------------------------------------------------- eval

def test_eval_report(files, trained, capsys):
    assert run("eval", "--ckpt", trained / "last.gckp", "--data", files / "data",
               "--report", files / "rep", "--heat-strip") == 0
    out = capsys.readouterr().out
    doc = json.loads((files / "rep.json").read_text())
    assert set(doc) == {"views", "conditions", "accuracy", "probes", "condition_mean", "mean", "skipped"}
    assert doc["views"] == [0, 90] and doc["conditions"] == ["NM", "CL"]
    assert out == (files / "rep.txt").read_text()
    assert (files / "rep.pgm").read_bytes().startswith(b"P5\n")
    assert run("eval", "--ckpt", trained / "last.gckp", "--data", files / "data", "--report", files / "rep2") == 0
    assert (files / "rep2.json").read_bytes() == (files / "rep.json").read_bytes()


def test_eval_default_report_path(files, trained):
    assert run("eval", "--ckpt", trained / "last.gckp", "--data", files / "data") == 0
    assert (trained / "report.json").is_file() and (trained / "report.txt").is_file()


def test_eval_mismatched_config(files, trained, tmp_path, capsys):
    other = tiny_experiment(backbone=tiny_backbone(embedding_dim=8))
    (tmp_path / "other.yaml").write_text(other.to_yaml())
    assert run("eval", "--ckpt", trained / "last.gckp", "--data", files / "data",
               "--config", tmp_path / "other.yaml", "--report", tmp_path / "r") == 2
    assert "different backbone" in capsys.readouterr().err
    assert run("eval", "--ckpt", tmp_path / "none.gckp", "--data", files / "data") == 2
    (tmp_path / "junk.gckp").write_bytes(b"not a checkpoint")
    assert run("eval", "--ckpt", tmp_path / "junk.gckp", "--data", files / "data") == 2


# ---------------------------------------------------------------- ablate

def test_ablate(files, tmp_path, capsys):
    assert run("ablate", "--config", files / "exp.yaml", "--data", files / "data", "--out", tmp_path,
               "--seeds", 0, "--iters", 3) == 0
    out = capsys.readouterr().out
    assert [line.split()[0] for line in out.splitlines()[2:6]] == ["plain", "simo", "femo", "full"]
    doc = json.loads((tmp_path / "ablation.json").read_text())
    assert sorted(doc["variants"]) == ["femo", "full", "plain", "simo"]
    assert (tmp_path / "ablation.txt").read_text() == out


# ---------------------------------------------------------------- export-masks

def test_export_masks_matches_motion_masks(files, tmp_path, capsys):
    assert run("export-masks", "--data", files / "data", "--subject", "001", "--seq", 1,
               "--out", tmp_path, "--clip-len", 3) == 0
    assert "clips: 4 (files: 8)" in capsys.readouterr().out
    assert len(list(tmp_path.glob("*.pgm"))) == 8
    index = DatasetIndex.load(files / "data")
    entry = next(e for e in index.entries if e.subject == "001" and e.condition == "NM" and e.seq_no == 1
                 and e.view == 0)
    motion = build_motion_sequence(normalize(index.load_entry(entry)), SimoConfig(clip_len=3))
    for i in range(4):
        np.testing.assert_array_equal(read_pgm(tmp_path / f"mask_{i:03d}.pgm"),
                                      np.rint(motion.masks[i] * 255).astype(np.uint8))
        np.testing.assert_array_equal(read_pgm(tmp_path / f"aggregate_{i:03d}.pgm"),
                                      np.rint(motion.aggregated[i] * 255).astype(np.uint8))


def test_export_masks_static_sequence_is_black(tmp_path):
    frame = np.zeros((64, 44), dtype=np.uint8)
    frame[10:50, 15:30] = 1
    seq = SilhouetteSequence(np.repeat(frame[None], 8, axis=0), "001", "NM", 0, 1)
    root = tmp_path / "data"
    rel = "001/NM-01/000/seq.gseq"
    (root / rel).parent.mkdir(parents=True)
    save_sequence(seq, root / rel)
    DatasetIndex([SequenceEntry("001", "NM", 1, 0, rel, 8)], {"train": ["001"], "test": []}).write(root)
    assert run("export-masks", "--data", root, "--subject", "001", "--seq", 1, "--out", tmp_path / "m") == 0
    pgms = sorted((tmp_path / "m").glob("*.pgm"))
    assert len(pgms) == 4
    for f in pgms:
        assert not read_pgm(f).any()


def test_export_masks_unknown_sequence(files, tmp_path, capsys):
    assert run("export-masks", "--data", files / "data", "--subject", "999", "--seq", 1, "--out", tmp_path) == 2
    assert "no sequence" in capsys.readouterr().err


# ---------------------------------------------------------------- info

def test_info_checkpoint(trained, capsys):
    assert run("info", "--ckpt", trained / "last.gckp") == 0
    out = capsys.readouterr().out
    n = analytic_parameter_count(tiny_backbone())
    assert f"parameters: {n}\n" in out and f"parameters (analytic): {n}\n" in out
    assert f"config digest: {load_config(trained / 'config.yaml').digest()}" in out
    assert run("info", "--ckpt", trained / "last.gckp") == 0
    assert capsys.readouterr().out == out


def test_info_dataset(files, capsys):
    assert run("info", "--data", files / "data") == 0
    out = capsys.readouterr().out
    assert "subjects: 4" in out and "sequences: 24" in out
    assert "conditions: CL=8, NM=16" in out and "views: 0, 90" in out
    assert "frames per sequence: min 12 max 12" in out


def test_info_unknown_file(tmp_path, capsys):
    assert run("info", "--ckpt", tmp_path / "nothing") == 2
    assert run("info", "--data", tmp_path) == 2
    (tmp_path / "x.gckp").write_bytes(b"\0" * 64)
    assert run("info", "--ckpt", tmp_path / "x.gckp") == 2
    assert capsys.readouterr().out == ""
