import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from essa import checkpoint as ck
from essa.cli import main
from essa.data import expected_size, load
from essa.evaluation import evaluate_knn_protocol

SPEC = """[synth]
image_size = 16
train_size = 16
val_size = 4
test_size = 12
seed = 1
"""

CONFIG = """[model]
preset = tiny
seed = 0

[adapter.essa]
kind = apla
fraction = 0.25

[essa]
epochs = 3
warmup_epochs = 1
batch_size = 8

[sa]
epochs = 2
warmup_epochs = 0
batch_size = 8

[ttt]
epochs = 1
warmup_epochs = 0
batch_size = 8

[data]
essa = data/synth.train.target.esds
sa = data/synth.train.source.esds
ttt = data/synth.test.target.esds
eval_gallery = data/synth.train.target.esds
eval_query = data/synth.test.target.esds

[eval]
k = 3
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.ini").write_text(SPEC)
    (root / "run.cfg").write_text(CONFIG)
    assert main(["synth", "--spec", str(root / "spec.ini"), "--out", str(root / "data")]) == 0
    return root


def run(work, *args):
    return main([str(a) for a in args])


class TestSynth:
    def test_files_and_sizes(self, work):
        files = sorted(p.name for p in (work / "data").glob("*.esds"))
        assert len(files) == 6
        for split, n in (("train", 16), ("val", 4), ("test", 12)):
            p = work / "data" / f"synth.{split}.source.esds"
            assert p.stat().st_size == expected_size(n, 3, 16, 16, True)

    def test_rerun_byte_identical(self, work, tmp_path):
        assert run(work, "synth", "--spec", work / "spec.ini", "--out", tmp_path) == 0
        for p in (work / "data").glob("*.esds"):
            assert (tmp_path / p.name).read_bytes() == p.read_bytes()

    def test_zero_shift_warning(self, work, tmp_path, capsys):
        (tmp_path / "s.ini").write_text(SPEC + "shift_strength = 0\n")
        assert run(work, "synth", "--spec", tmp_path / "s.ini", "--out", tmp_path / "d") == 0
        assert "byte-identical" in capsys.readouterr().err

    def test_bad_spec_key(self, work, tmp_path):
        (tmp_path / "s.ini").write_text("[synth]\ncolour = 1\n")
        assert run(work, "synth", "--spec", tmp_path / "s.ini", "--out", tmp_path) == 2


class TestStages:
    def test_adapt_resume_matches_uninterrupted(self, work):
        cfg = work / "run.cfg"
        assert run(work, "adapt", "--config", cfg, "--out", work / "full.ck", "--log", work / "logs/adapt.jsonl") == 0
        lines = (work / "logs/adapt.jsonl").read_text().splitlines()
        assert len(lines) == 3
        rec = json.loads(lines[0])
        assert {"stage", "epoch", "loss", "lr", "steps_per_sec", "trainable_fraction"} <= set(rec)
        assert rec["stage"] == "essa" and rec["adapter"] == "apla"

        assert run(work, "adapt", "--config", cfg, "--out", work / "part.ck", "--stop-at-epoch", "1") == 0
        assert run(work, "adapt", "--config", cfg, "--out", work / "resumed.ck", "--resume", work / "part.ck") == 0
        assert (work / "resumed.ck").read_bytes() == (work / "full.ck").read_bytes()

    def test_finetune_ttt_eval_report(self, work, capsys):
        cfg = work / "run.cfg"
        logs = work / "logs"
        assert run(work, "finetune", "--config", cfg, "--init", work / "full.ck", "--out", work / "sa.ck",
                   "--log", logs / "sa.jsonl") == 0
        assert run(work, "ttt", "--config", cfg, "--init", work / "sa.ck", "--out", work / "ttt.ck",
                   "--log", logs / "ttt.jsonl") == 0
        sa_head = ck.model_from_checkpoint(ck.load(work / "sa.ck"))[1]
        ttt_head = ck.model_from_checkpoint(ck.load(work / "ttt.ck"))[1]
        for name in sa_head:
            np.testing.assert_array_equal(sa_head[name].data, ttt_head[name].data)

        capsys.readouterr()
        assert run(work, "eval", "--ckpt", work / "full.ck", "--config", cfg, "--log", logs / "eval.jsonl") == 0
        first = json.loads(capsys.readouterr().out)
        assert run(work, "eval", "--ckpt", work / "full.ck", "--config", cfg) == 0
        assert json.loads(capsys.readouterr().out) == first
        model = ck.model_from_checkpoint(ck.load(work / "full.ck"))[0]
        g, q = load(work / "data/synth.train.target.esds"), load(work / "data/synth.test.target.esds")
        assert first["value"] == evaluate_knn_protocol(model, g.images, g.labels, q.images, q.labels, k=3)

        assert run(work, "eval", "--ckpt", work / "sa.ck", "--config", cfg, "--protocol", "head") == 0
        assert run(work, "eval", "--ckpt", work / "full.ck", "--config", cfg, "--protocol", "head") == 4

        assert run(work, "report", "--logs", logs, "--out", work / "report.csv") == 0
        rows = list(csv.DictReader(open(work / "report.csv")))
        by_key = {(r["adapter"], r["stage"]): r for r in rows}
        assert set(by_key) == {("apla", "essa"), ("full", "sa"), ("apla", "ttt")}
        essa = by_key[("apla", "essa")]
        assert essa["epochs"] == "3" and essa["metric_name"] == "accuracy"
        assert float(essa["final_metric"]) == first["value"]
        assert by_key[("full", "sa")]["trainable_fraction"] == "1.0"
        for r in rows:
            assert int(r["optimizer_state_bytes"]) == int(r["trainable_count"]) * 16

    def test_ttt_without_init(self, work):
        assert run(work, "ttt", "--config", work / "run.cfg", "--out", work / "x.ck") == 4

    def test_resume_with_other_preset(self, work, tmp_path):
        (tmp_path / "small.cfg").write_text(CONFIG.replace("preset = tiny", "preset = small")
                                            .replace("data/", str(work / "data") + "/"))
        assert run(work, "adapt", "--config", tmp_path / "small.cfg", "--out", tmp_path / "o.ck",
                   "--resume", work / "part.ck") == 2

    def test_unlabeled_finetune_is_data_error(self, work, tmp_path):
        from essa.data import Dataset, save

        save(Dataset(load(work / "data/synth.train.source.esds").pixels), tmp_path / "u.esds")
        (tmp_path / "u.cfg").write_text(f"[sa]\nepochs = 1\n[data]\nsa = {tmp_path / 'u.esds'}\n")
        assert run(work, "finetune", "--config", tmp_path / "u.cfg", "--out", tmp_path / "o.ck") == 3


class TestErrors:
    def test_config_error_exit_code(self, work, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("[model]\nseed = x\n")
        assert run(work, "adapt", "--config", tmp_path / "bad.cfg", "--out", tmp_path / "o.ck") == 2
        assert "bad.cfg:2" in capsys.readouterr().err

    def test_corrupt_checkpoint_exit_code(self, work, tmp_path):
        (tmp_path / "c.ck").write_bytes(b"ESCK\x01\x00")
        assert run(work, "eval", "--ckpt", tmp_path / "c.ck", "--config", work / "run.cfg") == 3

    def test_malformed_log(self, work, tmp_path, capsys):
        (tmp_path / "a.jsonl").write_text('{"stage": "essa"}\nnot json\n')
        assert run(work, "report", "--logs", tmp_path, "--out", tmp_path / "r.csv") == 3
        assert "a.jsonl:2" in capsys.readouterr().err

    def test_unwritable_output_is_io_error(self, work, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert run(work, "synth", "--spec", work / "spec.ini", "--out", blocker / "sub") == 1

    def test_unknown_protocol_is_usage_error(self, work):
        proc = subprocess.run([sys.executable, "-m", "essa", "eval", "--ckpt", "x", "--config", "y",
                               "--protocol", "linear"], capture_output=True, text=True)
        assert proc.returncode == 2 and "invalid choice" in proc.stderr
