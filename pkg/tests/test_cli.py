import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from gleason_mamba.cli import main
from gleason_mamba.core.serialize import load_checkpoint
from gleason_mamba.pipeline import read_manifest

from _fixtures import g3_fixture, tree_bytes, write_tma

SMALL = ["--n-train", "48", "--n-val", "16", "--n-test", "24"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def g3_tree(tmp_path_factory):
    return g3_fixture(tmp_path_factory.mktemp("g3"))


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), *SMALL, "--seed", "3"]) == 0
    return out


@pytest.fixture
def tiny_train_cfg(tmp_path):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"train": {"epochs": 1, "batch_size": 16}}))
    return cfg


class TestExtract:
    def test_g3_fixture(self, g3_tree, tmp_path, capsys):
        out = tmp_path / "out"
        code = main(["extract", "--images", str(g3_tree / "images"),
                     "--annotations", str(g3_tree / "annotations"), "--out", str(out)])
        assert code == 0
        recs = read_manifest(out / "manifest.csv")
        assert len(recs) == 15
        assert {r.label for r in recs} == {"g3"}
        assert all((out / f"{r.patch_id}.png").is_file() for r in recs)
        assert "kept 15 patches, discarded 346" in capsys.readouterr().out
        cfg = json.loads((out / "config.json").read_text())
        assert (cfg["patch_size"], cfg["stride"], cfg["core"]) == (512, 256, 250)

    def test_rerun_byte_identical(self, g3_tree, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["extract", "--images", str(g3_tree / "images"),
                         "--annotations", str(g3_tree / "annotations"), "--out", str(out)]) == 0
            outs.append(tree_bytes(out))
        assert outs[0].keys() == outs[1].keys()
        assert {k: v for k, v in outs[0].items() if k != "config.json"} == \
            {k: v for k, v in outs[1].items() if k != "config.json"}

    def test_empty_annotation_dir(self, tmp_path, capsys):
        (tmp_path / "ann").mkdir()
        (tmp_path / "img").mkdir()
        code = main(["extract", "--images", str(tmp_path / "img"),
                     "--annotations", str(tmp_path / "ann"), "--out", str(tmp_path / "o")])
        assert code == 2
        assert str(tmp_path / "ann") in capsys.readouterr().err

    def test_nothing_kept_exits_1(self, tmp_path):
        write_tma(tmp_path, "bg", np.zeros((600, 600), dtype=np.uint8))
        code = main(["extract", "--images", str(tmp_path / "images"),
                     "--annotations", str(tmp_path / "annotations"), "--out", str(tmp_path / "o")])
        assert code == 1

    def test_unreadable_image_skipped(self, tmp_path, caplog):
        cons = np.full((512, 512), 4, dtype=np.uint8)
        write_tma(tmp_path, "good", cons, patient="p1")
        write_tma(tmp_path, "bad", cons)
        (tmp_path / "images" / "bad.png").write_bytes(b"not a png")
        code = main(["extract", "--images", str(tmp_path / "images"), "--patient-map",
                     str(tmp_path / "patients.csv"),
                     "--annotations", str(tmp_path / "annotations"), "--out", str(tmp_path / "o")])
        assert code == 0
        recs = read_manifest(tmp_path / "o" / "manifest.csv")
        assert [(r.image_id, r.patient_id, r.label) for r in recs] == [("good", "p1", "g4")]
        assert "bad" in caplog.text

    def test_flags_override_config(self, tmp_path):
        write_tma(tmp_path, "t", np.full((768, 768), 5, dtype=np.uint8))
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"patch_size": 512, "stride": 128}))
        out = tmp_path / "o"
        assert main(["extract", "--images", str(tmp_path / "images"), "--annotations",
                     str(tmp_path / "annotations"), "--out", str(out), "--config", str(cfg),
                     "--stride", "256"]) == 0
        assert json.loads((out / "config.json").read_text())["stride"] == 256
        assert len(read_manifest(out / "manifest.csv")) == 4


class TestSplit:
    def test_split_and_rerun(self, synth_dir, tmp_path, capsys):
        outs = []
        for name in ("a.csv", "b.csv"):
            assert main(["split", "--manifest", str(synth_dir / "manifest.csv"),
                         "--out", str(tmp_path / name), "--seed", "5"]) == 0
            outs.append((tmp_path / name).read_bytes())
        assert outs[0] == outs[1]
        recs = read_manifest(tmp_path / "a.csv", require_split=True)
        by_patient = {}
        for r in recs:
            by_patient.setdefault(r.patient_id, set()).add(r.split)
        assert all(len(s) == 1 for s in by_patient.values())
        assert "total" in capsys.readouterr().out

    def test_folds(self, synth_dir, tmp_path):
        assert main(["split", "--manifest", str(synth_dir / "manifest.csv"),
                     "--out", str(tmp_path / "f.csv"), "--folds", "2", "--test-frac", "0.25"]) == 0
        recs = read_manifest(tmp_path / "f.csv", require_split=True)
        assert {r.fold for r in recs if r.split == "train"} == {1, 2}
        assert all(r.fold is None for r in recs if r.split == "test")
        cfg = json.loads((tmp_path / "f.config.json").read_text())
        assert cfg["folds"] == 2 and cfg["test_frac"] == 0.25

    def test_single_patient(self, g3_tree, tmp_path, capsys):
        out = tmp_path / "x"
        main(["extract", "--images", str(g3_tree / "images"),
              "--annotations", str(g3_tree / "annotations"), "--out", str(out)])
        code = main(["split", "--manifest", str(out / "manifest.csv"), "--out", str(tmp_path / "s.csv")])
        assert code == 2
        assert "patient" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path):
        assert main(["split", "--manifest", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "s.csv")]) == 2


class TestTrainEval:
    def test_zero_epochs(self, synth_dir, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--manifest", str(synth_dir / "manifest.csv"), "--out", str(out),
                     "--epochs", "0"]) == 0
        assert (out / "train_log.csv").read_text() == "epoch,train_loss,train_acc,val_loss,val_acc\n"
        state, meta = load_checkpoint(out / "model.ckpt")
        assert not state["head.head.W"].any()
        assert meta["classes"] == ["benign", "g3", "g4", "g5"]

    def test_train_eval_deterministic(self, synth_dir, tmp_path, tiny_train_cfg):
        logs, ckpts, reports = [], [], []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["train", "--manifest", str(synth_dir / "manifest.csv"), "--out", str(out),
                         "--config", str(tiny_train_cfg), "--seed", "2"]) == 0
            ev = tmp_path / f"eval_{name}"
            assert main(["eval", "--manifest", str(synth_dir / "manifest.csv"),
                         "--checkpoint", str(out / "model.ckpt"), "--out", str(ev)]) == 0
            logs.append((out / "train_log.csv").read_bytes())
            ckpts.append((out / "model.ckpt").read_bytes())
            reports.append({k: v for k, v in tree_bytes(ev).items() if k != "config.json"})
        assert logs[0] == logs[1] and ckpts[0] == ckpts[1] and reports[0] == reports[1]
        log = rows(tmp_path / "a" / "train_log.csv")
        assert len(log) == 2 and log[1][0] == "1"
        assert math.isfinite(float(log[1][1]))
        preds = rows(tmp_path / "eval_a" / "predictions.csv")
        assert preds[0] == ["patch_id", "predicted_label"] and len(preds) == 25

    def test_different_seed_differs(self, synth_dir, tmp_path, tiny_train_cfg):
        for seed in ("0", "1"):
            assert main(["train", "--manifest", str(synth_dir / "manifest.csv"),
                         "--out", str(tmp_path / seed), "--config", str(tiny_train_cfg), "--seed", seed]) == 0
        assert (tmp_path / "0" / "model.ckpt").read_bytes() != (tmp_path / "1" / "model.ckpt").read_bytes()

    def test_missing_splits(self, g3_tree, tmp_path):
        out = tmp_path / "x"
        main(["extract", "--images", str(g3_tree / "images"),
              "--annotations", str(g3_tree / "annotations"), "--out", str(out)])
        assert main(["train", "--manifest", str(out / "manifest.csv"), "--out", str(tmp_path / "t")]) == 2

    def test_bad_model_config(self, synth_dir, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"model": {"depths": [1]}}))
        assert main(["train", "--manifest", str(synth_dir / "manifest.csv"), "--out", str(tmp_path / "t"),
                     "--config", str(cfg)]) == 2


def write_preds(path, pairs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patch_id", "predicted_label"])
        w.writerows(pairs)


class TestEvalPredCsv:
    def test_perfect(self, synth_dir, tmp_path):
        test = [r for r in read_manifest(synth_dir / "manifest.csv") if r.split == "test"]
        write_preds(tmp_path / "p.csv", [(r.patch_id, r.label) for r in test])
        out = tmp_path / "ev"
        assert main(["eval", "--manifest", str(synth_dir / "manifest.csv"),
                     "--pred-csv", str(tmp_path / "p.csv"), "--out", str(out)]) == 0
        rep = json.loads((out / "metrics.json").read_text())
        assert rep["overall_accuracy"] == 1.0
        for k in ("weighted_precision", "weighted_recall", "weighted_f1", "weighted_accuracy"):
            assert rep["weighted"][k] == 1.0

    def test_hand_fixture(self, tmp_path):
        # TP=8, FP=2, FN=1, TN=9 with g3 as the positive class, benign as the negative
        truths = ["g3"] * 8 + ["benign"] * 2 + ["g3"] + ["benign"] * 9
        preds = ["g3"] * 8 + ["g3"] * 2 + ["benign"] + ["benign"] * 9
        man = tmp_path / "m.csv"
        with open(man, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patch_id", "patient_id", "image_id", "x", "y", "label", "split", "fold"])
            for i, t in enumerate(truths):
                w.writerow([f"p{i}", "P", "I", 0, 0, t, "test", ""])
        write_preds(tmp_path / "p.csv", [(f"p{i}", p) for i, p in enumerate(preds)])
        assert main(["eval", "--manifest", str(man), "--pred-csv", str(tmp_path / "p.csv"),
                     "--out", str(tmp_path / "ev")]) == 0
        g3 = json.loads((tmp_path / "ev" / "metrics.json").read_text())["per_class"]["g3"]
        assert (g3["precision"], g3["recall"], g3["f1"], g3["accuracy"]) == (0.8, 0.8889, 0.8421, 0.85)

    def test_unknown_label(self, synth_dir, tmp_path, capsys):
        test = [r for r in read_manifest(synth_dir / "manifest.csv") if r.split == "test"]
        pairs = [(r.patch_id, r.label) for r in test]
        pairs[3] = (pairs[3][0], "g7")
        write_preds(tmp_path / "p.csv", pairs)
        assert main(["eval", "--manifest", str(synth_dir / "manifest.csv"),
                     "--pred-csv", str(tmp_path / "p.csv"), "--out", str(tmp_path / "ev")]) == 2
        assert "p.csv:5: unknown label 'g7'" in capsys.readouterr().err

    def test_missing_ids_listed(self, synth_dir, tmp_path, capsys):
        test = [r for r in read_manifest(synth_dir / "manifest.csv") if r.split == "test"]
        write_preds(tmp_path / "p.csv", [(r.patch_id, r.label) for r in test[2:]])
        assert main(["eval", "--manifest", str(synth_dir / "manifest.csv"),
                     "--pred-csv", str(tmp_path / "p.csv"), "--out", str(tmp_path / "ev")]) == 2
        err = capsys.readouterr().err
        assert "2 test patches have no prediction" in err
        assert test[0].patch_id in err and test[1].patch_id in err

    def test_needs_exactly_one_source(self, synth_dir, tmp_path):
        assert main(["eval", "--manifest", str(synth_dir / "manifest.csv"), "--out", str(tmp_path)]) == 2

    def test_bad_checkpoint(self, synth_dir, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert main(["eval", "--manifest", str(synth_dir / "manifest.csv"),
                     "--checkpoint", str(bad), "--out", str(tmp_path / "ev")]) == 2


class TestEntryPoint:
    def test_shapes(self, capsys):
        assert main(["shapes", "--batch", "2"]) == 0
        out = capsys.readouterr().out
        assert "(2, 4)" in out

    def test_subprocess_exit_codes(self, tmp_path):
        run = lambda *a: subprocess.run([sys.executable, "-m", "gleason_mamba.cli", *a],
                                        capture_output=True, text=True)
        assert run("shapes").returncode == 0
        r = run("split", "--manifest", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o.csv"))
        assert r.returncode == 2 and "manifest not found" in r.stderr
        assert run("frobnicate").returncode == 2

    def test_runtime_failure_exit_1(self, tmp_path, monkeypatch):
        import gleason_mamba.cli as cli

        def boom(*a, **k):
            raise RuntimeError("disk on fire")
        monkeypatch.setattr(cli, "make_textures", boom)
        assert main(["synth", "--out", str(tmp_path)]) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_training_divergence_exit_1(self, synth_dir, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"epochs": 2, "lr": 1e300}}))
        out = tmp_path / "run"
        assert main(["train", "--manifest", str(synth_dir / "manifest.csv"), "--out", str(out),
                     "--config", str(cfg)]) == 1
        assert (out / "train_log.csv").read_text().startswith("epoch,")
