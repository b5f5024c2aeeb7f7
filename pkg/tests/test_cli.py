import csv
import json
from pathlib import Path

import numpy as np
import pytest

from hierparc import cli
from hierparc.errors import NonFiniteLoss
from hierparc.trainer import TrainLog
from hierparc.volumes import load_array, save_array

SMALL_TRAIN = "max_epochs = 3\npatience = 2\nbatch_size = 128\nbatches_per_epoch = 2\nval_voxels = 512\nhidden = 8\nradius = 1\n"


def run(*argv):
    return cli.main([str(a) for a in argv])


def manifest(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-phantom (default 64^3 spec, 3 volumes) -> train H_unc -> predict."""
    root = tmp_path_factory.mktemp("pipe")
    (root / "train.txt").write_text(SMALL_TRAIN)
    assert run("-q", "gen-phantom", "--spec", "default", "--count", 3, "--out", root / "data") == 0
    assert run("-q", "train", "--config", root / "train.txt", "--data", root / "data", "--variant", "H_unc", "--out", root / "run") == 0
    vol = root / "data" / "vol002-seed9.hpv"
    assert run("-q", "predict", "--checkpoint", root / "run" / "checkpoint.hpck", "--volume", vol, "--out", root / "pred") == 0
    return root


class TestPipeline:
    def test_eval_table_rows(self, pipeline):
        out = pipeline / "eval" / "dice.csv"
        code = run("eval", "--pred", f"H_unc={pipeline / 'pred' / 'labels.hpv'}",
                   "--truth", pipeline / "data" / "vol002-seed9.labels.hpv", "--tree", "phantom8", "--out", out)
        assert code == 0
        rows = list(csv.reader(out.open()))
        assert rows[0] == ["level", "H_unc_median", "H_unc_iqr"]
        assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
        m = manifest(out.with_name("dice.csv.manifest.json"))
        assert m["exit_status"] == 0 and str(out) in m["outputs"]

    def test_manifests_name_existing_files(self, pipeline):
        for sub in ("data", "run", "pred"):
            m = manifest(pipeline / sub / "manifest.json")
            assert m["exit_status"] == 0
            assert m["outputs"]
            assert all(Path(p).exists() for p in m["outputs"])
            assert m["version"] and m["started"] and m["finished"]

    def test_train_outputs(self, pipeline):
        names = {p.name for p in (pipeline / "run").iterdir()}
        assert {"checkpoint.hpck", "train_log.csv", "config.txt", "summary.json", "manifest.json"} <= names
        summary = json.loads((pipeline / "run" / "summary.json").read_text())
        assert summary["stop_reason"] in ("early_stop", "max_epochs")
        m = manifest(pipeline / "run" / "manifest.json")
        assert m["sources"]["variant"] == "flag" and m["sources"]["max_epochs"] == "file"

    def test_predict_maps(self, pipeline):
        probs, _ = load_array(pipeline / "pred" / "leaf_probs.hpv")
        assert probs.shape == (64, 64, 64, 8)
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-5)
        s, _ = load_array(pipeline / "pred" / "s.hpv")
        assert s.shape[-1] == 7
        plots = json.loads((pipeline / "pred" / "plot_manifest.json").read_text())
        assert {a["name"] for a in plots["artifacts"]} == {"leaf_probs", "labels", "cond", "s", "total_sigma"}

    def test_threshold(self, pipeline):
        out = pipeline / "thr"
        assert run("threshold", "--prediction", pipeline / "pred", "--node", "left_core", "--sigma", 0.5, "--out", out) == 0
        lower, _ = load_array(out / "lower.hpv")
        upper, _ = load_array(out / "upper.hpv")
        assert (lower <= upper).all()

    def test_threshold_unknown_node(self, pipeline):
        assert run("threshold", "--prediction", pipeline / "pred", "--node", "nope", "--sigma", 0.5, "--out", pipeline / "thr2") == 1

    def test_hist(self, pipeline):
        out = pipeline / "hist"
        code = run("hist", "--sigma", pipeline / "pred" / "total_sigma.hpv", "--probs", pipeline / "pred" / "leaf_probs.hpv",
                   "--truth", pipeline / "data" / "vol002-seed9.labels.hpv", "--out", out)
        assert code == 0
        rows = list(csv.DictReader((out / "histogram.csv").open()))
        assert sum(int(r["count"]) for r in rows) == 64**3


class TestReruns:
    def test_byte_identical(self, tmp_path):
        (tmp_path / "ph.txt").write_text("shape = 12,12,12\ncount = 3\n")
        (tmp_path / "tr.txt").write_text(SMALL_TRAIN)
        for i in (1, 2):
            assert run("-q", "gen-phantom", "--spec", tmp_path / "ph.txt", "--out", tmp_path / f"d{i}") == 0
            assert run("-q", "train", "--config", tmp_path / "tr.txt", "--data", tmp_path / f"d{i}", "--out", tmp_path / f"r{i}") == 0
        for name in ("vol000-seed7.hpv", "vol001-seed8.labels.hpv", "taxonomy.txt", "phantom.txt"):
            assert (tmp_path / "d1" / name).read_bytes() == (tmp_path / "d2" / name).read_bytes()
        for name in ("checkpoint.hpck", "summary.json", "config.txt"):
            assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()

        def without_wall_time(path):
            rows = list(csv.reader(path.open()))
            col = rows[0].index("wall_time")
            return [r[:col] + r[col + 1:] for r in rows]

        assert without_wall_time(tmp_path / "r1" / "train_log.csv") == without_wall_time(tmp_path / "r2" / "train_log.csv")

        def stable(path):
            m = manifest(path)
            for key in ("started", "finished", "inputs", "outputs"):
                m.pop(key)
            return m

        assert stable(tmp_path / "r1" / "manifest.json") == stable(tmp_path / "r2" / "manifest.json")


class TestExitCodes:
    def test_check_grads(self, tmp_path, capsys):
        assert run("check-grads", "--tree", "sample5", "--seed", 3, "--out", tmp_path) == 0
        out = capsys.readouterr().out
        assert "max rel. error" in out
        m = manifest(tmp_path / "manifest.json")
        assert m["config"]["max_rel_error"] < 1e-5

    def test_eval_shape_mismatch(self, tmp_path, capsys):
        save_array(tmp_path / "a.hpv", np.zeros((8, 8, 8), np.int32))
        save_array(tmp_path / "b.hpv", np.zeros((8, 8, 9), np.int32))
        code = run("eval", "--pred", tmp_path / "a.hpv", "--truth", tmp_path / "b.hpv", "--tree", "phantom8", "--out", tmp_path / "d.csv")
        assert code == 1
        assert "ShapeMismatch" in capsys.readouterr().err
        assert manifest(tmp_path / "d.csv.manifest.json")["exit_status"] == 1

    def test_usage_error(self, capsys):
        assert run("train", "--no-such-flag") == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_required_path(self, monkeypatch):
        monkeypatch.delenv("HIERPARC_OUT", raising=False)
        assert run("gen-phantom") == 1

    def test_path_from_environment(self, tmp_path, monkeypatch):
        (tmp_path / "ph.txt").write_text("shape = 8,8,8\ncount = 1\n")
        monkeypatch.setenv("HIERPARC_OUT", str(tmp_path / "envout"))
        assert run("-q", "gen-phantom", "--spec", tmp_path / "ph.txt") == 0
        m = manifest(tmp_path / "envout" / "manifest.json")
        assert m["sources"]["out"] == "env"

    def test_missing_input_file(self, tmp_path):
        assert run("predict", "--checkpoint", tmp_path / "none.hpck", "--volume", tmp_path / "v.hpv", "--out", tmp_path / "p") == 1

    def test_runtime_failure(self, tmp_path, monkeypatch):
        (tmp_path / "ph.txt").write_text("shape = 8,8,8\ncount = 3\n")
        assert run("-q", "gen-phantom", "--spec", tmp_path / "ph.txt", "--out", tmp_path / "d") == 0

        def explode(cfg, dataset, progress=None):
            log = TrainLog(3)
            log.rows.append(dict(epoch=1, train_loss=float("nan"), val_loss=float("nan"), wall_time=0.0, dice=[0, 0, 0]))
            raise NonFiniteLoss("non-finite loss at epoch 1", log)

        monkeypatch.setattr(cli, "train", explode)
        assert run("-q", "train", "--data", tmp_path / "d", "--out", tmp_path / "r") == 2
        m = manifest(tmp_path / "r" / "manifest.json")
        assert m["exit_status"] == 2 and "NonFiniteLoss" in m["error"]
        assert (tmp_path / "r" / "train_log.csv").exists()

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as info:
            run("--version")
        assert info.value.code == 0
        assert "format version 1" in capsys.readouterr().out
