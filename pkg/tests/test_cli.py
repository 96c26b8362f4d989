import json
import os

import numpy as np
import pytest

from tripletkit import cli, training
from tripletkit.sampling import LabeledDataset, read_dataset_csv, write_dataset_csv


def make_data(tmp_path, name="train", ids=6, per_id=4, dim=5, outlier="0.0",
              seed=0):
    rc = cli.main(["datagen", "--ids", str(ids), "--per-id", str(per_id),
                   "--dim", str(dim), "--outlier-rate", outlier,
                   "--seed", str(seed), "--name", name,
                   "-o", str(tmp_path)])
    assert rc == cli.EXIT_OK
    return os.path.join(str(tmp_path), f"{name}.csv")


def quick_train(tmp_path, data, extra=()):
    out = os.path.join(str(tmp_path), "run")
    rc = cli.main(["train", "--data", data, "--widths", "5,8,4",
                   "--P", "3", "--K", "2", "--t0", "20", "--t1", "40",
                   "-o", out, *extra])
    return rc, out


class TestDatagen:
    def test_writes_csv_and_meta(self, tmp_path):
        csv_path = make_data(tmp_path)
        assert os.path.exists(csv_path)
        meta = json.load(open(csv_path.replace(".csv", "_spec.json")))
        assert meta["num_identities"] == 6
        ds = read_dataset_csv(csv_path)
        assert len(ds) == 24 and ds.feature_dim == 5

    def test_deterministic_across_invocations(self, tmp_path):
        a = make_data(tmp_path, name="a", seed=3)
        b = make_data(tmp_path, name="b", seed=3)
        da, db = read_dataset_csv(a), read_dataset_csv(b)
        assert np.array_equal(da.features, db.features)
        assert np.array_equal(da.pids, db.pids)

    def test_missing_required_flag_exits_2(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["datagen", "--ids", "4", "-o", str(tmp_path)])
        assert exc.value.code == 2


class TestTrain:
    def test_writes_checkpoint_and_log(self, tmp_path):
        data = make_data(tmp_path)
        rc, out = quick_train(tmp_path, data)
        assert rc == cli.EXIT_OK
        assert os.path.exists(os.path.join(out, "checkpoint.json"))
        log = open(os.path.join(out, "train_log.csv")).read().splitlines()
        assert log[0].startswith("iter,loss_mean,loss_p5,active_frac,")
        assert len(log) == 41  # header + one record per iteration

    def test_unknown_loss_exits_2(self, tmp_path):
        data = make_data(tmp_path)
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", "--data", data, "--loss", "bogus"])
        assert exc.value.code == 2

    def test_bad_margin_exits_2(self, tmp_path):
        data = make_data(tmp_path)
        rc, _ = quick_train(tmp_path, data, extra=("--margin", "-1"))
        assert rc == cli.EXIT_USAGE

    def test_missing_data_file_exits_3(self, tmp_path):
        rc = cli.main(["train", "--data", str(tmp_path / "nope.csv"),
                       "-o", str(tmp_path)])
        assert rc == cli.EXIT_DATA

    def test_collapse_exits_4(self, tmp_path, monkeypatch):
        data = make_data(tmp_path)

        def boom(cfg, dataset, writer=None):
            raise training.CollapseError(17)

        monkeypatch.setattr(training, "train", boom)
        rc, _ = quick_train(tmp_path, data)
        assert rc == cli.EXIT_COLLAPSE

    def test_config_file_merge(self, tmp_path):
        data = make_data(tmp_path)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"widths": "5,6,3", "t0": 10,
                                        "t1": 20, "P": 3, "K": 2}))
        out = os.path.join(str(tmp_path), "run")
        rc = cli.main(["train", "--data", data, "--config", str(cfg_path),
                       "-o", out])
        assert rc == cli.EXIT_OK
        ckpt = json.load(open(os.path.join(out, "checkpoint.json")))
        assert ckpt["layer_widths"] == [5, 6, 3]

    def test_flag_overrides_config(self, tmp_path):
        data = make_data(tmp_path)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"t1": 9999}))
        out = os.path.join(str(tmp_path), "run")
        rc = cli.main(["train", "--data", data, "--config", str(cfg_path),
                       "--widths", "5,8,4", "--P", "3", "--K", "2",
                       "--t0", "20", "--t1", "40", "-o", out])
        assert rc == cli.EXIT_OK
        log = open(os.path.join(out, "train_log.csv")).read().splitlines()
        assert len(log) == 41


class TestEvaluate:
    def test_end_to_end(self, tmp_path):
        data = make_data(tmp_path)
        rc, out = quick_train(tmp_path, data)
        assert rc == cli.EXIT_OK
        ckpt = os.path.join(out, "checkpoint.json")
        rc = cli.main(["evaluate", "--checkpoint", ckpt, "--queries", data,
                       "--gallery", data, "-o", out])
        assert rc == cli.EXIT_OK
        report = json.load(open(os.path.join(out, "eval_report.json")))
        assert 0.0 <= report["map"] <= 1.0
        assert "cmc" in report

    def test_dim_mismatch_exits_3(self, tmp_path):
        data = make_data(tmp_path)
        rc, out = quick_train(tmp_path, data)
        other = make_data(tmp_path, name="wide", dim=7)
        rc = cli.main(["evaluate",
                       "--checkpoint", os.path.join(out, "checkpoint.json"),
                       "--queries", other, "--gallery", other, "-o", out])
        assert rc == cli.EXIT_DATA

    def test_distractors_reported(self, tmp_path):
        data = make_data(tmp_path)
        rc, out = quick_train(tmp_path, data)
        distract = make_data(tmp_path, name="extra", ids=8, seed=99)
        ds = read_dataset_csv(distract)
        write_dataset_csv(distract, LabeledDataset(
            ds.features, ds.pids + 100, ds.cams, ds.item_ids))
        rc = cli.main(["evaluate",
                       "--checkpoint", os.path.join(out, "checkpoint.json"),
                       "--queries", data, "--gallery", data,
                       "--distractors", distract, "-o", out])
        assert rc == cli.EXIT_OK
        report = json.load(open(os.path.join(out, "eval_report.json")))
        assert report["with_distractors"]["map"] <= report["map"] + 1e-12


class TestBenchLosses:
    def test_grid_csv(self, tmp_path):
        data = make_data(tmp_path, ids=8)
        out = os.path.join(str(tmp_path), "bench")
        rc = cli.main(["bench-losses", "--data", data,
                       "--losses", "batch_hard,triplet",
                       "--margins", "0.2,soft", "--widths", "5,8,4",
                       "--P", "3", "--K", "2", "--B", "4",
                       "--t0", "15", "--t1", "30", "-o", out])
        assert rc == cli.EXIT_OK
        rows = open(os.path.join(out, "bench_losses.csv")).read().splitlines()
        assert rows[0] == "loss,margin,map,rank1,status"
        assert len(rows) == 5
        for row in rows[1:]:
            assert row.endswith(",ok")

    def test_unknown_loss_exits_2(self, tmp_path):
        data = make_data(tmp_path)
        rc = cli.main(["bench-losses", "--data", data, "--losses", "bogus",
                       "-o", str(tmp_path)])
        assert rc == cli.EXIT_USAGE
