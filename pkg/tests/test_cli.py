import json
import os

import nibabel as nib
import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from cli import cli
from data.sample_data import write_synthetic_dataset
from data.volumes import save_volume

TINY = [
    "--set", "model.channels=4,4,4,4,4",
    "--set", "train.epochs=2",
    "--set", "train.batch_size=2",
    "--set", "augment.enabled=false",
]


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    return write_synthetic_dataset(str(root), n_volumes=6, n_slices=2, size=32, seed=5)


@pytest.fixture(scope="module")
def trained_run(manifest, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    result = CliRunner().invoke(cli, ["train", *TINY, "--set", f"data.manifest={manifest}", "--out", out])
    assert result.exit_code == 0, result.output
    return out


def read_manifest_json(directory):
    with open(os.path.join(directory, "manifest.json")) as f:
        return json.load(f)


class TestTrainCommand:
    def test_run_directory(self, trained_run):
        for name in ("config.json", "train_log.csv", "best.ckpt", "last.ckpt", "split.txt", "metrics.csv"):
            assert os.path.exists(os.path.join(trained_run, name))
        record = read_manifest_json(trained_run)
        assert record["command"] == "train"
        assert record["status"] == "success"

    def test_override_in_snapshot(self, tmp_path):
        out = str(tmp_path / "run")
        result = CliRunner().invoke(
            cli,
            ["train", "--set", "loss.lambda_decor=0.02", "--set", f"data.manifest={tmp_path / 'absent.csv'}", "--out", out],
        )
        assert result.exit_code == 3
        with open(os.path.join(out, "config.json")) as f:
            assert json.load(f)["loss"]["lambda_decor"] == 0.02
        assert read_manifest_json(out)["status"].startswith("failed")

    def test_missing_manifest_setting(self, tmp_path):
        result = CliRunner().invoke(cli, ["train", "--out", str(tmp_path / "run")])
        assert result.exit_code == 3

    def test_invalid_config(self, tmp_path):
        result = CliRunner().invoke(cli, ["train", "--set", "train.lr_factor=0.5", "--out", str(tmp_path)])
        assert result.exit_code == 2

    def test_reweighted_channels_accepted(self, tmp_path):
        out = str(tmp_path / "run")
        result = CliRunner().invoke(cli, ["train", "--set", "model.channels=248,248,112,112,112", "--out", out])
        assert result.exit_code == 3
        with open(os.path.join(out, "config.json")) as f:
            assert json.load(f)["model"]["channels"] == [248, 248, 112, 112, 112]


class TestEvalCommand:
    def test_report_rows_match_split(self, trained_run, tmp_path):
        out = str(tmp_path / "eval")
        checkpoint = os.path.join(trained_run, "best.ckpt")
        result = CliRunner().invoke(cli, ["eval", "--checkpoint", checkpoint, "--split", "val", "--out", out])
        assert result.exit_code == 0, result.output
        table = pd.read_csv(os.path.join(out, "metrics_val.csv"))
        volumes = table[~table["volume_id"].str.startswith("__")]
        with open(os.path.join(trained_run, "split.txt")) as f:
            lines = [line.strip() for line in f]
        val_ids = lines[lines.index("[val]") + 1:lines.index("[test]")]
        assert sorted(volumes["volume_id"]) == sorted(val_ids)
        assert os.path.exists(os.path.join(out, "metrics_val.json"))

    def test_bit_stable(self, trained_run, tmp_path):
        checkpoint = os.path.join(trained_run, "best.ckpt")
        outputs = []
        for name in ("a", "b"):
            out = str(tmp_path / name)
            assert CliRunner().invoke(cli, ["eval", "--checkpoint", checkpoint, "--out", out]).exit_code == 0
            with open(os.path.join(out, "metrics_test.json")) as f:
                outputs.append(f.read())
        assert outputs[0] == outputs[1]

    def test_bad_checkpoint(self, tmp_path):
        bogus = tmp_path / "bogus.ckpt"
        bogus.write_text("nope")
        result = CliRunner().invoke(cli, ["eval", "--checkpoint", str(bogus), "--out", str(tmp_path / "eval")])
        assert result.exit_code == 2


class TestPredictCommand:
    def test_mask_volume(self, trained_run, manifest, tmp_path):
        checkpoint = os.path.join(trained_run, "best.ckpt")
        image = os.path.join(os.path.dirname(manifest), "vol_000.nii.gz")
        counts = []
        for threshold in ("0.5", "0.7", "0.5"):
            out = str(tmp_path / f"mask_{len(counts)}.nii.gz")
            result = CliRunner().invoke(
                cli, ["predict", "--checkpoint", checkpoint, "--volume", image, "--out", out, "--threshold", threshold]
            )
            assert result.exit_code == 0, result.output
            mask = np.asarray(nib.load(out).dataobj)
            assert mask.shape == nib.load(image).shape
            assert set(np.unique(mask)) <= {0, 1}
            counts.append(int(mask.sum()))
        assert counts[1] <= counts[0]
        assert counts[2] == counts[0]

    def test_mask_inside_run_keeps_run_manifest(self, trained_run, manifest):
        checkpoint = os.path.join(trained_run, "best.ckpt")
        image = os.path.join(os.path.dirname(manifest), "vol_001.nii.gz")
        out = os.path.join(trained_run, "mask.nii.gz")
        result = CliRunner().invoke(cli, ["predict", "--checkpoint", checkpoint, "--volume", image, "--out", out])
        assert result.exit_code == 0, result.output
        assert read_manifest_json(trained_run)["command"] == "train"
        with open(os.path.join(trained_run, "mask.nii.gz.manifest.json")) as f:
            record = json.load(f)
        assert record["command"] == "predict"
        assert record["status"] == "success"
        assert "filename" not in record

    def test_unpadded_volume_is_a_data_error(self, trained_run, tmp_path):
        image = str(tmp_path / "odd.nii.gz")
        save_volume(np.zeros((2, 36, 36), dtype=np.float32), image)
        checkpoint = os.path.join(trained_run, "best.ckpt")
        out = str(tmp_path / "odd_mask.nii.gz")
        result = CliRunner().invoke(cli, ["predict", "--checkpoint", checkpoint, "--volume", image, "--out", out])
        assert result.exit_code == 3
        assert "multiples of 16" in result.output


class TestProbeCommand:
    def test_probability_matrix(self, trained_run, tmp_path):
        out = str(tmp_path / "probe")
        checkpoint = os.path.join(trained_run, "best.ckpt")
        result = CliRunner().invoke(cli, ["probe", "--checkpoint", checkpoint, "--split", "train", "--out", out])
        assert result.exit_code == 0, result.output
        matrix = pd.read_csv(os.path.join(out, "probe_layer2.csv"), index_col=0).to_numpy()
        assert matrix.shape == (4, 4)
        np.testing.assert_allclose(matrix.sum(axis=1), 1.0, atol=1e-6)
        with open(os.path.join(out, "probe_layer2.json")) as f:
            summary = json.load(f)
        assert summary["mean_diagonal_mass"] == pytest.approx(np.trace(matrix) / 4)

    def test_layer_out_of_range(self, trained_run, tmp_path):
        checkpoint = os.path.join(trained_run, "best.ckpt")
        result = CliRunner().invoke(cli, ["probe", "--checkpoint", checkpoint, "--layer", "9", "--out", str(tmp_path)])
        assert result.exit_code == 2


class TestSweepCommand:
    def test_two_by_two_grid(self, manifest, tmp_path):
        out = str(tmp_path / "sweep")
        result = CliRunner().invoke(
            cli,
            [
                "sweep", *TINY,
                "--set", f"data.manifest={manifest}",
                "--set", "train.deterministic=true",
                "--channels", "4,4,4,4,4",
                "--channels", "4,4,4,4,4",
                "--out", out,
            ],
        )
        assert result.exit_code == 0, result.output
        table = pd.read_csv(os.path.join(out, "sweep.csv"))
        assert len(table) == 4
        assert list(table["decor"]) == [False, True, False, True]
        metrics = ["dice", "iou", "precision", "recall"]
        pd.testing.assert_frame_equal(
            table.iloc[:2][metrics].reset_index(drop=True), table.iloc[2:][metrics].reset_index(drop=True)
        )

    def test_needs_two_configs(self, manifest, tmp_path):
        result = CliRunner().invoke(
            cli, ["sweep", "--set", f"data.manifest={manifest}", "--channels", "4,4,4,4,4", "--out", str(tmp_path)]
        )
        assert result.exit_code == 2

    def test_invalid_entry_aborts_before_training(self, manifest, tmp_path):
        out = tmp_path / "sweep"
        result = CliRunner().invoke(
            cli,
            ["sweep", "--set", f"data.manifest={manifest}", "--channels", "4,4,4,4,4", "--channels", "4,4,4", "--out", str(out)],
        )
        assert result.exit_code == 2
        assert not out.exists()
