import json
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from hsc import analysis
from hsc.cli import main
from hsc.errors import NumericalError
from hsc.learner import init_state, load_checkpoint, save_checkpoint
from hsc.network import LayerSpec, NetworkSpec
from hsc.preprocess import load_dataset

ROOT = Path(__file__).resolve().parents[1]
MNIST = ROOT / "data" / "mnist_subset"


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code = main(["gen-synthetic", "-o", str(out), "--n-train", "24", "--n-test", "8", "--size", "12",
                 "--n-features", "4", "--kernel", "5", "--n-active", "2", "--seed", "3"])
    assert code == 0
    return out


def small_config(tmp_path, synth, out_name="out", **overrides):
    cfg = {
        "seed": 0,
        "output_dir": str(tmp_path / out_name),
        "data": {"source": "cache", "path": str(synth / "train.hsd"), "test_path": str(synth / "test.hsd")},
        "preprocess": {"lcn": False, "whiten": "none"},
        "network": {"layers": [
            {"n_features": 4, "kernel": 5, "stride": 1, "lambda": 0.1, "eta_learn": 0.05},
            {"n_features": 6, "kernel": 3, "stride": 1, "lambda": 0.1, "eta_learn": 0.01},
        ]},
        "training": {"epochs": 2, "batch_size": 8},
        "inference": {"max_iters": 200},
    }
    for key, value in overrides.items():
        cfg[key] = value
    path = tmp_path / f"{out_name}.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def outputs(directory, patterns=("*.csv", "*.json")):
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for pat in patterns for p in sorted(Path(directory).rglob(pat))}


def csv_rows(path):
    lines = Path(path).read_text().splitlines()
    head = lines[0].split(",")
    return [dict(zip(head, line.split(","))) for line in lines[1:]]


class TestExitCodes:
    def test_no_command_is_usage_error(self):
        assert main([]) == 2

    def test_help_is_success(self, capsys):
        assert main(["--help"]) == 0
        assert "train" in capsys.readouterr().out

    def test_unknown_flag(self):
        assert main(["train", "x.yaml", "--bogus"]) == 2

    def test_missing_dataset_creates_nothing(self, tmp_path, synth, capsys):
        path = small_config(tmp_path, synth)
        cfg = yaml.safe_load(path.read_text())
        cfg["data"]["path"] = str(tmp_path / "missing.hsd")
        path.write_text(yaml.safe_dump(cfg))
        assert main(["train", str(path)]) == 2
        assert "data.path" in capsys.readouterr().err
        assert not (tmp_path / "out").exists()

    def test_invalid_config_field_message(self, tmp_path, synth, capsys):
        path = small_config(tmp_path, synth)
        assert main(["train", str(path), "--set", "network.layers.1.lambda=-0.5"]) == 2
        assert "network.layers[1].lambda" in capsys.readouterr().err
        assert not (tmp_path / "out").exists()

    def test_missing_config_file(self, tmp_path):
        assert main(["train", str(tmp_path / "none.yaml")]) == 2

    def test_runtime_abort_is_exit_1(self, tmp_path, synth, monkeypatch, capsys):
        import hsc.learner as learner

        def explode(*args, **kwargs):
            raise NumericalError("injected", layer=1, iteration=0)

        monkeypatch.setattr(learner, "infer", explode)
        assert main(["train", str(small_config(tmp_path, synth))]) == 1
        err = capsys.readouterr().err
        assert "abort_snapshot.hsc" in err
        assert (tmp_path / "out" / "abort_snapshot.hsc").exists()


class TestTrain:
    def test_artifacts(self, tmp_path, synth):
        assert main(["train", str(small_config(tmp_path, synth))]) == 0
        out = tmp_path / "out"
        for name in ("config.yaml", "run.yaml", "init.hsc", "checkpoint.hsc", "train_log.csv",
                     "cost.csv", "report.json", "timing.log"):
            assert (out / name).exists(), name
        assert len(csv_rows(out / "cost.csv")) == 2
        assert len(csv_rows(out / "train_log.csv")) == 4
        report = json.loads((out / "report.json").read_text())
        assert report["epoch"] == 2 and report["mode"] == "spc"
        echo = yaml.safe_load((out / "config.yaml").read_text())
        assert echo["network"]["layers"][0]["lambda"] == 0.1
        assert yaml.safe_load((out / "run.yaml").read_text())["seed"] == 0

    def test_zero_learning_rate_keeps_initial_dictionaries(self, tmp_path, synth):
        path = small_config(tmp_path, synth)
        assert main(["train", str(path), "--set", "network.layers.0.eta_learn=0",
                     "--set", "network.layers.1.eta_learn=0"]) == 0
        a = load_checkpoint(tmp_path / "out" / "init.hsc")
        b = load_checkpoint(tmp_path / "out" / "checkpoint.hsc")
        for da, db in zip(a.dicts, b.dicts):
            assert torch.equal(da.weights, db.weights)

    def test_rerun_is_byte_identical(self, tmp_path, synth):
        assert main(["train", str(small_config(tmp_path, synth, "a"))]) == 0
        assert main(["train", str(small_config(tmp_path, synth, "b"))]) == 0
        a, b = outputs(tmp_path / "a"), outputs(tmp_path / "b")
        assert set(a) == {"cost.csv", "train_log.csv", "report.json"}
        assert a == b
        assert (tmp_path / "a" / "checkpoint.hsc").read_bytes() == (tmp_path / "b" / "checkpoint.hsc").read_bytes()

    def test_flags_override_config(self, tmp_path, synth):
        path = small_config(tmp_path, synth)
        assert main(["train", str(path), "--epochs", "1", "--mode", "hila", "-o", str(tmp_path / "c")]) == 0
        assert len(csv_rows(tmp_path / "c" / "cost.csv")) == 1
        assert json.loads((tmp_path / "c" / "report.json").read_text())["mode"] == "hila"

    def test_floats_have_nine_significant_digits(self, tmp_path, synth):
        assert main(["train", str(small_config(tmp_path, synth))]) == 0
        row = csv_rows(tmp_path / "out" / "cost.csv")[0]
        assert row["quadratic"] == f"{float(row['quadratic']):.9g}"


class TestInfer:
    @pytest.fixture
    def one_layer(self, tmp_path, synth):
        spec = NetworkSpec([LayerSpec(4, 1, (5, 5), 1, 0.1, 0.0)], (1, 12, 12), seed=0)
        return save_checkpoint(init_state(spec), tmp_path / "one.hsc")

    def test_single_layer_modes_identical(self, tmp_path, synth, one_layer):
        for mode in ("hila", "spc"):
            assert main(["infer", str(one_layer), str(synth / "test.hsd"), "-o", str(tmp_path / mode),
                         "--mode", mode]) == 0
        a = (tmp_path / "hila" / "per_image.csv").read_bytes()
        assert a == (tmp_path / "spc" / "per_image.csv").read_bytes()
        assert len(a.splitlines()) == 9

    def test_report_and_columns(self, tmp_path, synth):
        spec = NetworkSpec([LayerSpec(4, 1, (5, 5), 1, 0.1, 0.0), LayerSpec(3, 4, (3, 3), 1, 0.1, 0.0)],
                           (1, 12, 12), seed=0)
        ck = save_checkpoint(init_state(spec), tmp_path / "two.hsc")
        assert main(["infer", str(ck), str(synth / "test.hsd"), "-o", str(tmp_path / "o"), "-n", "5"]) == 0
        rows = csv_rows(tmp_path / "o" / "per_image.csv")
        assert len(rows) == 5
        assert list(rows[0]) == ["image", "iterations", "converged", "layer1_quadratic", "layer1_l1",
                                 "layer2_quadratic", "layer2_l1"]
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert report["n_images"] == 5

    def test_bad_magic(self, tmp_path, synth, one_layer, capsys):
        data = bytearray(one_layer.read_bytes())
        data[:4] = b"XXXX"
        bad = tmp_path / "bad.hsc"
        bad.write_bytes(bytes(data))
        assert main(["infer", str(bad), str(synth / "test.hsd"), "-o", str(tmp_path / "o")]) == 2
        assert "bad magic" in capsys.readouterr().err

    def test_shape_mismatch_names_layer(self, tmp_path, synth, capsys):
        spec = NetworkSpec([LayerSpec(4, 1, (5, 5), 1, 0.1, 0.0)], (1, 16, 16), seed=0)
        ck = save_checkpoint(init_state(spec), tmp_path / "wide.hsc")
        assert main(["infer", str(ck), str(synth / "test.hsd"), "-o", str(tmp_path / "o")]) == 2
        assert "layer 1" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path, one_layer):
        assert main(["infer", str(one_layer), str(tmp_path / "none.hsd"), "-o", str(tmp_path / "o")]) == 2


class TestSweep:
    def sweep_cfg(self, tmp_path, synth, name="sw"):
        return small_config(tmp_path, synth, name, sweep={"lambda1": [0.1], "lambda2": [0.15], "seeds": [0]},
                            training={"epochs": 1, "batch_size": 8})

    def test_single_cell_matches_train_and_infer(self, tmp_path, synth):
        assert main(["sweep", str(self.sweep_cfg(tmp_path, synth))]) == 0
        grid = json.loads((tmp_path / "sw" / "grid.json").read_text())
        costs = {r["mode"]: r for r in csv_rows(tmp_path / "sw" / "costs.csv")}
        path = small_config(tmp_path, synth, "tr", training={"epochs": 1, "batch_size": 8})
        for mode in ("hila", "spc"):
            assert main(["train", str(path), "--mode", mode, "-o", str(tmp_path / mode),
                         "--set", "network.layers.1.lambda=0.15"]) == 0
            assert main(["infer", str(tmp_path / mode / "checkpoint.hsc"), str(synth / "test.hsd"),
                         "-o", str(tmp_path / f"{mode}-inf"), "--mode", mode, "--max-iters", "200"]) == 0
            trained = json.loads((tmp_path / mode / "report.json").read_text())
            inferred = json.loads((tmp_path / f"{mode}-inf" / "report.json").read_text())
            swept = [r for r in csv_rows(tmp_path / "sw" / "costs.csv") if r["mode"] == mode]
            total = sum(float(r["quadratic"]) + float(r["l1"]) for r in swept)
            assert total == pytest.approx(trained["total"], rel=1e-7)
            assert inferred["total"] == pytest.approx(trained["total"], rel=1e-7)
        assert grid["lambda1"] == [0.1] and costs

    def test_outputs_and_resume(self, tmp_path, synth):
        path = self.sweep_cfg(tmp_path, synth)
        assert main(["sweep", str(path)]) == 0
        out = tmp_path / "sw"
        for name in ("grid.csv", "costs.csv", "grid.json", "learning_curves.csv", "iteration_curves.json"):
            assert (out / name).exists(), name
        runs = sorted((out / "runs").glob("*.json"))
        assert len(runs) == 2
        first = outputs(out)
        stamps = {p.name: p.stat().st_mtime_ns for p in runs}
        assert main(["sweep", str(path), "--resume"]) == 0
        assert {p.name: p.stat().st_mtime_ns for p in (out / "runs").glob("*.json")} == stamps
        assert outputs(out) == first

    def test_all_cells_failing_is_exit_1(self, tmp_path, synth, monkeypatch):
        def broken(spec, *args, **kwargs):
            return analysis.RunRecord(spec.mode.value, spec.seed, spec.lambdas, None, error="injected")

        monkeypatch.setattr(analysis, "run_job", broken)
        assert main(["sweep", str(self.sweep_cfg(tmp_path, synth))]) == 1
        assert json.loads((tmp_path / "sw" / "grid.json").read_text())["invalid_cells"]

    def test_missing_axes(self, tmp_path, synth):
        assert main(["sweep", str(small_config(tmp_path, synth))]) == 2


class TestExportRF:
    def test_tile_sizes_and_exclusion(self, tmp_path, synth, capsys):
        spec = NetworkSpec([LayerSpec(4, 1, (5, 5), 1, 0.1, 0.0), LayerSpec(3, 4, (3, 3), 1, 0.1, 0.0)],
                           (1, 12, 12), seed=0)
        ck = save_checkpoint(init_state(spec), tmp_path / "two.hsc")
        assert main(["export-rf", str(ck), str(synth / "test.hsd"), "-o", str(tmp_path / "a")]) == 0
        info = json.loads((tmp_path / "a" / "mosaics.json").read_text())
        assert info["layers"][0]["tile_hw"] == [5, 5] and info["layers"][0]["n_tiles"] == 4
        assert info["sorted_by_activation"] is True
        assert (tmp_path / "a" / "activation.json").exists()
        assert (tmp_path / "a" / "layer1.png").exists()
        assert main(["export-rf", str(ck), "-o", str(tmp_path / "b"), "--exclude-top", "--no-png"]) == 0
        info_b = json.loads((tmp_path / "b" / "mosaics.json").read_text())
        assert [l["n_tiles"] for l in info_b["layers"]] == [3, 2]
        assert not list((tmp_path / "b").glob("*.png"))

    def test_mnist_layer2_tiles(self, tmp_path):
        spec = NetworkSpec([LayerSpec(32, 1, (5, 5), 2, 0.2, 0.05), LayerSpec(64, 32, (5, 5), 1, 0.3, 1e-3)],
                           (1, 28, 28), seed=0)
        ck = save_checkpoint(init_state(spec), tmp_path / "mnist.hsc")
        assert main(["export-rf", str(ck), "-o", str(tmp_path / "rf"), "--no-png"]) == 0
        info = json.loads((tmp_path / "rf" / "mosaics.json").read_text())
        assert info["layers"][1]["tile_hw"] == [14, 14]
        assert info["layers"][1]["n_tiles"] == 64


class TestDataCommands:
    def test_gen_synthetic(self, synth):
        train = load_dataset(synth / "train.hsd")
        test = load_dataset(synth / "test.hsd")
        assert len(train) == 24 and len(test) == 8
        assert train.image_shape == (1, 12, 12)
        codes = np.load(synth / "train_codes.npy")
        assert codes.shape[0] == 24
        assert ((codes > 0).reshape(24, -1).sum(axis=1) == 2).all()
        truth = load_checkpoint(synth / "true_dictionary.hsc")
        norms = truth.dicts[0].weights.reshape(4, -1).norm(dim=1)
        assert torch.allclose(norms, torch.ones(4), atol=1e-6)

    def test_gen_synthetic_reproducible(self, tmp_path):
        args = ["--n-train", "5", "--n-test", "2", "--size", "10", "--seed", "1"]
        assert main(["gen-synthetic", "-o", str(tmp_path / "a"), *args]) == 0
        assert main(["gen-synthetic", "-o", str(tmp_path / "b"), *args]) == 0
        for name in ("train.hsd", "test.hsd", "train_codes.npy"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_preprocess_cache_then_train(self, tmp_path, synth):
        cfg = {"output_dir": str(tmp_path / "pp"),
               "data": {"source": "cache", "path": str(synth / "train.hsd"),
                        "test_path": str(synth / "test.hsd")}}
        path = tmp_path / "pp.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert main(["preprocess", str(path)]) == 0
        train = load_dataset(tmp_path / "pp" / "train.hsd")
        test = load_dataset(tmp_path / "pp" / "test.hsd")
        assert [s.split("(")[0] for s in train.steps][-2:] == ["lcn", "whiten"]
        assert train.steps == test.steps
        assert train.images.std().item() == pytest.approx(1.0, rel=1e-3)

    def test_preprocess_mnist_idx(self, tmp_path):
        cfg = {"output_dir": str(tmp_path / "pp"),
               "data": {"source": "idx", "path": str(MNIST), "n_train": 50, "n_test": 10}}
        path = tmp_path / "pp.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert main(["preprocess", str(path)]) == 0
        assert len(load_dataset(tmp_path / "pp" / "train.hsd")) == 50


def test_mnist_smoke_config(tmp_path):
    """The shipped smoke config: 2 epochs on 500 training images."""
    code = main(["train", str(ROOT / "configs" / "mnist_smoke.yaml"), "-o", str(tmp_path / "smoke"),
                 "--set", f"data.path={MNIST}"])
    assert code == 0
    rows = csv_rows(tmp_path / "smoke" / "cost.csv")
    assert len(rows) == 2
    assert all(0 < int(float(r["iterations"])) < 500 for r in rows)
    assert yaml.safe_load((tmp_path / "smoke" / "run.yaml").read_text())["n_train"] == 500
