import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from hsc.analysis import (
    COST_COLUMNS,
    CostReport,
    RunRecord,
    SweepGrid,
    activation_from_codes,
    activation_probability,
    cost_report,
    export_mosaic,
    fmt,
    histogram_from_activity,
    iteration_curve,
    layer_mosaics,
    median_mad,
    mosaic_array,
    sweep,
    tile_normalize,
    worker_count,
    write_csv,
)
from hsc.conv import ConvDictionary
from hsc.errors import ParameterError
from hsc.network import LayerSpec, Mode, NetworkSpec
from hsc.solver import InferenceConfig, infer, lasso_cost
from util import make_state, unit_dict


class TestMedianMad:
    @pytest.mark.parametrize("samples, expected", [
        ([1, 2, 100], (2, 1)),
        ([5], (5, 0)),
        ([1, 2, 3, 4], (2.5, 1.0)),
    ])
    def test_hand_values(self, samples, expected):
        assert median_mad(samples) == expected

    def test_empty(self):
        with pytest.raises(ParameterError):
            median_mad([])

    @given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=15), st.integers(-1000, 1000))
    def test_shift(self, xs, c):
        m, d = median_mad(xs)
        m2, d2 = median_mad([x + c for x in xs])
        assert m2 == m + c and d2 == d


class TestCostReport:
    def test_zero_dictionary_zero_codes(self):
        d = ConvDictionary(torch.zeros(2, 1, 3, 3, dtype=torch.float64))
        state = make_state([unit_dict(np.random.default_rng(0), 2, 1, 3)], [0.1], (1, 6, 6))
        state.dicts[0] = d
        state.eta_c[0] = 1.0
        x = torch.from_numpy(np.random.default_rng(1).standard_normal((5, 1, 6, 6)))
        rep = cost_report(state, x, Mode.HILA)
        expected = 0.5 * float((x ** 2).sum(dim=(1, 2, 3)).mean())
        assert rep.layers[0][0] == pytest.approx(expected, rel=1e-12)
        assert rep.layers[0][1] == 0.0

    def test_additivity_and_mean_over_images(self):
        rng = np.random.default_rng(2)
        dicts = [unit_dict(rng, 4, 1, 3), unit_dict(rng, 4, 4, 3)]
        state = make_state(dicts, [0.1, 0.2], (1, 9, 9))
        x = torch.from_numpy(rng.standard_normal((6, 1, 9, 9)))
        rep = cost_report(state, x, Mode.SPC, batch_size=4)
        assert rep.total == pytest.approx(sum(q + l for q, l in rep.layers), rel=1e-9)
        res = infer(state, x, InferenceConfig(mode=Mode.SPC))
        q1, l1 = lasso_cost(dicts[0], x, res.gammas[0], 0.1)
        assert rep.layers[0][0] == pytest.approx(q1 / 6, rel=1e-9)
        assert rep.layers[0][1] == pytest.approx(l1 / 6, rel=1e-9)
        assert rep.n_images == 6 and rep.mode == "spc"

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        state = make_state([unit_dict(rng, 3, 1, 3), unit_dict(rng, 3, 3, 3)], [0.1, 0.1], (1, 8, 8))
        x = torch.from_numpy(rng.standard_normal((4, 1, 8, 8)))
        assert cost_report(state, x).to_dict() == cost_report(state, x).to_dict()

    def test_empty_dataset(self):
        state = make_state([unit_dict(np.random.default_rng(0), 2, 1, 3)], [0.1], (1, 6, 6))
        with pytest.raises(ParameterError):
            cost_report(state, torch.zeros(0, 1, 6, 6, dtype=torch.float64))

    def test_dict_round_trip(self):
        rep = CostReport([(1.0, 2.0), (3.0, 0.5)], [0.1, 0.2], "hila", 3, 4, 10, 55.5, 1)
        assert CostReport.from_dict(json.loads(json.dumps(rep.to_dict()))) == rep


class TestActivation:
    def test_all_zero_codes(self):
        h = activation_from_codes([torch.zeros(5, 3, 2, 2)])[0]
        assert np.all(h.probabilities == 0)

    def test_atom_firing_everywhere(self):
        g = torch.zeros(4, 3, 2, 2)
        g[:, 1, 0, 1] = 0.5
        h = activation_from_codes([g])[0]
        assert h.probabilities[0] == 1.0 and h.order[0] == 1

    @pytest.mark.parametrize("seed", range(5))
    def test_counting_oracle(self, seed):
        rng = np.random.default_rng(seed)
        g = torch.from_numpy(np.maximum(rng.standard_normal((7, 5, 3, 3)) - 1.5, 0))
        h = activation_from_codes([g])[0]
        counts = []
        for f in range(5):
            n = 0
            for img in range(7):
                if any(v > 0 for v in g[img, f].flatten().tolist()):
                    n += 1
            counts.append(n / 7)
        np.testing.assert_allclose(h.probabilities, sorted(counts, reverse=True))
        np.testing.assert_allclose(np.asarray(counts)[h.order], h.probabilities)
        assert np.all(np.diff(h.probabilities) <= 0)

    def test_order_invariant_to_dataset_permutation(self):
        rng = np.random.default_rng(9)
        act = rng.random((20, 6)) > 0.6
        a = histogram_from_activity(act, 1)
        b = histogram_from_activity(act[rng.permutation(20)], 1)
        assert np.array_equal(a.probabilities, b.probabilities) and np.array_equal(a.order, b.order)

    def test_from_network(self):
        rng = np.random.default_rng(4)
        dicts = [unit_dict(rng, 4, 1, 3), unit_dict(rng, 5, 4, 3)]
        state = make_state(dicts, [0.1, 0.1], (1, 9, 9))
        x = torch.from_numpy(rng.standard_normal((6, 1, 9, 9)))
        hs = activation_probability(state, x, InferenceConfig(mode=Mode.HILA))
        res = infer(state, x, InferenceConfig(mode=Mode.HILA))
        ref = activation_from_codes(res.gammas)
        for a, b in zip(hs, ref):
            np.testing.assert_array_equal(a.probabilities, b.probabilities)
        assert [len(h.probabilities) for h in hs] == [4, 5]
        assert all(0 <= p <= 1 for h in hs for p in h.probabilities)


class TestIterationCurve:
    def test_grouping_and_median(self):
        reps = [CostReport([(1.0, 1.0)], [lam, 0.3], mode, seed, 1, 10, it, 0)
                for lam, mode, seed, it in [(0.1, "hila", 0, 50), (0.1, "hila", 1, 70), (0.1, "hila", 2, 60),
                                            (0.1, "spc", 0, 40), (0.2, "spc", 0, 30)]]
        curve = iteration_curve(reps)
        assert [(p.x, p.median, p.mad, p.n_seeds) for p in curve["hila"]] == [(0.1, 60, 10, 3)]
        assert [p.x for p in curve["spc"]] == [0.1, 0.2]

    def test_infinite_threshold_gives_one_iteration(self):
        rng = np.random.default_rng(0)
        state = make_state([unit_dict(rng, 3, 1, 3), unit_dict(rng, 3, 3, 3)], [0.1, 0.1], (1, 8, 8))
        x = torch.from_numpy(rng.standard_normal((3, 1, 8, 8)))
        for mode in Mode:
            assert cost_report(state, x, mode, t_stab=float("inf")).mean_iterations == 1.0


class TestMosaic:
    def test_single_atom(self):
        atom = np.arange(12, dtype=float).reshape(1, 1, 3, 4)
        arr = mosaic_array(atom)
        np.testing.assert_array_equal(arr, tile_normalize(atom[0])[0])
        assert arr.min() == 0 and arr.max() == 255

    def test_tile_count_order_and_exclusion(self):
        atoms = np.zeros((5, 1, 2, 2))
        for f in range(5):
            atoms[f, 0, f % 2, (f // 2) % 2] = 1.0
        arr = mosaic_array(atoms, order=[4, 3, 2, 1, 0], cols=1, gap=1)
        assert arr.shape == (5 * 2 + 4, 2)
        np.testing.assert_array_equal(arr[0:2], tile_normalize(atoms[4])[0])
        np.testing.assert_array_equal(arr[3:5], tile_normalize(atoms[3])[0])
        excl = mosaic_array(atoms, order=[4, 3, 2, 1, 0], exclude_top=True, cols=1, gap=1)
        assert excl.shape == (4 * 2 + 3, 2)
        np.testing.assert_array_equal(excl[0:2], tile_normalize(atoms[3])[0])

    def test_flat_atom(self):
        assert np.all(tile_normalize(np.ones((1, 3, 3))) == 0)

    def test_color_and_files(self, tmp_path):
        rng = np.random.default_rng(0)
        files = export_mosaic(rng.standard_normal((4, 3, 5, 5)), tmp_path / "m")
        assert files["netpbm"].suffix == ".ppm" and files["png"].exists()
        assert np.asarray(Image.open(files["netpbm"])).shape == (11, 11, 3)

    def test_layer_tile_sizes(self, tmp_path):
        rng = np.random.default_rng(1)
        dicts = [unit_dict(rng, 4, 1, 5, stride=2), unit_dict(rng, 6, 4, 5)]
        state = make_state(dicts, [0.1, 0.1], (1, 28, 28))
        info = layer_mosaics(state, tmp_path, exclude_top=True, png=False)
        assert info[0]["tile_hw"] == [5, 5] and info[1]["tile_hw"] == [14, 14]
        assert [i["n_tiles"] for i in info] == [3, 5]
        img = np.asarray(Image.open(tmp_path / "layer1.pgm"))
        assert img.shape == (5 * 2 + 1, 5 * 2 + 1)

    def test_bad_shape(self):
        with pytest.raises(ParameterError):
            mosaic_array(np.zeros((2, 2, 3, 3)))


class TestFormats:
    def test_nine_significant_digits(self):
        assert fmt(1 / 3) == "0.333333333"
        assert fmt(12345.678901234) == "12345.6789"
        assert fmt(3) == "3" and fmt("spc") == "spc"

    def test_csv_header(self, tmp_path):
        p = write_csv(tmp_path / "c.csv", COST_COLUMNS, [{"mode": "spc", "quadratic": 0.1}])
        lines = p.read_text().splitlines()
        assert lines[0] == "mode,seed,lambda1,lambda2,layer,quadratic,l1,iterations,epoch"
        assert lines[1] == "spc,,,,,0.1,,,"

    def test_worker_env(self, monkeypatch):
        monkeypatch.setenv("HSC_WORKERS", "3")
        assert worker_count(1) == 3
        monkeypatch.setenv("HSC_WORKERS", "x")
        with pytest.raises(ParameterError):
            worker_count()
        monkeypatch.delenv("HSC_WORKERS")
        assert worker_count(None) == 1


def tiny_template(epochs=1):
    layers = [LayerSpec(3, 1, (3, 3), 1, 0.1, 0.01), LayerSpec(3, 3, (3, 3), 1, 0.1, 0.001)]
    return NetworkSpec(layers, (1, 8, 8), t_stab=1e-3, epochs=epochs, batch_size=4, max_iters=200)


def tiny_data(seed=0, n=8):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal((n, 1, 8, 8))).float()


class TestSweep:
    def test_single_cell_matches_direct_runs(self):
        from hsc.learner import train

        tpl = tiny_template()
        grid = sweep(tpl, [0.1], [0.2], [0], tiny_data(0), tiny_data(1, 4))
        for mode in Mode:
            rec = grid.cell_runs(0.1, 0.2, mode)[0]
            spec = tiny_template()
            spec.layers[1].lam = 0.2
            spec.mode = mode
            _, tlog = train(spec, tiny_data(0), tiny_data(1, 4))
            assert rec.report.total == tlog.records[-1].total
        h, s = grid.median_total("hila")[0, 0], grid.median_total("spc")[0, 0]
        assert grid.relative_difference()[0, 0] == pytest.approx((h - s) / h)

    def test_exports_are_reproducible(self, tmp_path):
        tpl = tiny_template()
        a = sweep(tpl, [0.1, 0.2], [0.1], [0, 1], tiny_data(), tiny_data(1, 4)).export(tmp_path / "a")
        b = sweep(tpl, [0.1, 0.2], [0.1], [0, 1], tiny_data(), tiny_data(1, 4)).export(tmp_path / "b")
        for k in a:
            assert a[k].read_bytes() == b[k].read_bytes()
        header = a["costs_csv"].read_text().splitlines()[0]
        assert header == ",".join(COST_COLUMNS)
        assert len(a["costs_csv"].read_text().splitlines()) == 1 + 2 * 2 * 2 * 2

    def test_resume_skips_finished_jobs(self, tmp_path, monkeypatch):
        import hsc.analysis as analysis

        tpl = tiny_template()
        first = sweep(tpl, [0.1], [0.1, 0.2], [0], tiny_data(), tiny_data(1, 4), out_dir=tmp_path)
        files = sorted((tmp_path / "runs").glob("*.json"))
        assert len(files) == 4
        files[0].unlink()
        calls = []
        real = analysis.run_job
        monkeypatch.setattr(analysis, "run_job", lambda *a, **k: calls.append(1) or real(*a, **k))
        again = sweep(tpl, [0.1], [0.1, 0.2], [0], tiny_data(), tiny_data(1, 4), out_dir=tmp_path, resume=True)
        assert len(calls) == 1
        np.testing.assert_array_equal(first.relative_difference(), again.relative_difference())

    def test_failed_cell_is_recorded_and_sweep_continues(self, monkeypatch):
        import hsc.analysis as analysis

        real = analysis.train

        def flaky(spec, *a, **k):
            if spec.layers[0].lam == 0.2:
                raise ValueError("boom")
            return real(spec, *a, **k)

        monkeypatch.setattr(analysis, "train", flaky)
        grid = sweep(tiny_template(), [0.1, 0.2], [0.1], [0], tiny_data(), tiny_data(1, 4))
        assert grid.cell_valid(0.1, 0.1) and not grid.cell_valid(0.2, 0.1)
        assert np.isnan(grid.relative_difference()[1, 0]) and np.isfinite(grid.relative_difference()[0, 0])
        d = grid.to_dict()
        assert d["invalid_cells"] == [[0.2, 0.1]] and "boom" in d["errors"][0]["error"]

    def test_parallel_matches_serial(self):
        tpl = tiny_template()
        s = sweep(tpl, [0.1], [0.1, 0.2], [0], tiny_data(), tiny_data(1, 4), workers=1)
        p = sweep(tpl, [0.1], [0.1, 0.2], [0], tiny_data(), tiny_data(1, 4), workers=2)
        np.testing.assert_array_equal(s.median_total("spc"), p.median_total("spc"))

    def test_bad_ranges(self):
        with pytest.raises(ParameterError):
            sweep(tiny_template(), [], [0.1], [0], tiny_data(), tiny_data())

    def test_run_record_round_trip(self):
        rec = RunRecord("spc", 1, [0.1, 0.2], CostReport([(1.0, 0.5)], [0.1, 0.2], "spc", 1, 2, 4, 30.0, 0),
                        [3.0, 2.0], [40.0, 30.0])
        assert RunRecord.from_dict(json.loads(json.dumps(rec.to_dict()))) == rec
