"""Workload generation, pipeline driver, metrics, sweeps, and config."""

import json
import math

import numpy as np
import pytest

from qslab.calib import BlockQuant
from qslab.errors import ConfigError, MetricUndefinedError, ParameterError
from qslab.harness import (MODES, NoiseMode, WorkloadSpec, block_from_config,
                           build_trace, calibration_batch, default_config,
                           generate_workload, load_config, mask_from_config,
                           matrix_psnr, run_from_config, run_pipeline,
                           spectrum_from_config, sweep, workload_from_config,
                           write_sweep_csv)
from qslab.residuals import make_refresh_plan


def small_config(**overrides):
    cfg = default_config()
    cfg["workload"].update({"L": 16, "d": 8, "T": 12})
    cfg["ssar"]["interval"] = 4
    cfg["ssar"]["rank"] = 4
    cfg["msad"].update({"stride": 2, "k": 4})
    cfg["calib"].update({"epochs": 2, "samples": 3})
    for key, value in overrides.items():
        section, name = key.split(".")
        cfg[section][name] = value
    return cfg


class TestGenerateWorkload:
    def test_iid_when_rho_zero(self):
        spec = WorkloadSpec(L=64, d=16, T=20, rho=0.0, seed=0)
        xs = generate_workload(spec)
        corr = [np.corrcoef(xs[t].ravel(), xs[t + 1].ravel())[0, 1]
                for t in range(len(xs) - 1)]
        assert abs(np.mean(corr)) <= 0.1

    def test_high_rho_steps_are_small(self):
        spec = WorkloadSpec(L=32, d=8, T=10, rho=0.99, seed=1)
        xs = generate_workload(spec)
        ratios = [np.linalg.norm(xs[t + 1] - xs[t]) / np.linalg.norm(xs[t])
                  for t in range(len(xs) - 1)]
        # variance identity: per-step change ~ sqrt(2 (1 - rho))
        assert np.mean(ratios) <= 3 * math.sqrt(2 * (1 - 0.99))

    def test_seed_determinism(self):
        spec = WorkloadSpec(L=8, d=4, T=5, rho=0.5, seed=7)
        xs1, xs2 = generate_workload(spec), generate_workload(spec)
        for a, b in zip(xs1, xs2):
            assert np.array_equal(a, b)

    @pytest.mark.parametrize("kwargs", [
        {"L": 3}, {"d": 1}, {"T": 2}, {"rho": 1.0}, {"rho": -0.1},
    ])
    def test_invalid_spec(self, kwargs):
        base = {"L": 8, "d": 4, "T": 5, "rho": 0.5, "seed": 0}
        base.update(kwargs)
        with pytest.raises(ParameterError):
            WorkloadSpec(**base)


class TestMatrixPsnr:
    def test_exact_estimate_is_infinite(self):
        m = np.array([[0.0, 1.0]])
        assert matrix_psnr(m, m.copy()) == math.inf

    def test_known_value(self):
        ref = np.array([[0.0, 1.0]])
        est = ref + 0.1  # MSE = 0.01, range = 1
        assert matrix_psnr(ref, est) == pytest.approx(20.0)

    def test_monotone_in_mse(self):
        rng = np.random.default_rng(0)
        ref = rng.standard_normal((8, 8))
        small = matrix_psnr(ref, ref + 0.01)
        large = matrix_psnr(ref, ref + 0.1)
        assert small > large

    def test_constant_reference_undefined(self):
        with pytest.raises(MetricUndefinedError):
            matrix_psnr(np.ones((2, 2)), np.zeros((2, 2)))


class TestBuildTrace:
    def test_noise_mode_none_has_no_quant_error(self):
        cfg = small_config()
        cfg["workload"]["noise_mode"] = "none"
        spec = workload_from_config(cfg)
        block = block_from_config(cfg)
        mask = mask_from_config(cfg, block, spec)
        trace = build_trace(block, spec, mask, BlockQuant(4, 8))
        for a_s, a_sq in zip(trace.a_sparse_fp, trace.a_sq):
            assert np.array_equal(a_s, a_sq)

    def test_quant_mode_differs_from_fp(self):
        cfg = small_config()
        cfg["workload"]["noise_mode"] = "quant_only"
        spec = workload_from_config(cfg)
        block = block_from_config(cfg)
        mask = mask_from_config(cfg, block, spec)
        trace = build_trace(block, spec, mask, BlockQuant(4, 8))
        assert not np.array_equal(trace.a_sparse_fp[0], trace.a_sq[0])
        assert trace.meta["wbits"] == 4

    def test_series_accessors(self):
        cfg = small_config()
        spec = workload_from_config(cfg)
        block = block_from_config(cfg)
        mask = mask_from_config(cfg, block, spec)
        trace = build_trace(block, spec, mask, BlockQuant(4, 8))
        assert len(trace.full_series("map")) == spec.T
        assert trace.full_series("output")[0].shape == (spec.L, spec.d)
        assert trace.full_series("map")[0].shape == (spec.L, spec.L)


class TestRunPipeline:
    def test_no_compression_near_zero_errors(self):
        cfg = small_config()
        cfg["workload"]["noise_mode"] = "quant_only"
        cfg["quant"].update({"wbits": 16, "abits": 16})
        cfg["mask"]["density"] = 1.0
        report = run_from_config(cfg)
        for mode in MODES:
            assert report.mean_error(mode) <= 1e-3

    def test_series_lengths_match_corrected_steps(self):
        report = run_from_config(small_config())
        plan = make_refresh_plan(12, 4)
        assert report.corrected_steps == plan.corrected_steps()
        for mode in MODES:
            assert len(report.errors[mode]) == len(report.corrected_steps)
            assert len(report.psnr[mode]) == len(report.corrected_steps)

    def test_identity_gap_is_roundoff(self):
        report = run_from_config(small_config())
        for mode in MODES:
            assert report.identity_gap[mode] <= 1e-12

    def test_cost_fraction_identity(self):
        report = run_from_config(small_config())
        plan = make_refresh_plan(12, 4)
        t = plan.total_steps
        refreshes = len(plan.refresh_steps)
        pairs = len(plan.pair_steps)
        density = report.diagnostics["mask_density"]
        for mode, full_steps in (("none", refreshes), ("first", refreshes),
                                 ("second", refreshes + pairs), ("ssar", refreshes + pairs)):
            expect = (full_steps + (t - full_steps) * density) / t
            assert report.cost_fraction[mode] == pytest.approx(expect)

    def test_ladder_smoke(self):
        wins = 0
        for seed in range(3):
            cfg = default_config()
            cfg["workload"]["seed"] = seed
            report = run_from_config(cfg)
            e = {m: report.mean_error(m) for m in MODES}
            wins += (e["none"] >= e["first"] >= e["second"] >= e["ssar"])
        assert wins >= 2

    def test_mode_selects_headline(self):
        cfg = small_config()
        cfg["ssar"]["mode"] = "first"
        report = run_from_config(cfg)
        assert report.primary_mode == "first"
        assert report.last_cache is not None

    def test_invalid_mode_and_level(self):
        cfg = small_config()
        spec = workload_from_config(cfg)
        block = block_from_config(cfg)
        mask = mask_from_config(cfg, block, spec)
        plan = make_refresh_plan(spec.T, 4)
        with pytest.raises(ParameterError):
            run_pipeline(block, None, spec, mask, plan, mode="bogus")
        with pytest.raises(ParameterError):
            run_pipeline(block, None, spec, mask, plan, level="bogus")

    def test_map_level_row_sum_diagnostic(self):
        cfg = small_config()
        cfg["ssar"]["level"] = "map"
        report = run_from_config(cfg)
        dev = report.diagnostics["corrected_row_sum_deviation"]
        assert dev is not None and dev >= 0.0


class TestReportOutputs:
    def test_errors_csv_layout(self, tmp_path):
        report = run_from_config(small_config())
        path = tmp_path / "errors.csv"
        report.write_errors_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,mode,frob_err,psnr"
        assert len(lines) == 1 + len(report.corrected_steps) * len(MODES)

    def test_json_report(self, tmp_path):
        report = run_from_config(small_config())
        path = tmp_path / "report.json"
        report.write_json(path)
        payload = json.loads(path.read_text())
        assert set(payload["mean_frob"]) == set(MODES)
        assert payload["config"]["workload"]["L"] == 16

    def test_csv_determinism(self, tmp_path):
        cfg = small_config()
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run_from_config(cfg).write_errors_csv(a)
        run_from_config(cfg).write_errors_csv(b)
        assert a.read_bytes() == b.read_bytes()


class TestSpectrumFromConfig:
    def test_table_shape(self):
        cfg = small_config()
        table = spectrum_from_config(cfg)
        assert len(table.timesteps) == 11
        assert len(table.singular_values) == 11


class TestConfig:
    def test_defaults_validate(self):
        load_config(None)

    def test_missing_file(self, tmp_path):
        missing = tmp_path / "nope.json"
        with pytest.raises(ConfigError, match="nope.json"):
            load_config(str(missing))

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"workload": {"bogus": 1}}))
        with pytest.raises(ConfigError, match="bogus"):
            load_config(str(path))

    def test_overlay(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"workload": {"L": 32}, "mask": {"density": 0.5}}))
        cfg = load_config(str(path))
        assert cfg["workload"]["L"] == 32
        assert cfg["mask"]["density"] == 0.5
        assert cfg["workload"]["T"] == 50  # default preserved

    def test_invalid_values(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"mask": {"density": 0.0}}))
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_calibration_batch_size(self):
        cfg = small_config()
        assert len(calibration_batch(cfg)) == 3


class TestSweep:
    def test_singleton_matches_run(self):
        cfg = small_config()
        keys, results = sweep(cfg, {"density": [0.5]}, calibrate=False)
        assert keys == ["density"]
        cell, row, err = results[0]
        assert err is None
        cfg2 = small_config()
        cfg2["mask"]["density"] = 0.5
        direct = run_from_config(cfg2)
        for mode in MODES:
            assert row[f"mean_frob_{mode}"] == pytest.approx(direct.mean_error(mode))

    def test_rank_ladder_median(self):
        lows, highs = [], []
        for seed in range(5):
            cfg = small_config()
            cfg["workload"]["seed"] = seed
            cfg["ssar"]["level"] = "map"
            cfg["ssar"]["rank"] = 1
            lows.append(run_from_config(cfg).mean_error("ssar"))
            cfg["ssar"]["rank"] = 16
            highs.append(run_from_config(cfg).mean_error("ssar"))
        assert np.median(highs) <= np.median(lows)

    def test_cell_error_recorded(self):
        cfg = small_config()
        keys, results = sweep(cfg, {"density": [0.5, 2.0]}, calibrate=False)
        ok = [r for r in results if r[2] is None]
        failed = [r for r in results if r[2] is not None]
        assert len(ok) == 1 and len(failed) == 1

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            sweep(small_config(), {"bogus": [1]})

    def test_csv_output(self, tmp_path):
        cfg = small_config()
        keys, results = sweep(cfg, {"interval": [3, 4]}, calibrate=False)
        path = tmp_path / "table.csv"
        write_sweep_csv(keys, results, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("interval,")

    def test_zero_weight_cell_matches_plain_ptq(self):
        cfg = small_config()
        keys, results = sweep(cfg, {"lambda_global": [0.0], "lambda_local": [0.0]},
                              calibrate=True)
        cell, row, err = results[0]
        assert err is None
        from qslab.harness import calibrate_from_config
        cfg2 = small_config()
        cfg2["msad"]["lambda_global"] = 0.0
        cfg2["msad"]["lambda_local"] = 0.0
        direct = calibrate_from_config(cfg2)
        assert row["calib_final"] == pytest.approx(direct.final_report.total)
        assert direct.final_report.total == pytest.approx(direct.final_report.l_quant)
