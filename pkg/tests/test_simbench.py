"""Tests for the data generator, naive baseline, timing harness, accuracy."""

import csv
import json
import tracemalloc

import numpy as np
import pytest
from scipy.stats import norm

from curvestream.designs import build_two_level_design
from curvestream.exceptions import (
    DimensionCapExceededError,
    GridMismatchError,
    NotNormalizedError,
)
from curvestream.mfvb import FitOptions, HyperparametersTwoLevel, fit_mfvb
from curvestream.simbench import (
    GriddedDensity,
    SimConfig,
    accuracy,
    naive_mfvb,
    run_benchmark,
    simulate_three_level,
    simulate_two_level,
    timing_records_to_csv,
    timing_records_to_json,
    true_global_curve,
)


class TestGlobalCurve:
    def test_midpoint_value(self):
        # 3 sqrt(0.5 * 0.8) * 0.5 since the sigmoid factor is exactly 1/2
        assert abs(true_global_curve(0.5) - 1.5 * np.sqrt(0.4)) < 1e-12

    def test_endpoint(self):
        assert abs(true_global_curve(0.0)) < 1e-9


class TestSimulateTwoLevel:
    def test_seed_determinism(self):
        a = simulate_two_level(SimConfig(m=5, seed=42))
        b = simulate_two_level(SimConfig(m=5, seed=42))
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)
        assert a.group == b.group

    def test_group_sizes_and_support(self):
        sim = simulate_two_level(SimConfig(m=20, seed=7))
        sizes = [np.sum(np.asarray(sim.group) == g)
                 for g in dict.fromkeys(sim.group)]
        assert all(30 <= s <= 60 for s in sizes)
        assert sim.x.min() >= 0.0 and sim.x.max() <= 1.0

    def test_noise_scale(self):
        cfg = dict(m=2500, seed=11)
        noisy = simulate_two_level(SimConfig(sigma_eps=0.2, **cfg))
        clean = simulate_two_level(SimConfig(sigma_eps=0.0, **cfg))
        noise = noisy.y - clean.y
        assert noise.size > 1e5
        assert abs(noise.std() - 0.2) < 0.004

    def test_different_seeds_differ(self):
        a = simulate_two_level(SimConfig(m=3, seed=1))
        b = simulate_two_level(SimConfig(m=3, seed=2))
        assert not np.array_equal(a.y, b.y)


class TestSimulateThreeLevel:
    def test_balanced_shape(self):
        sim = simulate_three_level(m=10, n_range=(5, 5), o_range=(128, 128),
                                   seed=3)
        assert sim.x.size == 10 * 5 * 128
        groups = list(dict.fromkeys(sim.group))
        assert len(groups) == 10

    def test_seed_determinism(self):
        a = simulate_three_level(m=3, seed=9)
        b = simulate_three_level(m=3, seed=9)
        np.testing.assert_array_equal(a.y, b.y)

    def test_subgroup_deviation_amplitude_halved(self):
        from curvestream.simbench import _group_deviation
        x = np.linspace(0, 1, 50)
        rng1 = np.random.default_rng(5)
        rng2 = np.random.default_rng(5)
        full = _group_deviation(rng1, x, amplitude=1.0)
        half = _group_deviation(rng2, x, amplitude=0.5)
        np.testing.assert_allclose(half, 0.5 * full)


class TestNaiveBaseline:
    def test_cap_refusal(self):
        sim = simulate_two_level(SimConfig(m=6, seed=4, n_range=(8, 10)))
        design = build_two_level_design(sim.x, sim.y, sim.group,
                                        K_gbl=4, K_grp=3)
        with pytest.raises(DimensionCapExceededError):
            naive_mfvb(design, HyperparametersTwoLevel(), 5, dense_cap=10)

    def test_matches_streamlined(self):
        sim = simulate_two_level(SimConfig(m=4, seed=5, n_range=(8, 12)))
        design = build_two_level_design(sim.x, sim.y, sim.group,
                                        K_gbl=4, K_grp=3)
        hyper = HyperparametersTwoLevel()
        streamlined = fit_mfvb(design, hyper, FitOptions(fixed_iterations=10))
        naive = naive_mfvb(design, hyper, iterations=10)
        np.testing.assert_allclose(streamlined.state.mu, naive.state.mu,
                                   rtol=1e-6, atol=1e-10)
        assert naive.iterations == 10

    def test_fit_math_reproducible(self):
        sim = simulate_two_level(SimConfig(m=4, seed=6, n_range=(8, 12)))
        design = build_two_level_design(sim.x, sim.y, sim.group,
                                        K_gbl=4, K_grp=3)
        hyper = HyperparametersTwoLevel()
        f1 = fit_mfvb(design, hyper, FitOptions(fixed_iterations=8))
        f2 = fit_mfvb(design, hyper, FitOptions(fixed_iterations=8))
        np.testing.assert_array_equal(f1.state.mu, f2.state.mu)
        np.testing.assert_array_equal(f1.state.Sigma, f2.state.Sigma)

    def test_streamlined_memory_below_naive(self):
        hyper = HyperparametersTwoLevel()
        sim = simulate_two_level(SimConfig(m=100, seed=8))
        design_naive = build_two_level_design(sim.x, sim.y, sim.group,
                                              K_gbl=8, K_grp=6)
        tracemalloc.start()
        naive_mfvb(design_naive, hyper, iterations=2)
        _, naive_peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()

        sim = simulate_two_level(SimConfig(m=400, seed=8))
        design_stream = build_two_level_design(sim.x, sim.y, sim.group,
                                               K_gbl=8, K_grp=6)
        tracemalloc.start()
        fit_mfvb(design_stream, hyper, FitOptions(fixed_iterations=2))
        _, stream_peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        assert stream_peak < naive_peak


class TestBenchmarkHarness:
    def test_single_m_gives_one_record_per_variant(self, tmp_path):
        result = run_benchmark([8], replications=2, fixed_iterations=2,
                               seed=1, K_gbl=4, K_grp=3)
        variants = sorted(r.variant for r in result.records)
        assert variants == ["naive", "streamlined"]
        csv_path = tmp_path / "bench.csv"
        timing_records_to_csv(result, csv_path)
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["m", "variant", "mean_s", "sd_s", "iterations",
                           "parallel"]
        assert len(rows) == 3
        json_path = tmp_path / "bench.json"
        timing_records_to_json(result, json_path)
        payload = json.loads(json_path.read_text())
        assert len(payload["records"]) == 2

    def test_cap_produces_na_row(self, tmp_path):
        result = run_benchmark([4, 8], replications=1, fixed_iterations=2,
                               seed=1, K_gbl=4, K_grp=3, dense_cap=40)
        assert any(v == "naive" for _, v, _ in result.skipped)
        csv_path = tmp_path / "bench.csv"
        timing_records_to_csv(result, csv_path)
        content = csv_path.read_text()
        assert "NA" in content

    def test_nonascending_ms_rejected(self):
        with pytest.raises(ValueError):
            run_benchmark([10, 5], replications=1, fixed_iterations=1)


class TestAccuracy:
    def test_identical_densities(self):
        grid = np.linspace(-5, 5, 2001)
        d = GriddedDensity(grid=grid, density=norm.pdf(grid))
        assert accuracy(d, d) == 100.0

    def test_disjoint_supports(self):
        grid = np.linspace(0, 10, 4001)
        left = np.where(grid < 4.5, 1.0 / 4.5, 0.0)
        right = np.where(grid > 5.5, 1.0 / 4.5, 0.0)
        got = accuracy(GriddedDensity(grid, left), GriddedDensity(grid, right))
        assert abs(got) < 0.2

    def test_shifted_normals_match_quadrature_oracle(self):
        grid = np.linspace(-8.0, 8.5, 3001)
        q = GriddedDensity(grid, norm.pdf(grid))
        p = GriddedDensity(grid, norm.pdf(grid, loc=0.5))
        got = accuracy(q, p)
        fine = np.linspace(-12.0, 12.5, 2_000_001)
        tv = 0.5 * np.trapezoid(np.abs(norm.pdf(fine) - norm.pdf(fine, loc=0.5)),
                                fine)
        want = 100.0 * (1.0 - tv)
        assert abs(got - want) < 0.1

    def test_grid_mismatch_rejected(self):
        g1 = np.linspace(-5, 5, 101)
        g2 = np.linspace(-5, 5, 102)
        with pytest.raises(GridMismatchError):
            accuracy(GriddedDensity(g1, norm.pdf(g1)),
                     GriddedDensity(g2, norm.pdf(g2)))

    def test_unnormalized_rejected(self):
        grid = np.linspace(-5, 5, 101)
        with pytest.raises(NotNormalizedError):
            accuracy(GriddedDensity(grid, 2 * norm.pdf(grid)),
                     GriddedDensity(grid, norm.pdf(grid)))
        with pytest.raises(NotNormalizedError):
            accuracy(GriddedDensity(grid, -norm.pdf(grid)),
                     GriddedDensity(grid, norm.pdf(grid)))
