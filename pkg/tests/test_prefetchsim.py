"""Prefetch schedule model: table fit, hiding invariant, schedule ordering."""

import numpy as np
import pytest

from attncast.errors import ConfigError, ParameterError
from attncast.prefetchsim import (
    REFERENCE_BREAKDOWN,
    SimConfig,
    default_fit,
    fit_parameters,
    report_to_csv,
    report_to_plot_data,
    simulate,
)


def manual_config(**kw) -> SimConfig:
    base = dict(
        num_layers=2,
        per_layer_compute=10.0,
        predict_base_ms=8.0,
        predict_per_token_ms=0.0,
        bytes_per_token_per_layer=1.0,
        pcie_bandwidth=1.0,
        transfer_fixed_overhead=2.0,
        budget=15,
        context_lengths=[40],
        schedule="cross_token",
    )
    base.update(kw)
    return SimConfig(**base)


class TestFit:
    def test_two_exact_affine_points(self):
        fit = fit_parameters({100: (1.0, 2.0, 10.0), 200: (2.0, 3.0, 9.0)})
        assert max(abs(r) for r in fit.predict_residuals.values()) == pytest.approx(0.0, abs=1e-9)
        assert max(abs(r) for r in fit.transfer_residuals.values()) == pytest.approx(0.0, abs=1e-9)

    def test_constant_column_zero_slope(self):
        fit = fit_parameters({100: (1.5, 1.0, 10.0), 200: (1.5, 2.0, 9.0), 400: (1.5, 4.0, 7.0)})
        assert fit.predict_coefficients[1] == pytest.approx(0.0, abs=1e-12)

    def test_single_point_rejected(self):
        with pytest.raises(ParameterError):
            fit_parameters({100: (1.0, 2.0, 3.0)})

    def test_reference_predict_fit(self):
        # frozen from an independent least-squares computation on the
        # bundled reference table
        fit = default_fit()
        intercept, slope = fit.predict_coefficients
        assert slope == pytest.approx(1.331097e-4, rel=1e-4)
        assert intercept == pytest.approx(0.130435, abs=1e-4)
        assert max(abs(r) for r in fit.predict_residuals.values()) < 0.15

    def test_reference_transfer_fit(self):
        fit = default_fit()
        intercept, slope = fit.transfer_coefficients
        assert slope == pytest.approx(3.808594e-4, rel=1e-4)
        assert intercept == pytest.approx(0.9, abs=1e-6)


class TestCrossToken:
    def test_reference_breakdown_32k_row(self):
        # direct configuration of the measured 32K operating point
        config = manual_config(
            num_layers=32,
            per_layer_compute=50.0 / 32,
            predict_base_ms=4.5,
            transfer_fixed_overhead=13.2,
            budget=0,
            pcie_bandwidth=1e12,
            context_lengths=[32768],
        )
        point = simulate(config).by_context("cross_token")[32768]
        assert point.predict_ms == pytest.approx(4.5)
        assert point.transfer_ms == pytest.approx(13.2)
        assert point.wait_ms == pytest.approx(32.3)
        assert point.total_per_token_ms == pytest.approx(50.0)

    def test_no_overhead_limit(self):
        config = manual_config(
            predict_base_ms=0.0, transfer_fixed_overhead=0.0, budget=0, pcie_bandwidth=1e12
        )
        point = simulate(config).by_context("cross_token")[40]
        assert point.total_per_token_ms == pytest.approx(20.0)

    def test_fitted_totals_match_reference_table(self):
        report = simulate(default_fit().config)
        table_totals = {4096: 47.3, 8192: 48.6, 16384: 49.6, 32768: 50.0}
        for n, want in table_totals.items():
            got = report.by_context("cross_token")[n].total_per_token_ms
            assert abs(got - want) <= 0.5

    def test_latency_hiding_is_exact(self):
        config = default_fit().config
        report = simulate(config)
        for n, point in report.by_context("cross_token").items():
            if point.predict_ms + point.transfer_ms <= config.compute_ms(n):
                assert point.total_per_token_ms == config.compute_ms(n)

    def test_speedup_band_at_32k(self):
        point = simulate(default_fit().config).by_context("cross_token")[32768]
        assert 4.0 <= point.speedup_vs_full_offload <= 7.0

    def test_totals_vary_little_across_contexts(self):
        totals = [
            p.total_per_token_ms
            for p in simulate(default_fit().config).points
            if p.schedule == "cross_token"
        ]
        assert max(totals) / min(totals) - 1.0 <= 0.10


class TestSchedules:
    def test_two_layer_overload_schedule(self):
        # predict 8 + transfer (2 fixed + 15 tokens * 2 bytes/layer-rate) = 40
        # equals twice the 20 ms compute: the pipeline binds, compute hides
        config = manual_config()
        report = simulate(config)
        ct = report.by_context("cross_token")[40]
        assert ct.predict_ms + ct.transfer_ms == pytest.approx(40.0)
        assert ct.total_per_token_ms == pytest.approx(40.0)
        cl = report.by_context("cross_layer")[40]
        # each layer pays its own issue overhead and stalls
        assert cl.transfer_ms == pytest.approx(2 * 2.0 + 30.0)
        assert cl.stall_ms > 0
        assert cl.total_per_token_ms == pytest.approx(42.0)

    def test_schedule_ordering(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(64, 4096))
            budget = int(rng.integers(1, n))
            config = manual_config(
                num_layers=int(rng.integers(1, 48)),
                per_layer_compute=float(rng.uniform(0.1, 5.0)),
                predict_base_ms=float(rng.uniform(0.0, 5.0)),
                predict_per_token_ms=float(rng.uniform(0, 1e-3)),
                bytes_per_token_per_layer=float(rng.uniform(16, 4096)),
                pcie_bandwidth=float(rng.uniform(1e4, 1e8)),
                transfer_fixed_overhead=float(rng.uniform(0.0, 1.0)),
                budget=budget,
                context_lengths=[n],
            )
            report = simulate(config)
            ct = report.by_context("cross_token")[n]
            cl = report.by_context("cross_layer")[n]
            fo = report.by_context("full_offload")[n]
            assert ct.total_per_token_ms <= cl.total_per_token_ms + 1e-9
            # the sparse pipeline must be cheaper than hauling the full
            # context for the ordering to be guaranteed
            if ct.predict_ms + ct.transfer_ms <= n * config.bytes_per_token_per_layer * (
                config.num_layers / config.pcie_bandwidth
            ):
                assert cl.total_per_token_ms <= fo.total_per_token_ms + 1e-9

    def test_overlap_never_beats_binding_resource(self):
        config = default_fit().config
        for point in simulate(config).points:
            if point.schedule == "cross_token":
                overhead = point.predict_ms + point.transfer_ms
                compute = config.compute_ms(point.context_length)
                assert point.total_per_token_ms >= max(overhead, compute) - 1e-9

    def test_resident_memory_accounting(self):
        config = default_fit().config
        report = simulate(config)
        for n in config.context_lengths:
            sparse = report.by_context("cross_token")[n].resident_kv_bytes
            full = report.by_context("full_offload")[n].resident_kv_bytes
            assert sparse < full
            assert full == pytest.approx(
                n * config.bytes_per_token_per_layer * config.num_layers
            )


class TestReportOutput:
    def test_csv_and_plot_data(self):
        report = simulate(default_fit().config)
        csv_text = report_to_csv(report)
        assert csv_text.splitlines()[0].startswith("context_length,schedule,predict_ms")
        plot = report_to_plot_data(report)
        lines = plot.strip().split("\n")
        assert lines[0] == "context_length,cross_token,cross_layer,full_offload"
        assert len(lines) == 1 + len(REFERENCE_BREAKDOWN)

    def test_bad_schedule_rejected(self):
        with pytest.raises(ConfigError):
            manual_config(schedule="warp").validate()
