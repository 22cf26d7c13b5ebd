"""
Tests for the acceptance suite itself.
"""

import math
from pathlib import Path

import pytest

from pollinate import dersim, validation
from pollinate.errors import EmptySkeleton, NewtonDivergence, ValidationFailed
from pollinate.validation import (
    GROUND_TRUTH_CHECKS,
    CheckResult,
    check_amplitude_sweep,
    check_determinism,
    check_energy_dissipation,
    check_gradients,
    check_grasp_location_sweep,
    check_icp_recovery,
    check_jacobians,
    check_modal_frequency,
    check_mst_bruteforce,
    check_skeleton_ground_truth,
    check_static_deflection,
    check_thinning_topology,
    demo_series_checksum,
    run_checks,
    validate,
)


DEMO_CHECKSUM = Path(__file__).parent / "golden" / "demo_series.sha256"


def _report(passed: bool) -> dict:
    check = CheckResult("demo", passed, 0.5, 1.0 if passed else 0.1, "stand-in")
    return {"report_version": 1, "quick": True, "passed": passed, "checks": [check.to_dict()]}


class TestCheckResult:
    """Report rows."""

    def test_to_dict_keys(self):
        row = CheckResult("x", True, 1.0, 2.0).to_dict()
        assert set(row) == {"name", "passed", "skipped", "metric", "threshold", "detail"}
        assert row["skipped"] is False

    def test_metric_must_be_below_threshold(self):
        assert validation._check("x", 0.5, 1.0).passed
        assert not validation._check("x", 1.0, 1.0).passed
        assert not validation._check("x", math.nan, 1.0).passed


class TestChecks:
    """Small runs of the individual checks."""

    def test_gradients(self):
        assert check_gradients(2).passed

    def test_jacobians(self):
        assert check_jacobians(2).passed

    def test_gradient_check_catches_a_wrong_force(self, monkeypatch):
        original = dersim.stretch_force
        monkeypatch.setattr(dersim, "stretch_force", lambda network, q: -original(network, q))
        result = check_gradients(1)
        assert not result.passed
        assert result.metric > 1e-3

    def test_mst_bruteforce(self):
        result = check_mst_bruteforce(5, n_vertices=6)
        assert result.passed
        assert result.metric < 1e-9

    def test_thinning_topology(self):
        assert check_thinning_topology(3).passed

    def test_energy_dissipation(self):
        result = check_energy_dissipation(50)
        assert result.passed
        assert result.name == "energy_dissipation"

    @pytest.mark.slow
    def test_static_deflection(self):
        result = check_static_deflection()
        assert result.passed, result.detail

    @pytest.mark.slow
    def test_modal_frequency(self):
        result = check_modal_frequency()
        assert result.passed, result.detail
        assert result.name == "modal_frequency"

    @pytest.mark.slow
    def test_skeleton_ground_truth(self, config):
        results = check_skeleton_ground_truth(config)
        assert [r.name for r in results] == list(GROUND_TRUTH_CHECKS)
        for result in results:
            assert result.passed, f"{result.name}: {result.metric} ({result.detail})"

    @pytest.mark.slow
    def test_amplitude_sweep_on_y_plant(self, config):
        result = check_amplitude_sweep(config)
        assert result.passed, result.detail
        assert result.metric >= 0.99

    @pytest.mark.slow
    def test_grasp_location_sweep_on_stem(self, config):
        result = check_grasp_location_sweep(config)
        assert result.passed, result.detail

    @pytest.mark.slow
    def test_icp_recovery(self):
        assert check_icp_recovery(2, n_points=500).passed

    @pytest.mark.slow
    def test_determinism(self, config):
        result = check_determinism(config)
        assert result.passed
        assert result.detail.startswith("sha256 ")

    @pytest.mark.slow
    def test_demo_checksum_is_pinned(self, config, request):
        checksum = demo_series_checksum(config)
        if request.config.getoption("--update-golden"):
            DEMO_CHECKSUM.parent.mkdir(exist_ok=True)
            DEMO_CHECKSUM.write_text(checksum + "\n")
        if not DEMO_CHECKSUM.exists():
            pytest.skip("no recorded demo checksum; record it with --update-golden")
        assert checksum == DEMO_CHECKSUM.read_text().strip()


class TestSuite:
    """Report assembly."""

    def test_raising_check_becomes_failed_rows(self, monkeypatch):
        def passing(name):
            return lambda *args, **kwargs: CheckResult(name, True, 0.0, 1.0)

        for function, name in (
            ("check_gradients", "force_gradient"),
            ("check_jacobians", "jacobian"),
            ("check_modal_frequency", "modal_frequency"),
            ("check_thinning_topology", "thinning_topology"),
            ("check_mst_bruteforce", "mst_bruteforce"),
            ("check_icp_recovery", "icp_recovery_m"),
            ("check_energy_dissipation", "energy_dissipation"),
            ("check_determinism", "demo_csv_determinism"),
        ):
            monkeypatch.setattr(validation, function, passing(name))

        def diverge(*args, **kwargs):
            raise NewtonDivergence("Newton did not reach 1e-08", residuals=[0.3])

        def broken_skeleton(config):
            raise EmptySkeleton("no voxels left")

        monkeypatch.setattr(validation, "check_static_deflection", diverge)
        monkeypatch.setattr(validation, "check_skeleton_ground_truth", broken_skeleton)

        report = run_checks(quick=True)
        rows = {c["name"]: c for c in report["checks"]}
        assert not report["passed"]
        assert not rows["euler_bernoulli_static"]["passed"]
        assert rows["euler_bernoulli_static"]["detail"].startswith("NewtonDivergence")
        for name in GROUND_TRUTH_CHECKS:
            assert "no voxels left" in rows[name]["detail"]
        assert rows["modal_frequency"]["passed"]
        assert rows["amplitude_linearity"]["skipped"]

    def test_validate_raises_with_report(self, monkeypatch):
        monkeypatch.setattr(validation, "run_checks", lambda quick=False, config=None: _report(False))
        with pytest.raises(ValidationFailed) as excinfo:
            validate(quick=True)
        assert excinfo.value.exit_code == 1
        assert excinfo.value.report["checks"][0]["name"] == "demo"

    def test_validate_returns_passing_report(self, monkeypatch):
        monkeypatch.setattr(validation, "run_checks", lambda quick=False, config=None: _report(True))
        assert validate(quick=True)["passed"]

    @pytest.mark.slow
    def test_quick_suite_skips_sweeps(self, config):
        report = run_checks(quick=True, config=config)
        skipped = {c["name"] for c in report["checks"] if c["skipped"]}
        assert skipped == {"amplitude_linearity", "grasp_location_trend"}
        assert report["quick"] is True
        assert report["report_version"] == validation.REPORT_VERSION
