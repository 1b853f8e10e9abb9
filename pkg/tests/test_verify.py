import jsonschema
import pytest

from amdp_mirror.verify import REPORT_SCHEMA, run_battery


def test_battery_passes_for_several_seeds():
    for seed in (0, 1, 2):
        report = run_battery(seed, n_instances=4)
        assert report["passed"], report
        jsonschema.validate(report, REPORT_SCHEMA)


def test_battery_names_every_check():
    names = [c["name"] for c in run_battery(0, n_instances=2)["checks"]]
    assert names == [
        "ergodicity",
        "performance_difference",
        "prox_closed_form_vs_numeric",
        "three_point_inequality",
        "contraction_certificate",
        "spmd_monotonicity",
        "dual_gradient_finite_difference",
    ]


def test_corruption_is_caught():
    report = run_battery(0, "transition_row", n_instances=3)
    assert not report["passed"]
    erg = next(c for c in report["checks"] if c["name"] == "ergodicity")
    assert not erg["passed"] and erg["failing_instance_seed"] is not None


def test_unknown_corruption():
    with pytest.raises(ValueError):
        run_battery(0, "everything")


def test_battery_is_deterministic():
    assert run_battery(7, n_instances=3) == run_battery(7, n_instances=3)
