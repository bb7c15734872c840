import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lvse.evaluation import (ComparisonError, UseCaseThresholds, assess, compare_variants, judge, load_report,
                             loading_quality, pooled_quantile, voltage_quality, write_comparison)

finite = st.floats(-1.0, 1.0, allow_nan=False)


@pytest.mark.parametrize("est,pf,expected", [(1.01, 1.00, 0.01), (0.97, 0.97, 0.0), (0.99, 1.02, -0.029412)])
def test_voltage_quality(est, pf, expected):
    assert voltage_quality(est, pf) == pytest.approx(expected, abs=5e-7)


def test_voltage_quality_exact():
    assert voltage_quality(0.99, 1.02) == pytest.approx(-0.03 / 1.02, abs=1e-12)
    assert voltage_quality(1.01, 1.00) == pytest.approx(0.01, abs=1e-12)


@pytest.mark.parametrize("est,pf,ith,expected", [(105, 100, 250, 0.02), (77, 77, 3, 0.0), (90, 120, 400, -0.075)])
def test_loading_quality(est, pf, ith, expected):
    assert loading_quality(est, pf, ith) == pytest.approx(expected, abs=1e-12)


def test_metrics_use_magnitudes():
    assert voltage_quality(-1.01 + 0j, 1.0) == pytest.approx(0.01, abs=1e-12)
    assert loading_quality(3 + 4j, 5.0, 10.0) == 0.0


def test_metric_preconditions():
    with pytest.raises(ValueError):
        voltage_quality(1.0, 0.0)
    with pytest.raises(ValueError):
        loading_quality(1.0, 1.0, 0.0)


@given(st.floats(0.5, 1.5), st.floats(0.5, 1.5), st.floats(1, 500), st.floats(1, 500), st.floats(1, 1000))
def test_swap_symmetry(va, vb, ia, ib, ith):
    assert loading_quality(ia, ib, ith) == -loading_quality(ib, ia, ith)
    assert np.sign(voltage_quality(va, vb)) == -np.sign(voltage_quality(vb, va))


@given(st.floats(0.5, 1.5), st.floats(-0.04, 0.04), st.floats(100, 400), st.floats(-9, 9), st.floats(0.1, 10))
def test_error_scaling_is_linear(v, dv, i, di, k):
    i_th = 400.0
    assert voltage_quality(v + k * dv, v) == pytest.approx(k * voltage_quality(v + dv, v), rel=1e-9, abs=1e-15)
    assert loading_quality(i + k * di, i, i_th) == pytest.approx(k * loading_quality(i + di, i, i_th), rel=1e-9, abs=1e-12)


def test_quantile_singleton():
    for q in (0.01, 0.5, 0.95, 0.99):
        assert pooled_quantile([0.01], q) == 0.01


def test_quantile_small_example():
    assert pooled_quantile([0.01, -0.02, 0.03, 0.04], 0.95) == 0.04
    assert pooled_quantile([0.01, -0.02, 0.03, 0.04], 0.5) == 0.02


def test_quantile_full_year_rank():
    rng = np.random.default_rng(17)
    samples = rng.permutation(np.arange(1, 35041)) * 1e-6 * rng.choice([-1, 1], 35040)
    assert pooled_quantile(samples, 0.99) == np.sort(np.abs(samples))[34690 - 1] == 34690e-6
    assert pooled_quantile(samples, 0.95) == 33288e-6


def test_quantile_rank_ignores_binary_rounding():
    # 0.07 * 100 evaluates to 7.000000000000001 in floating point
    assert pooled_quantile(np.arange(1, 101), 0.07) == 7


def test_quantile_errors():
    with pytest.raises(ValueError):
        pooled_quantile([], 0.5)
    for q in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            pooled_quantile([0.1], q)


@settings(max_examples=60)
@given(st.lists(finite, min_size=1, max_size=60), st.floats(0.001, 0.999), st.floats(0.001, 0.999), st.randoms())
def test_quantile_properties(xs, qa, qb, rnd):
    lo, hi = sorted((qa, qb))
    assert pooled_quantile(xs, lo) <= pooled_quantile(xs, hi)
    shuffled = list(xs)
    rnd.shuffle(shuffled)
    assert pooled_quantile(shuffled, hi) == pooled_quantile(xs, hi)
    # nearest rank against a sort-based oracle
    rank = max(1, math.ceil(round(hi * len(xs), 9)))
    assert pooled_quantile(xs, hi) == sorted(abs(x) for x in xs)[rank - 1]


@pytest.mark.parametrize("qv,ql,expected", [
    (0.006, 0.03, {"grid_planning": True, "connection_request": True, "monitoring_active_mgmt": True}),
    (0.012, 0.04, {"grid_planning": True, "connection_request": True, "monitoring_active_mgmt": False}),
    (0.001, 0.105, {"grid_planning": False, "connection_request": False, "monitoring_active_mgmt": False}),
    (0.02, 0.10, {"grid_planning": True, "connection_request": False, "monitoring_active_mgmt": False}),
])
def test_use_case_verdicts(qv, ql, expected):
    assert judge(qv, ql) == expected


def test_default_thresholds():
    assert dict(UseCaseThresholds()) == {"grid_planning": (0.02, 0.10), "connection_request": (0.015, 0.05),
                                         "monitoring_active_mgmt": (0.01, 0.05)}


def _report(name="1", index=0, grid="g", t0=0, scale=1.0):
    rng = np.random.default_rng(index)
    v = rng.normal(0, 0.004 * scale, (4, 3))
    i = rng.normal(0, 0.02 * scale, (4, 2))
    return assess(grid, {"name": name, "substation": "none", "ikvs_pct": 0, "imsys_pct": 0, "seed": 0},
                  t0, 7, list(v), list(i), ["B1", "B2", "B3"], ["L1", "L2"], metadata={"variant_index": index})


def test_assess_report(tmp_path):
    r = assess("g", {"name": "1"}, 0, 7, [np.full(3, 0.006)] * 4, [np.array([0.03, -0.03])] * 4,
               ["B1", "B2", "B3"], ["L1", "L2"])
    assert r.q99_voltage == 0.006 and r.q95_loading == 0.03
    assert all(r.verdicts.values())
    d = r.to_dict()
    assert d["counts"] == {"voltage": 12, "loading": 8, "buses": 3, "lines": 2}
    assert (d["t0"], d["t1"], d["timesteps"]) == (0, 4, 4)
    r.write(tmp_path)
    assert load_report(tmp_path / "report.json")["q99_voltage"] == 0.006
    rows = (tmp_path / "report.csv").read_text().splitlines()
    assert rows[0] == "kind,element,quantile,value" and len(rows) == 6
    r.write_samples(tmp_path)
    assert len((tmp_path / "samples.csv").read_text().splitlines()) == 1 + 12 + 8


def test_assess_needs_both_kinds():
    with pytest.raises(ValueError):
        assess("g", {"name": "1"}, 0, 7, [], [np.zeros(2)], [], ["L1", "L2"])


def test_compare_two_reports(tmp_path):
    table = compare_variants([_report("1", 0), _report("2", 1, scale=0.2)])
    assert [row["variant"] for row in table] == ["1", "2"]
    assert {"pass_grid_planning", "pass_connection_request", "pass_monitoring_active_mgmt"} <= set(table[0])
    csv_path, json_path = write_comparison(table, tmp_path)
    assert len(csv_path.read_text().splitlines()) == 3
    assert json.loads(json_path.read_text()) == table


def test_compare_orders_by_declared_index():
    reports = [_report(str(k + 1), k) for k in range(6)]
    table = compare_variants(reversed([r.to_dict() for r in reports]))
    assert [row["variant"] for row in table] == ["1", "2", "3", "4", "5", "6"]


def test_compare_rejects_mismatches():
    with pytest.raises(ComparisonError, match="different grids"):
        compare_variants([_report("1", 0, grid="a"), _report("2", 1, grid="b")])
    with pytest.raises(ComparisonError, match="timestep ranges"):
        compare_variants([_report("1", 0, t0=0), _report("2", 1, t0=8)])
    with pytest.raises(ComparisonError):
        compare_variants([_report("1", 0)])
