"""Accuracy metrics against definitional oracles, plus aggregation arithmetic."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from imu2emg.metrics import (
    METRICS,
    CycleMetrics,
    aggregate,
    cycle_metrics,
    cycle_rows,
    cycles_from_rows,
    delta_ep,
    delta_tp,
    nrmse,
    pearson_r,
    r_squared,
)
from imu2emg.tensor import ShapeError


# ----------------------------------------------------------------- plain-Python oracles


def oracle_r(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def oracle_r2(t, p):
    m = sum(t) / len(t)
    return 1 - sum((a - b) ** 2 for a, b in zip(t, p)) / sum((a - m) ** 2 for a in t)


def oracle_nrmse(t, p):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(t, p)) / len(t)) / (max(t) - min(t))


finite = st.floats(-10, 10, allow_nan=False)


class TestPearson:
    def test_affine(self, gen):
        x = gen.normal(size=20)
        assert pearson_r(x, 2 * x + 3) == pytest.approx(1.0, abs=1e-12)
        assert pearson_r(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_hand_case(self):
        assert pearson_r([1, 2, 3, 4], [1, 2, 3, 5]) == pytest.approx(0.98270, abs=1e-5)

    def test_constant_is_zero(self):
        assert pearson_r([1, 1, 1], [1, 2, 3]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            pearson_r([1, 2], [1, 2, 3])

    @settings(max_examples=100)
    @given(arrays(np.float64, 12, elements=finite), arrays(np.float64, 12, elements=finite))
    def test_oracle(self, x, y):
        if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
            return
        assert pearson_r(x, y) == pytest.approx(oracle_r(list(x), list(y)), abs=1e-10)


class TestRSquared:
    def test_perfect(self, gen):
        x = gen.normal(size=10)
        assert r_squared(x, x) == 1.0

    def test_mean_prediction(self, gen):
        x = gen.normal(size=10)
        assert r_squared(x, np.full(10, x.mean())) == pytest.approx(0.0, abs=1e-12)

    def test_negative_allowed(self):
        assert r_squared([0, 1, 2], [0, 0, 0]) == pytest.approx(-1.5)

    @settings(max_examples=100)
    @given(arrays(np.float64, 9, elements=finite), arrays(np.float64, 9, elements=finite))
    def test_oracle(self, t, p):
        if np.ptp(t) < 1e-3:
            return
        assert r_squared(t, p) == pytest.approx(oracle_r2(list(t), list(p)), rel=1e-10, abs=1e-10)


class TestNrmse:
    def test_zero(self, gen):
        x = gen.normal(size=10)
        assert nrmse(x, x) == 0.0

    def test_hand_case(self):
        assert nrmse([0, 1], [1, 0]) == pytest.approx(1.0)

    @given(st.floats(0.01, 100))
    def test_scale_invariant(self, c):
        t, p = np.array([0.1, 0.5, 0.3, 0.9]), np.array([0.2, 0.4, 0.35, 0.7])
        assert nrmse(c * t, c * p) == pytest.approx(nrmse(t, p), rel=1e-12)

    @settings(max_examples=100)
    @given(arrays(np.float64, 9, elements=finite), arrays(np.float64, 9, elements=finite))
    def test_oracle(self, t, p):
        if np.ptp(t) < 1e-3:
            return
        assert nrmse(t, p) == pytest.approx(oracle_nrmse(list(t), list(p)), rel=1e-10)


class TestPeakErrors:
    def test_tp_identical(self, gen):
        x = gen.normal(size=101)
        assert delta_tp(x, x) == 0.0

    def test_tp_hand_case(self):
        a, b = np.zeros(101), np.zeros(101)
        a[30], b[40] = 1.0, 1.0
        assert delta_tp(a, b) == 10 / 101

    def test_tp_tie_rule(self):
        a = np.zeros(101)
        a[57] = 1.0
        assert delta_tp(a, np.full(101, 0.3)) == 57 / 101

    def test_ep_equal_peaks(self):
        assert delta_ep([0.1, 0.8], [0.8, 0.2]) == 0.0

    def test_ep_hand_case(self):
        assert delta_ep([0.0, 0.8], [0.6, 0.0]) == pytest.approx(0.25, abs=1e-15)

    def test_ep_asymmetric(self):
        t, p = np.array([0.0, 0.4]), np.array([0.0, 0.8])
        assert delta_ep(t, p) == pytest.approx(abs(0.4 - 0.8) / 0.4)
        assert delta_ep(p, t) == pytest.approx(abs(0.8 - 0.4) / 0.8)
        assert delta_ep(t, p) != delta_ep(p, t)


def cyc(subject, mode, idx, r_value, m=1):
    vals = {k: np.full(m, r_value) for k in METRICS}
    deg = {k: np.zeros(m, dtype=bool) for k in METRICS}
    return CycleMetrics(subject, mode, idx, vals, deg)


class TestAggregate:
    def test_single_cycle(self):
        rep = aggregate([cyc("A", "levelground", 0, 0.7)])
        assert rep.overall["r"] == (0.7, 0.0)

    def test_two_subjects_sample_sd(self):
        rep = aggregate([cyc("A", "levelground", 0, 0.6), cyc("B", "levelground", 0, 0.8)])
        mean, sd = rep.overall["r"]
        assert mean == pytest.approx(0.7)
        assert sd == pytest.approx(0.1414, abs=1e-4)

    def test_modes_weighted_equally(self):
        # 3 cycles in one mode and 1 in another: mean over modes, not over cycles
        cycles = [cyc("A", "levelground", i, 0.9) for i in range(3)] + [cyc("A", "treadmill", 0, 0.5)]
        assert aggregate(cycles).overall["r"][0] == pytest.approx(0.7)

    def test_mode_filter(self):
        cycles = [cyc("A", "levelground", 0, 0.9), cyc("A", "treadmill", 0, 0.5), cyc("B", "treadmill", 1, 0.4)]
        rep = aggregate(cycles, mode="levelground")
        assert rep.n_cycles == 1
        assert set(rep.per_mode) == {"levelground"}

    def test_degenerate_excluded_and_counted(self):
        truth = np.zeros((101, 2))
        truth[:, 1] = np.linspace(0, 1, 101)
        pred = truth.copy()
        c = cycle_metrics(truth, pred, "A", "levelground", 0)
        rep = aggregate([c], ["flat", "ramp"])
        assert rep.excluded["r"] == 1
        assert rep.per_muscle["r"]["ramp"][0] == pytest.approx(1.0)
        assert math.isnan(rep.per_muscle["r"]["flat"][0])

    def test_prediction_clipped_before_metrics(self):
        truth = np.linspace(0, 1, 101)[:, None]
        c = cycle_metrics(truth, truth + 5.0, "A", "levelground", 0)
        assert c.values["delta_ep"][0] == 0.0  # clipped to 1.0, same peak as truth

    def test_rows_round_trip(self, gen):
        cycles = [cycle_metrics(gen.random((101, 3)), gen.random((101, 3)), "A", "treadmill", i) for i in range(3)]
        back = cycles_from_rows(cycle_rows(cycles, ["a", "b", "c"]), ["a", "b", "c"])
        for x, y in zip(cycles, back):
            for k in METRICS:
                np.testing.assert_array_equal(x.values[k], y.values[k])
                np.testing.assert_array_equal(x.degenerate[k], y.degenerate[k])

    def test_to_dict_schema(self):
        d = aggregate([cyc("A", "levelground", 0, 0.7)]).to_dict()
        assert d["schema_version"] == 1
        assert set(d["overall"]) == set(METRICS)
