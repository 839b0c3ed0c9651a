import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vbsv.errors import DimensionError
from vbsv.model import (
    Dataset,
    StructuralVAR,
    build_equation_data,
    equation_loglik,
    garman_klass,
    joint_loglik,
    read_csv,
    read_ohlc,
    simulate_univariate_sv,
    simulate_var_sv,
    to_reduced_form,
    write_csv,
)


def small_data(T=6, n=2):
    v = np.arange(1, T * n + 1, dtype=float).reshape(T, n)
    return Dataset.from_array(v)


def random_var(rng, n, p, sigma_h2=0.0):
    B0 = np.eye(n)
    B0[np.tril_indices(n, -1)] = rng.normal(size=n * (n - 1) // 2)
    return StructuralVAR(B0, rng.normal(size=n), rng.normal(scale=0.2, size=(p, n, n)),
                         rng.normal(scale=0.3, size=n), np.full(n, sigma_h2))


class TestDataset:
    def test_rejects_missing(self):
        with pytest.raises(ValueError):
            Dataset.from_array([[1.0], [np.nan]])

    def test_name_count(self):
        with pytest.raises(DimensionError):
            Dataset(np.zeros((3, 2)), ("a",), (1, 2, 3))

    def test_window_and_scale(self):
        d = small_data()
        w = d.window(1, 4)
        assert w.T == 3 and w.time_index == (2, 3, 4)
        np.testing.assert_array_equal(d.scaled(2.0).values, 2.0 * d.values)


class TestEquationData:
    def test_first_equation(self):
        d = small_data()
        eq = build_equation_data(d, 1, 1)
        v = d.values
        assert eq.k == 3 and eq.T == 5
        np.testing.assert_array_equal(eq.X, np.column_stack([np.ones(5), v[:-1, 0], v[:-1, 1]]))
        np.testing.assert_array_equal(eq.y, v[1:, 0])

    def test_second_equation(self):
        d = small_data()
        eq = build_equation_data(d, 2, 1)
        v = d.values
        assert eq.k == 4
        np.testing.assert_array_equal(eq.X, np.column_stack([-v[1:, 0], np.ones(5), v[:-1, 0], v[:-1, 1]]))

    def test_k_formula(self):
        d = Dataset.from_array(np.random.default_rng(0).normal(size=(20, 3)))
        assert build_equation_data(d, 3, 4).k == 15
        for i in (1, 2, 3):
            assert build_equation_data(d, i, 2).k == 3 * 2 + i

    def test_lag_major_order(self):
        d = Dataset.from_array(np.random.default_rng(1).normal(size=(10, 2)))
        eq = build_equation_data(d, 1, 2)
        v = d.values
        np.testing.assert_array_equal(eq.X[:, 1:], np.column_stack([v[1:-1, 0], v[1:-1, 1], v[:-2, 0], v[:-2, 1]]))

    def test_errors(self):
        d = small_data()
        with pytest.raises(IndexError):
            build_equation_data(d, 3, 1)
        with pytest.raises(IndexError):
            build_equation_data(d, 0, 1)
        with pytest.raises(DimensionError):
            build_equation_data(d, 1, 6)


class TestReducedForm:
    def test_identity(self, rng):
        m = random_var(rng, 3, 2)
        m = StructuralVAR(np.eye(3), m.b, m.B, m.h0, m.sigma_h2)
        rf = to_reduced_form(m)
        np.testing.assert_array_equal(rf.b_tilde, m.b)
        np.testing.assert_array_equal(rf.B_tilde, m.B)

    def test_hand_solve(self):
        m = StructuralVAR([[1, 0], [0.5, 1]], [1, 1], np.zeros((1, 2, 2)), [0, 0], [0, 0])
        np.testing.assert_allclose(to_reduced_form(m).b_tilde, [1.0, 0.5])

    def test_multiply_back(self, rng):
        m = random_var(rng, 4, 3)
        rf = to_reduced_form(m)
        for j in range(3):
            np.testing.assert_allclose(m.B0 @ rf.B_tilde[j], m.B[j], atol=1e-12)
        np.testing.assert_allclose(m.B0 @ rf.b_tilde, m.b, atol=1e-12)

    def test_sigma_tilde(self, rng):
        m = random_var(rng, 3, 1)
        h = rng.normal(size=(4, 3))
        m = StructuralVAR(m.B0, m.b, m.B, m.h0, m.sigma_h2, h)
        rf = to_reduced_form(m)
        Binv = np.linalg.inv(m.B0)
        for t in range(4):
            expect = Binv @ np.diag(np.exp(h[t])) @ Binv.T
            np.testing.assert_allclose(rf.sigma_tilde(t), expect, atol=1e-12)
            np.testing.assert_allclose(rf.sigma_tilde_all()[t], expect, atol=1e-12)
            assert np.all(np.linalg.eigvalsh(rf.sigma_tilde(t)) > 0)

    def test_invalid_b0(self):
        with pytest.raises(ValueError):
            StructuralVAR([[1, 1], [0, 1]], [0, 0], np.zeros((1, 2, 2)), [0, 0], [0, 0])
        with pytest.raises(ValueError):
            StructuralVAR(np.eye(2), [0, 0], np.zeros((1, 2, 2)), [0, 0], [-1, 0])

    def test_theta_roundtrip(self, rng):
        m = random_var(rng, 3, 2)
        m2 = StructuralVAR.from_thetas([m.theta(i) for i in (1, 2, 3)], 2)
        np.testing.assert_array_equal(m2.B0, m.B0)
        np.testing.assert_array_equal(m2.B, m.B)
        np.testing.assert_array_equal(m2.b, m.b)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 4), p=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_equationwise_loglik_equals_joint(n, p, seed):
    rng = np.random.default_rng(seed)
    m = random_var(rng, n, p)
    T = 12
    data = Dataset.from_array(rng.normal(size=(T + p, n)))
    h = rng.normal(scale=0.5, size=(T, n))
    m = StructuralVAR(m.B0, m.b, m.B, m.h0, m.sigma_h2, h)
    total = sum(equation_loglik(build_equation_data(data, i, p), m.theta(i), h[:, i - 1])
                for i in range(1, n + 1))
    assert total == pytest.approx(joint_loglik(data, m), abs=1e-10 * max(1.0, abs(total)))


class TestGarmanKlass:
    def test_flat_day(self):
        assert garman_klass(10.0, 10.0, 10.0, 10.0) == 0.0

    def test_close_equals_open(self):
        v = garman_klass(1.0, math.exp(0.01), math.exp(-0.01), 1.0)
        assert v == pytest.approx(2.0e-4, rel=1e-12)

    def test_formula(self, rng):
        o = rng.uniform(90, 110, 50)
        c = rng.uniform(90, 110, 50)
        hi = np.maximum(o, c) * rng.uniform(1.0, 1.05, 50)
        lo = np.minimum(o, c) * rng.uniform(0.95, 1.0, 50)
        expect = np.maximum(0.5 * np.log(hi / lo) ** 2 - (2 * np.log(2) - 1) * np.log(c / o) ** 2, 0.0)
        np.testing.assert_allclose(garman_klass(o, hi, lo, c), expect, rtol=1e-14)
        np.testing.assert_allclose(garman_klass(o, hi, lo, c, annualize=252), 252 * expect, rtol=1e-14)

    def test_floor(self):
        # close outside the recorded range: a pathological row with a negative raw estimate
        raw = garman_klass(1.0, 1.01, 1.0, 1.2, floor=False)
        assert raw < 0 and garman_klass(1.0, 1.01, 1.0, 1.2) == 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            garman_klass(0.0, 1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            garman_klass(1.0, 1.0, 2.0, 1.0)


class TestSimulation:
    def test_no_noise_walk(self):
        _, h = simulate_univariate_sv(0.0, 0.7, 50, 3)
        np.testing.assert_array_equal(h, np.full(50, 0.7))

    def test_difference_variance(self):
        ss = np.random.SeedSequence(7).spawn(200)
        d = np.concatenate([np.diff(simulate_univariate_sv(0.1, 0.0, 300, s)[1]) for s in ss])
        assert 0.05 <= d.var() <= 0.18

    def test_deterministic(self):
        a = simulate_univariate_sv(0.1, 0.0, 30, 5)
        b = simulate_univariate_sv(0.1, 0.0, 30, 5)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_negative_variance(self):
        with pytest.raises(ValueError):
            simulate_univariate_sv(-0.1, 0.0, 10, 0)

    def test_white_noise_var(self):
        m = StructuralVAR(np.eye(3), np.zeros(3), np.zeros((1, 3, 3)), np.zeros(3), np.zeros(3))
        d, _ = simulate_var_sv(m, 2000, 11)
        var = d.values[1:].var(axis=0)
        assert np.all((var > 0.85) & (var < 1.15))

    def test_univariate_consistency(self):
        m = StructuralVAR(np.eye(1), [0.0], np.zeros((1, 1, 1)), [0.2], [0.1])
        d, h = simulate_var_sv(m, 40, 9)
        z, h1 = simulate_univariate_sv(0.1, 0.2, 40, 9)
        np.testing.assert_array_equal(h[:, 0], h1)
        np.testing.assert_allclose(d.values[1:, 0], z, rtol=1e-15)

    def test_contemporaneous_covariance(self):
        B0 = np.array([[1.0, 0.0], [0.5, 1.0]])
        m = StructuralVAR(B0, np.zeros(2), np.zeros((1, 2, 2)), np.zeros(2), np.zeros(2))
        d, _ = simulate_var_sv(m, 5000, 13)
        Binv = np.linalg.inv(B0)
        expect = Binv @ Binv.T
        np.testing.assert_allclose(np.cov(d.values[1:].T), expect, rtol=0.05, atol=0.05)


class TestCsv:
    def test_roundtrip(self, tmp_path, rng):
        d = Dataset(rng.normal(size=(7, 2)), ("a", "b"), tuple(range(7)))
        write_csv(d, tmp_path / "d.csv")
        back = read_csv(tmp_path / "d.csv")
        np.testing.assert_array_equal(back.values, d.values)
        assert back.variable_names == d.variable_names and back.time_index == d.time_index

    def test_drops_incomplete_rows(self, tmp_path):
        (tmp_path / "d.csv").write_text("t,a,b\n1,1.0,2.0\n2,,3.0\n3,NA,1\n4,5,6\n")
        d = read_csv(tmp_path / "d.csv")
        assert d.T == 2 and d.dropped_rows == 2

    def test_ohlc(self, tmp_path):
        rows = ["date,ticker,open,high,low,close"]
        for day in (1, 2, 3):
            rows.append(f"{day},AAA,10,11,9,10")
            if day != 2:
                rows.append(f"{day},BBB,20,21,19,20.5")
        (tmp_path / "o.csv").write_text("\n".join(rows) + "\n")
        d = read_ohlc(tmp_path / "o.csv")
        assert d.variable_names == ("AAA", "BBB") and d.time_index == (1, 3) and d.dropped_rows == 1
        assert d.values[0, 0] == pytest.approx(garman_klass(10, 11, 9, 10))
