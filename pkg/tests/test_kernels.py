import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from bcpnn import kernels as K
from bcpnn.model import HypercolumnGeometry, LayerPairState
from bcpnn.plasticity import ConnectivityMask, mi_scores
from bcpnn.precision import NativeArithmetic, get_arithmetic, round_to_format
from instances import max_rel_err, random_geometry, random_state, softmax_rows

EPS = K.EPS_TRACE


def _state(w, b, ci=None, cj=None, cij=None):
    w = np.asarray(w, float)
    n, m = w.shape
    ci = np.full(n, 0.5) if ci is None else np.asarray(ci, float)
    cj = np.full(m, 1 / m) if cj is None else np.asarray(cj, float)
    cij = np.outer(ci, cj) if cij is None else np.asarray(cij, float)
    return LayerPairState(w, np.asarray(b, float), ci, cj, cij)


class TestSupport:
    def test_zero_weights_give_bias(self):
        st_ = _state(np.zeros((3, 2)), [0.5, -0.5])
        a = np.random.default_rng(0).uniform(size=(4, 3))
        np.testing.assert_array_equal(K.compute_support(a, st_), np.tile([0.5, -0.5], (4, 1)))

    def test_unit_selector(self):
        st_ = _state([[1, 2], [3, 4]], [0, 0])
        np.testing.assert_array_equal(K.compute_support(np.array([[1.0, 0.0]]), st_), [[1, 2]])

    def test_random_3x4x5(self):
        rng = np.random.default_rng(1)
        st_ = _state(rng.standard_normal((4, 5)), rng.standard_normal(5))
        a = rng.uniform(size=(3, 4)).astype(np.float32)
        got = K.compute_support(a, LayerPairState(*(x.astype(np.float32) for x in st_.arrays().values())), get_arithmetic("f32"))
        assert max_rel_err(got, oracles.support(a, st_.weights, st_.bias)) <= 1e-6

    def test_shape_error(self):
        with pytest.raises(ValueError):
            K.compute_support(np.ones((2, 3)), _state(np.zeros((4, 2)), [0, 0]))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(K.hcu_softmax(np.zeros((1, 4)), HypercolumnGeometry(1, 4)), [[0.25] * 4], rtol=1e-15)

    def test_analytic(self):
        out = K.hcu_softmax(np.array([[0.0, math.log(2)]]), HypercolumnGeometry(1, 2))
        np.testing.assert_allclose(out, [[1 / 3, 2 / 3]], rtol=1e-15)

    def test_large_support_no_overflow(self):
        out = K.hcu_softmax(np.array([[1000.0, 0.0]]), HypercolumnGeometry(1, 2))
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, oracles.softmax([[1000.0, 0.0]], 1, 2), rtol=1e-15, atol=0)

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            K.hcu_softmax(np.array([[np.nan, 0.0]]), HypercolumnGeometry(1, 2))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31))
    def test_rows_sum_to_one_per_hcu(self, h, m, seed):
        geom = HypercolumnGeometry(h, m)
        s = np.random.default_rng(seed).standard_normal((3, h * m)) * 50
        out = K.hcu_softmax(s, geom)
        assert (out >= 0).all()
        np.testing.assert_allclose(out.reshape(3, h, m).sum(2), 1.0, rtol=1e-12)


class TestMarginals:
    def test_lambda_zero_keeps_traces(self):
        rng = np.random.default_rng(2)
        st_ = random_state(rng, 3, 4)
        before = st_.copy()
        K.update_marginals(st_, rng.uniform(size=(5, 3)), rng.uniform(size=(5, 4)), 0.0)
        for k in ("trace_ci", "trace_cj", "trace_cij"):
            np.testing.assert_array_equal(getattr(st_, k), getattr(before, k))

    def test_lambda_one_is_batch_mean_then_clamp(self):
        st_ = _state(np.zeros((2, 2)), [0, 0])
        K.update_marginals(st_, np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]]), 1.0)
        np.testing.assert_array_equal(st_.trace_ci, [1.0, EPS])
        np.testing.assert_array_equal(st_.trace_cj, [0.5, 0.5])
        np.testing.assert_array_equal(st_.trace_cij, [[0.5, 0.5], [EPS, EPS]])

    def test_two_sample_half_lambda(self):
        ci, cj = np.array([0.5, 0.5]), np.array([0.5, 0.5])
        st_ = _state(np.zeros((2, 2)), [0, 0], ci, cj)
        a = np.array([[1.0, 0.0], [0.2, 0.8]])
        c = np.array([[0.9, 0.1], [0.3, 0.7]])
        K.update_marginals(st_, a, c, 0.5)
        want = oracles.marginals(ci, cj, np.outer(ci, cj), a, c, 0.5, EPS)
        # hand check of one entry: 0.5 * 0.25 + 0.5 * (0.9 + 0.06) / 2
        assert st_.trace_cij[0, 0] == pytest.approx(0.365, rel=1e-15)
        for got, ref in zip((st_.trace_ci, st_.trace_cj, st_.trace_cij), want):
            assert max_rel_err(got, ref) <= 1e-12

    def test_lambda_range(self):
        st_ = _state(np.zeros((1, 1)), [0])
        with pytest.raises(ValueError):
            K.update_marginals(st_, np.ones((1, 1)), np.ones((1, 1)), 1.5)

    def test_split_statistics_equal_full_batch(self):
        rng = np.random.default_rng(3)
        a, c = rng.uniform(size=(11, 4)), rng.uniform(size=(11, 3))
        full = K.batch_statistics(a, c)
        parts = K.combine_statistics([K.batch_statistics(a[lo:hi], c[lo:hi]) for lo, hi in ((0, 4), (4, 8), (8, 11))])
        assert parts.count == 11
        for k in ("sum_pre", "sum_post", "sum_joint"):
            np.testing.assert_allclose(getattr(parts, k), getattr(full, k), rtol=1e-14)
        # the weighted mean of sub-batch means is the full-batch mean
        np.testing.assert_allclose(parts.sum_joint / parts.count, (a.T @ c) / 11, rtol=1e-14)


class TestWeightsBias:
    def test_independence_gives_zero(self):
        ci, cj = np.array([0.3, 0.7]), np.array([0.2, 0.5, 0.3])
        st_ = _state(np.ones((2, 3)), [0, 0, 0], ci, cj, np.outer(ci, cj))
        K.update_weights_bias(st_, 1.0)
        np.testing.assert_allclose(st_.weights, 0.0, atol=1e-15)

    def test_bias_analytic(self):
        st_ = _state(np.zeros((1, 1)), [0], [0.5], [math.exp(-1)], [[0.1]])
        K.update_weights_bias(st_, 2.0)
        assert st_.bias[0] == pytest.approx(-2.0, rel=1e-15)

    def test_nonpositive_trace_rejected(self):
        st_ = _state(np.zeros((1, 1)), [0], [0.5], [0.5], [[0.0]])
        with pytest.raises(RuntimeError):
            K.update_weights_bias(st_, 1.0)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            st_ = random_state(rng, 5, 6)
            K.update_weights_bias(st_, -3.0)
            w, b = oracles.weights_bias(st_.trace_ci, st_.trace_cj, st_.trace_cij, -3.0)
            assert max_rel_err(st_.weights, w) <= 1e-12
            assert max_rel_err(st_.bias, b) <= 1e-12


class TestMask:
    def _w(self):
        return np.arange(1, 4 * 6 + 1, dtype=float).reshape(4, 6)

    def test_all_active(self):
        st_ = _state(self._w(), np.zeros(6))
        K.apply_mask(st_, ConnectivityMask(np.ones((4, 3), bool), 4))
        np.testing.assert_array_equal(st_.weights, self._w())

    def test_all_silent(self):
        st_ = _state(self._w(), np.zeros(6))
        K.apply_mask(st_, ConnectivityMask(np.zeros((4, 3), bool), 0))
        np.testing.assert_array_equal(st_.weights, 0)

    def test_single_silent_entry(self):
        # equal fan-in per column: feature 2 silent for HCU 0, feature 0 silent for the others
        active = np.ones((4, 3), bool)
        active[2, 0] = False
        active[0, 1] = False
        active[0, 2] = False
        st_ = _state(self._w(), np.zeros(6))
        K.apply_mask(st_, ConnectivityMask(active, 3))
        want = self._w()
        want[2, 0:2] = 0
        want[0, 2:6] = 0
        np.testing.assert_array_equal(st_.weights, want)

    def test_mismatch(self):
        st_ = _state(self._w(), np.zeros(6))
        with pytest.raises(ValueError):
            K.apply_mask(st_, ConnectivityMask(np.ones((3, 3), bool), 3))


class TestPredict:
    def test_argmax(self):
        assert K.predict_classes(np.array([[0.1, 0.7, 0.2]]))[0] == 1

    def test_tie_lowest_index(self):
        assert K.predict_classes(np.array([[0.5, 0.5]]))[0] == 0

    def test_scan_oracle(self):
        a = np.random.default_rng(5).integers(0, 3, (30, 4)).astype(float)
        np.testing.assert_array_equal(K.predict_classes(a), [oracles.argmax_scan(r) for r in a])


def _oracle_instance(rng):
    """One random kernel problem of at most 8x8, with every oracle's answer."""
    pre, post = random_geometry(rng), random_geometry(rng)
    st_ = random_state(rng, pre.total_units, post.total_units)
    n = int(rng.integers(1, 6))
    a = softmax_rows(rng, n, pre)
    return pre, post, st_, a


@pytest.mark.parametrize("seed", range(5))
def test_kernels_match_oracles_f64(seed):
    rng = np.random.default_rng(100 + seed)
    for _ in range(25):
        pre, post, st_, a = _oracle_instance(rng)
        s = K.compute_support(a, st_)
        assert max_rel_err(s, oracles.support(a, st_.weights, st_.bias)) <= 1e-12
        p = K.hcu_softmax(s, post)
        assert max_rel_err(p, oracles.softmax(s, post.n_hcus, post.mcus_per_hcu)) <= 1e-12
        mi = mi_scores(st_, post)
        assert max_rel_err(mi, oracles.mi(st_.trace_ci, st_.trace_cj, st_.trace_cij, post.n_hcus, post.mcus_per_hcu)) <= 1e-12


def test_emulated_kernels_run_in_format():
    arith = get_arithmetic("bf16")
    rng = np.random.default_rng(6)
    geom = HypercolumnGeometry(2, 3)
    st_ = LayerPairState.independent(HypercolumnGeometry(4, 2), geom, -1.0, arith)
    a = arith.asarray(softmax_rows(rng, 5, HypercolumnGeometry(4, 2)))
    p = K.hcu_softmax(K.compute_support(a, st_, arith), geom, arith)
    K.update_marginals(st_, a, p, 0.1, arith)
    K.update_weights_bias(st_, -1.0, arith)
    for x in (p, st_.trace_cij, st_.weights, st_.bias):
        assert x.dtype == np.float32
        np.testing.assert_array_equal(round_to_format(x, arith.fmt), x)


def test_native_f32_stays_f32():
    arith = NativeArithmetic(np.float32)
    st_ = LayerPairState.independent(HypercolumnGeometry(3, 2), HypercolumnGeometry(2, 2), -1.0, arith)
    a = arith.asarray(np.full((2, 6), 0.5))
    p = K.hcu_softmax(K.compute_support(a, st_, arith), HypercolumnGeometry(2, 2), arith)
    K.update_marginals(st_, a, p, 0.1, arith)
    K.update_weights_bias(st_, -1.0, arith)
    assert all(x.dtype == np.float32 for x in st_.arrays().values())
