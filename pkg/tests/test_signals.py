import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit
from scipy.stats import norm

from mbdlab import signals as sig
from mbdlab.mbd import BiasFeatureSet, BranchConfig, MbdBranch, fit_moments
from mbdlab.signals import SparsityError, VmPolicy

finite = st.floats(-1e3, 1e3, allow_nan=False)


# ------------------------------------------------------------------ rps / percentile


def test_rps_examples():
    assert sig.rps(3.0, 3.0, 2.0) == 0.0
    assert sig.rps(45.0, 30.0, 15.0) == 1.0


def test_rps_sigma_floor():
    assert sig.rps(1.0, 0.0, 0.0) == pytest.approx(1e3)


def test_rps_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        sig.rps([np.nan], [0.0], [1.0])


def test_percentile_examples():
    assert sig.percentile(0.0) == 0.5
    assert sig.percentile(1.0) == pytest.approx(0.8413, abs=5e-5)
    # scipy's normal CDF as the independent reference for the 85th-percentile reading
    assert sig.percentile(1.0364) == pytest.approx(norm.cdf(1.0364), abs=1e-12)
    assert round(float(sig.percentile(1.0364)), 2) == 0.85


@settings(max_examples=100)
@given(st.floats(-30, 30))
def test_percentile_symmetry(z):
    assert abs(sig.percentile(z) + sig.percentile(-z) - 1.0) <= 1e-9


@settings(max_examples=100)
@given(finite, finite, st.floats(0.01, 100), finite)
def test_rps_location_shift(p, mu, sigma, a):
    shifted = sig.rps(p, mu + a, sigma)
    assert shifted == pytest.approx(sig.rps(p, mu, sigma) - a / sigma, abs=1e-6 * (1 + abs(a / sigma)))


@settings(max_examples=100)
@given(finite, finite, st.floats(0.01, 100), st.floats(0.1, 10))
def test_rps_scale(p, mu, sigma, k):
    assert sig.rps(p, mu, k * sigma) == pytest.approx(sig.rps(p, mu, sigma) / k, rel=1e-9, abs=1e-12)


# ------------------------------------------------------------------ policy / vm score


def test_policy_validation():
    with pytest.raises(ValueError, match="strategy"):
        VmPolicy(strategy="boost")
    with pytest.raises(ValueError, match=r"\[1, 3\]"):
        VmPolicy(tau_high=0.5)
    with pytest.raises(ValueError):
        VmPolicy(tau_low=0.5)
    with pytest.raises(ValueError):
        VmPolicy(weights=(np.inf,))


def test_vm_score_examples():
    assert sig.vm_score([np.array([2.0]), np.array([0.1])], VmPolicy(weights=(0.0, 0.0)))[0] == 0.0
    np.testing.assert_array_equal(sig.vm_score([np.array([1.5, 2.5])], VmPolicy(weights=(1.0,))), [1.5, 2.5])
    assert sig.vm_score([np.array([2.0]), np.array([0.1])], VmPolicy(weights=(0.5, 2.0)))[0] == pytest.approx(1.2)


def test_vm_score_length_mismatch():
    with pytest.raises(ValueError):
        sig.vm_score([np.ones(2)], VmPolicy(weights=(1.0, 1.0)))


# ------------------------------------------------------------------ integrate


def test_additive_hinge_boundary():
    pol = VmPolicy(strategy="additive", tau_high=1.5, boost_weight=2.0)
    assert sig.integrate([3.0], [1.5], pol)[0] == 3.0
    assert sig.integrate([3.0], [2.0], pol)[0] == 4.0


def test_filter_boundary():
    pol = VmPolicy(strategy="filter", tau_low=-1.0)
    assert sig.integrate([3.0], [-1.01], pol)[0] == 0.0
    assert sig.integrate([3.0], [-1.0], pol)[0] == 3.0


def test_reweight_sigmoid_center():
    pol = VmPolicy(strategy="reweight", reweight_form="sigmoid")
    assert sig.integrate([4.0], [0.0], pol)[0] == 2.0


def test_reweight_power_and_fallback(caplog):
    pol = VmPolicy(strategy="reweight", reweight_alpha=2.0)
    assert sig.integrate([1.0], [0.0], pol, p=[4.0], mu=[2.0])[0] == 4.0
    with caplog.at_level(logging.WARNING):
        out = sig.integrate([1.0, 1.0], [0.5, 0.0], pol, p=[1.0, 4.0], mu=[-1.0, 2.0])
    assert out[0] == pytest.approx(expit(0.5))
    assert out[1] == 4.0
    assert "undefined" in caplog.text
    with pytest.raises(ValueError, match="p and mu"):
        sig.integrate([1.0], [0.0], pol)


def test_none_strategy_passes_through():
    s = np.array([3.0, 1.0, 2.0])
    np.testing.assert_array_equal(sig.integrate(s, [5.0, -5.0, 0.0], VmPolicy()), s)


@settings(max_examples=100)
@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=30), st.floats(0.0, 10.0), st.floats(1.0, 3.0))
def test_additive_never_decreases(rows, w, tau):
    s, z = map(np.array, zip(*rows))
    out = sig.integrate(s, z, VmPolicy(strategy="additive", boost_weight=w, tau_high=tau))
    assert np.all(out >= s)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(0.01, 100), st.floats(-5, 5)), min_size=1, max_size=30))
def test_filter_preserves_survivor_order(rows):
    s, z = map(np.array, zip(*rows))
    pol = VmPolicy(strategy="filter", tau_low=-1.0)
    out = sig.integrate(s, z, pol)
    keep = z >= pol.tau_low
    np.testing.assert_array_equal(np.argsort(out[keep], kind="stable"), np.argsort(s[keep], kind="stable"))


# ------------------------------------------------------------------ bucket tables


def test_two_point_bucket_stats():
    t = sig.build_bucket_table([1.0, 1.5], [2.0, 4.0], [0.0, 10.0])
    assert t.mean[0] == 3.0 and t.var[0] == 1.0


def test_nearest_rank_p95():
    t = sig.build_bucket_table(np.ones(100), np.arange(1.0, 101.0), [0.0, 2.0])
    assert t.p95[0] == 95.0
    assert sig.nearest_rank([5.0], 0.95) == 5.0


def test_values_outside_edges_use_end_buckets():
    t = sig.build_bucket_table([1.0, 5.0], [1.0, 2.0], [0.0, 2.0, 4.0])
    np.testing.assert_array_equal(t.bucket_of([-3.0, 0.0, 2.0, 100.0]), [0, 0, 1, 1])


def test_empty_bucket_is_undefined_and_correction_errors():
    t = sig.build_bucket_table([1.0, 1.2], [1.0, 2.0], [0.0, 2.0, 4.0])
    assert list(t.defined()) == [True, False]
    assert np.isnan(t.mean[1])
    with pytest.raises(SparsityError):
        sig.naive_correction([1.0], t, [3.0])
    with pytest.raises(SparsityError):
        sig.vvp95([1.0], t, [3.0])


def test_bad_edges_rejected():
    with pytest.raises(ValueError):
        sig.build_bucket_table([1.0], [1.0], [2.0, 1.0])


def test_naive_correction_examples():
    t = sig.build_bucket_table([0.5, 0.5], [1.0, 5.0], [0.0, 1.0])  # mean 3, sd 2
    assert sig.naive_correction([3.0], t, [0.5], "mean")[0] == 0.0
    assert sig.naive_correction([3.0], t, [0.5], "z")[0] == 0.0
    assert sig.naive_correction([5.0], t, [0.5], "z")[0] == 1.0


def test_bucket_table_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    t = sig.build_bucket_table(rng.uniform(0, 10, 500), rng.normal(size=500), [0.0, 2.5, 5.0, 10.0], "dur", 3)
    t.to_csv(tmp_path / "t.csv")
    back = sig.BucketTable.from_csv(tmp_path / "t.csv")
    for f in ("edges", "count", "mean", "var", "p95"):
        np.testing.assert_array_equal(getattr(back, f), getattr(t, f))
    assert back.snapshot == 3 and back.attribute == "dur"


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=50),
       st.lists(st.floats(0.1, 5.0), min_size=1, max_size=6))
def test_every_value_in_exactly_one_bucket(values, widths):
    edges = np.concatenate([[0.0], np.cumsum(widths)])
    t = sig.build_bucket_table(values, np.ones(len(values)), edges)
    assert t.count.sum() == len(values)


def test_bucket_table_agrees_with_bucket_one_hot_branch():
    """z-correction from the table and RPS from a bucket-equivalent branch coincide."""
    rng = np.random.default_rng(1)
    k = 4
    bucket = rng.integers(0, k, size=4000)
    p = rng.normal(loc=bucket * 0.5, scale=0.2 + 0.1 * bucket)
    xp = np.eye(k)[bucket]
    branch = MbdBranch(BranchConfig("t", BiasFeatureSet("b", ("x",)), trunk=(), batch_size=None, steps=3000,
                                    lr=0.05), input_dim=k)
    fit_moments(branch, xp, p)
    table = sig.build_bucket_table(bucket + 0.5, p, np.arange(k + 1.0))
    est = branch.estimate(np.eye(k))
    np.testing.assert_allclose(est.mu, table.mean, atol=1e-2)
    np.testing.assert_allclose(est.var, table.var, rtol=0.05)


# ------------------------------------------------------------------ threshold baselines


def test_nts_examples():
    assert sig.nts(6.0, 0.0, 6.0) == 0.5
    assert sig.nts(10.0, 0.2, 6.0, c=1.0) == pytest.approx(expit(2.0), abs=1e-15)
    assert round(float(sig.nts(10.0, 0.2, 6.0, c=1.0)), 4) == 0.8808
    assert sig.nts(10.0, 1.0, 6.0, c=0.5) == pytest.approx(expit(-3.0))


def test_nts_validation():
    with pytest.raises(ValueError):
        sig.nts(1.0, 1.5, 1.0)
    with pytest.raises(ValueError):
        sig.nts(1.0, 0.5, 1.0, c=0.0)


def test_vvp95_indicator():
    t = sig.build_bucket_table(np.ones(100), np.arange(1.0, 101.0), [0.0, 2.0])
    np.testing.assert_array_equal(sig.vvp95([94.0, 95.0, 99.0], t, [1.0, 1.0, 1.0]), [0.0, 1.0, 1.0])


@settings(max_examples=50)
@given(st.lists(st.floats(0, 600), min_size=1, max_size=20), st.floats(0, 1), st.floats(0.01, 5))
def test_vvp95_nts_bounded(watch, pskip, c):
    t = sig.build_bucket_table([1.0] * 5, [1.0, 2.0, 3.0, 4.0, 5.0], [0.0, 2.0])
    out = sig.vvp95_nts(watch, pskip, np.full(len(watch), 3.0), t, np.ones(len(watch)), c)
    assert np.all((out >= 0) & (out <= 1))
