import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from mbdlab import numerics as nx
from mbdlab.mbd import (DURATION_DEBIAS, VAR_FLOOR, BiasFeatureSet, BranchConfig, MbdBranch, build_branch,
                        fit_moments, logit_target, mean_loss, pinball_loss, project, train_branch, variance_loss)
from mbdlab.ranker import RankerConfig, build_ranker
from mbdlab.synthenv import feature_columns, generate, GeneratorConfig

COLS = feature_columns(4)


def node(tape, value):
    return tape.constant(np.atleast_1d(np.asarray(value, dtype=float)))


def leaf(tape, store, name, value):
    store.add(name, np.atleast_1d(np.asarray(value, dtype=float)))
    return tape.param(store, name)


def constant_branch(**kw):
    return MbdBranch(BranchConfig("t", BiasFeatureSet("c", ("x",)), trunk=(), **kw), input_dim=1)


# ------------------------------------------------------------------ feature sets


def test_feature_set_validation():
    with pytest.raises(ValueError, match="empty"):
        BiasFeatureSet("e", ())
    with pytest.raises(ValueError, match="duplicate"):
        BiasFeatureSet("d", ("item_length", "item_length"))
    with pytest.raises(KeyError, match="item_color"):
        BiasFeatureSet("x", ("item_color",)).expand(COLS)
    with pytest.raises(ValueError, match="duplicate columns"):
        BiasFeatureSet("o", ("user_full", "user_patience")).expand(COLS)


def test_project_full_set_is_identity():
    x = np.random.default_rng(0).normal(size=(4, len(COLS)))
    np.testing.assert_array_equal(project(x, BiasFeatureSet("all", tuple(COLS)), COLS), x)


def test_project_singleton_duration():
    x = np.random.default_rng(0).normal(size=(4, len(COLS)))
    xp = project(x, BiasFeatureSet("len", ("item_length",)), COLS)
    assert xp.shape == (4, 1)
    np.testing.assert_array_equal(xp[:, 0], x[:, COLS.index("item_log_duration")])


def test_bundled_feature_sets_resolve():
    assert DURATION_DEBIAS.expand(COLS)[-1] == "item_log_duration"
    assert len(DURATION_DEBIAS.expand(COLS)) == 10


# ------------------------------------------------------------------ losses


def test_mean_loss_exact_fit_is_zero():
    tape = nx.Tape()
    assert mean_loss(node(tape, 1.5), node(tape, 1.5)).value == 0.0


def test_mean_loss_value_and_gradients():
    store = nx.ParamStore(0)
    tape = nx.Tape()
    p = leaf(tape, store, "ranker.p", 2.0)
    mu = leaf(tape, store, "mbd.mu", 0.0)
    loss = mean_loss(p, mu)
    tape.backward(loss)
    assert loss.value == 4.0
    assert store.grads["mbd.mu"][0] == -4.0
    assert store.grads["ranker.p"][0] == 0.0


def test_mean_loss_minimizer_is_batch_mean():
    branch = constant_branch(lr=0.05, optimizer="sgd", batch_size=None, warm_start=False, lr_final=1.0)
    p = np.array([1.0, 2.0, 3.0])
    fit_moments(branch, np.zeros((3, 1)), p, steps=2000)
    assert branch.estimate(np.zeros((1, 1))).mu[0] == pytest.approx(2.0, abs=1e-6)


def test_variance_loss_exact_fit_is_zero():
    tape = nx.Tape()
    assert variance_loss(node(tape, 3.0), node(tape, 1.0), node(tape, 4.0)).value == 0.0


def test_variance_loss_value_and_gradients():
    store = nx.ParamStore(0)
    tape = nx.Tape()
    p = leaf(tape, store, "ranker.p", 3.0)
    mu = leaf(tape, store, "mbd.mu", 1.0)
    var = leaf(tape, store, "mbd.var", 0.0)
    loss = variance_loss(p, mu, var)
    tape.backward(loss)
    assert loss.value == 16.0
    assert store.grads["mbd.var"][0] == -8.0
    assert store.grads["mbd.mu"][0] == 0.0
    assert store.grads["ranker.p"][0] == 0.0


def test_variance_loss_minimizer_is_mean_squared_residual():
    # residuals^2 in {0, 4}: stationary point of the variance loss at sigma^2 = 2
    store = nx.ParamStore(0)
    tape = nx.Tape()
    var = leaf(tape, store, "v", [2.0, 2.0])
    tape.backward(variance_loss(node(tape, [1.0, 3.0]), node(tape, [1.0, 1.0]), var))
    assert store.grads["v"].sum() == 0.0


def test_logit_target_values():
    assert logit_target(0.5) == 0.0
    assert logit_target(0.01) == pytest.approx(np.log(0.01 / 0.99), abs=1e-12)
    assert round(float(logit_target(0.01)), 4) == -4.5951
    with pytest.raises(ValueError):
        logit_target([1.2])


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6))
def test_logit_round_trip(p):
    assert abs(expit(logit_target(p)) - p) <= 1e-9


@pytest.mark.parametrize("tau,p,q,expected", [(0.5, 4.0, 2.0, 1.0), (0.9, 10.0, 8.0, 1.8), (0.9, 8.0, 10.0, 0.2)])
def test_pinball_unit_cases(tau, p, q, expected):
    tape = nx.Tape()
    assert pinball_loss(node(tape, p), node(tape, q), tau).value == pytest.approx(expected, abs=1e-12)


def test_pinball_rejects_bad_level():
    tape = nx.Tape()
    with pytest.raises(ValueError):
        pinball_loss(node(tape, 1.0), node(tape, 1.0), 1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(-50, 50), st.floats(-50, 50))
def test_pinball_non_negative(tau, p, q):
    tape = nx.Tape()
    assert pinball_loss(node(tape, p), node(tape, q), tau).value >= 0.0


# ------------------------------------------------------------------ branch


def test_zero_weight_branch_is_constant():
    branch = MbdBranch(BranchConfig("t", BiasFeatureSet("c", ("x",)), trunk=(8,)), input_dim=3)
    for name in branch.param_names:
        branch.store[name][...] = 0.0
    branch.store[f"{branch.prefix}.mean.b0"][...] = 0.4
    branch.store[f"{branch.prefix}.var.b0"][...] = -1.0
    est = branch.estimate(np.random.default_rng(0).normal(size=(5, 3)))
    np.testing.assert_array_equal(est.mu, 0.4)
    np.testing.assert_allclose(est.var, np.exp(-1.0), rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(-200, 200))
def test_variance_respects_floor(raw_bias):
    branch = constant_branch()
    branch.store[f"{branch.prefix}.var.w0"][...] = 0.0
    branch.store[f"{branch.prefix}.var.b0"][...] = raw_bias
    var = branch.estimate(np.zeros((2, 1))).var
    assert np.all(var >= VAR_FLOOR) and np.all(np.isfinite(var))


def test_branch_rejects_wrong_width():
    with pytest.raises(nx.ShapeError):
        constant_branch().estimate(np.zeros((2, 3)))


def test_space_defaults():
    data = generate(GeneratorConfig(n_users=10, n_items=50, n_interactions=500))
    ranker = build_ranker(data)
    assert build_branch(BranchConfig("like", DURATION_DEBIAS), ranker).space == "logit"
    assert build_branch(BranchConfig("watch_time", DURATION_DEBIAS), ranker).space == "identity"
    with pytest.raises(ValueError, match="binary"):
        build_branch(BranchConfig("watch_time", DURATION_DEBIAS, space="logit"), ranker)


def test_branch_params_disjoint_from_ranker():
    data = generate(GeneratorConfig(n_users=10, n_items=50, n_interactions=500))
    ranker = build_ranker(data)
    branch = build_branch(BranchConfig("watch_time", DURATION_DEBIAS), ranker)
    assert not set(branch.param_names) & set(ranker.param_names)


def test_checkpoint_round_trip(tmp_path):
    data = generate(GeneratorConfig(n_users=10, n_items=50, n_interactions=500))
    ranker = build_ranker(data)
    branch = build_branch(BranchConfig("like", DURATION_DEBIAS, quantiles=(0.5,), steps=20), ranker)
    train_branch(branch, ranker, data)
    branch.save(tmp_path / "b.json")
    back = MbdBranch.load(tmp_path / "b.json")
    a, b = branch.estimate_features(data.X), back.estimate_features(data.X)
    np.testing.assert_array_equal(a.mu, b.mu)
    np.testing.assert_array_equal(a.var, b.var)
    np.testing.assert_array_equal(a.quantiles[0.5], b.quantiles[0.5])
    assert back.space == "logit"


def test_non_finite_targets_are_skipped_and_counted():
    branch = constant_branch(steps=5)
    trace = fit_moments(branch, np.zeros((4, 1)), np.array([1.0, np.nan, 2.0, np.inf]))
    assert trace.skipped == 2
    assert np.all(np.isfinite(branch.estimate(np.zeros((1, 1))).mu))


def test_crossings_are_counted_not_fixed():
    from mbdlab.mbd import DistributionEstimate
    est = DistributionEstimate(np.zeros(3), np.ones(3), {0.1: np.array([0.0, 1.0, 0.0]),
                                                         0.9: np.array([1.0, 0.0, 1.0])})
    assert est.crossings() == 1


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["watch_time", "like", "loop"]))
def test_aux_losses_never_reach_ranker(seed, task):
    """Zero leakage: accumulated ranker gradients from the branch losses are exactly 0."""
    data = generate(GeneratorConfig(n_users=10, n_items=50, n_interactions=200, seed=seed))
    ranker = build_ranker(data, config=RankerConfig(seed=seed))
    branch = build_branch(BranchConfig(task, DURATION_DEBIAS, quantiles=(0.1, 0.9), seed=seed), ranker)
    tape = nx.Tape()
    ranker.store.zero_grad()
    Xn = ranker.schema.normalize(data.X)
    outs = ranker.forward(tape, Xn)
    p = nx.stop_gradient(outs[task])
    aux = branch.aux_loss(tape, branch.project(data.X), p)
    tape.backward(aux)
    for name in ranker.param_names:
        assert not np.any(ranker.store.grads[name])


# ------------------------------------------------------------------ default-world behaviour


def test_branch_is_unbiased_on_held_out(default_world):
    for task in ("watch_time", "like", "loop"):
        p, keep = default_world.signal(task)
        est = default_world.branches[task].estimate_features(default_world.test.X)
        assert abs(np.mean(p[keep] - est.mu[keep])) < 0.02, task


def test_watch_time_mean_rises_with_duration(default_world):
    branch = default_world.branches["watch_time"]
    X = np.repeat(default_world.test.X[:1], 5, axis=0)
    j = COLS.index("item_log_duration")
    X[:, j] = np.log([5.0, 20.0, 60.0, 200.0, 600.0])
    assert np.all(np.diff(branch.estimate_features(X).mu) > 0)


def test_quantile_coverage_on_held_out(default_world):
    for task in ("watch_time", "like"):
        p, keep = default_world.signal(task)
        est = default_world.branches[task].estimate_features(default_world.test.X)
        for tau, q in est.quantiles.items():
            assert abs(np.mean(p[keep] < q[keep]) - tau) <= 0.03, (task, tau)
