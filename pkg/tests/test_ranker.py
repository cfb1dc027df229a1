import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logit

from mbdlab import numerics as nx
from mbdlab.ranker import DEFAULT_TASKS, FeatureSchema, RankerConfig, RankerModel, TaskSpec, build_ranker, train
from mbdlab.synthenv import Dataset, GeneratorConfig, feature_columns, generate


def toy_dataset(n=200, seed=0):
    rng = np.random.default_rng(seed)
    cols = feature_columns(4)
    X = rng.normal(size=(n, len(cols)))
    X[:, cols.index("item_format_video")] = 1.0
    X[:, cols.index("item_format_photo")] = 0.0
    sep = (X[:, 0] > 0).astype(float)
    return Dataset(cols, X, np.abs(X[:, 1]) * 10, sep, sep, np.zeros(n, dtype=np.int64),
                   np.arange(n), np.arange(n))


def copy_params(model):
    return {k: model.store[k].copy() for k in model.param_names}


@pytest.fixture(scope="module")
def trained_default():
    data = generate(GeneratorConfig())
    train_set, test_set = data.split(0.2, 0)
    model = build_ranker(train_set)
    train(model, train_set)
    return model, test_set


# ------------------------------------------------------------------ tasks


def test_task_spec_pairs_loss_with_kind():
    assert TaskSpec("like", "binary").loss == "bce"
    assert TaskSpec("watch_time", "regression", "log1p").loss == "squared_error"


@pytest.mark.parametrize("kwargs", [{"kind": "ordinal"}, {"kind": "regression", "transform": "sqrt"},
                                    {"kind": "binary", "transform": "log1p"}])
def test_task_spec_rejects_bad_combinations(kwargs):
    with pytest.raises(ValueError):
        TaskSpec("t", **kwargs)


def test_duplicate_task_names_rejected():
    schema = FeatureSchema.fit(feature_columns(), np.zeros((2, len(feature_columns()))))
    with pytest.raises(ValueError, match="duplicate"):
        RankerModel(schema, (TaskSpec("like", "binary"), TaskSpec("like", "binary")))


def test_one_head_per_task_and_disjoint_head_params():
    model = build_ranker(toy_dataset())
    heads = {t.name: [n for n in model.param_names if n.startswith(f"ranker.head.{t.name}.")] for t in model.tasks}
    assert all(heads.values())
    flat = [n for names in heads.values() for n in names]
    assert len(flat) == len(set(flat))


# ------------------------------------------------------------------ predict


def test_zero_weight_model_predicts_head_bias():
    model = build_ranker(toy_dataset())
    for name in model.param_names:
        model.store[name][...] = 0.0
    for t in model.tasks:
        model.store[f"ranker.head.{t.name}.b{model.heads[t.name].spec.n_layers - 1}"][...] = 0.7
    pred = model.raw_outputs(toy_dataset().X)
    for t in model.tasks:
        np.testing.assert_array_equal(pred[t.name], 0.7)


def test_binary_output_in_unit_interval_and_logit_round_trip():
    model = build_ranker(toy_dataset())
    pred = model.predict(toy_dataset().X)
    p = pred["like"]
    assert np.all((p > 0) & (p < 1))
    np.testing.assert_allclose(logit(p), pred["like_logit"], atol=1e-9)


def test_schema_mismatch_rejected():
    model = build_ranker(toy_dataset())
    with pytest.raises(nx.ShapeError):
        model.predict(np.zeros((3, 5)))
    other = toy_dataset()
    other.columns = list(reversed(other.columns))
    with pytest.raises(ValueError, match="schema"):
        train(model, other, epochs=1)


def test_one_hot_columns_not_rescaled():
    schema = FeatureSchema.fit(toy_dataset().columns, toy_dataset().X)
    j = schema.names.index("item_format_video")
    assert schema.means[j] == 0.0 and schema.scales[j] == 1.0


# ------------------------------------------------------------------ train


def test_zero_lr_leaves_params_unchanged():
    data = toy_dataset(10)
    model = build_ranker(data, config=RankerConfig(lr=0.0, optimizer="sgd"))
    before = copy_params(model)
    train(model, data, epochs=1)
    for k, v in before.items():
        np.testing.assert_array_equal(model.store[k], v)


def test_separable_binary_task_converges():
    # fixed-seed run: 50 epochs x 10 batches = 500 steps
    data = toy_dataset(200)
    model = build_ranker(data, (TaskSpec("like", "binary"),), RankerConfig(lr=1e-2, batch_size=20, epochs=50))
    train(model, data)
    p = np.clip(model.predict(data.X)["like"], 1e-12, 1 - 1e-12)
    bce = -np.mean(data.like * np.log(p) + (1 - data.like) * np.log(1 - p))
    assert bce < 0.1


@pytest.mark.parametrize("shuffle", [True, False])
def test_training_is_reproducible(shuffle):
    data = toy_dataset(120)
    traces = []
    for _ in range(2):
        model = build_ranker(data, config=RankerConfig(epochs=3, batch_size=16, shuffle=shuffle))
        traces.append(train(model, data).epoch_loss)
    assert traces[0] == traces[1]


def test_shuffled_and_unshuffled_traces_differ():
    data = toy_dataset(120)
    a = train(build_ranker(data, config=RankerConfig(epochs=2, batch_size=16, shuffle=True)), data).epoch_loss
    b = train(build_ranker(data, config=RankerConfig(epochs=2, batch_size=16, shuffle=False)), data).epoch_loss
    assert a != b


def test_empty_dataset_rejected():
    data = toy_dataset(10).subset(np.arange(0))
    with pytest.raises(ValueError, match="empty"):
        train(build_ranker(toy_dataset(10)), data)


def test_non_finite_loss_raises():
    data = toy_dataset(20)
    data.watch_time[3] = np.inf
    with pytest.raises(nx.NumericalError):
        train(build_ranker(data), data, epochs=1)


def test_unobserved_rows_do_not_drive_masked_task():
    data = toy_dataset(40)
    cols = data.columns
    # all photos: the loop task is unobserved everywhere
    data.X[:, cols.index("item_format_video")] = 0.0
    data.X[:, cols.index("item_format_photo")] = 1.0
    model = build_ranker(data)
    tape = nx.Tape()
    model.store.zero_grad()
    loss, _ = model.loss(tape, model.schema.normalize(data.X), model.targets(data), model.masks(data))
    tape.backward(loss)
    for name in model.param_names:
        if name.startswith("ranker.head.loop."):
            np.testing.assert_array_equal(model.store.grads[name], 0.0)


def test_checkpoint_round_trip(tmp_path):
    data = toy_dataset(50)
    model = build_ranker(data)
    train(model, data, epochs=1)
    model.save(tmp_path / "r.json", {"seed": 0})
    back = RankerModel.load(tmp_path / "r.json")
    for k, v in model.predict(data.X).items():
        np.testing.assert_array_equal(back.predict(data.X)[k], v)
    assert [t.name for t in back.tasks] == [t.name for t in DEFAULT_TASKS]


def test_trained_ranker_amplifies_duration_bias(trained_default):
    model, test_set = trained_default
    dur = test_set.col("item_duration")
    rho_pred = np.corrcoef(model.predict(test_set.X)["watch_time"], dur)[0, 1]
    rho_label = np.corrcoef(np.log1p(test_set.watch_time), dur)[0, 1]
    assert rho_pred > rho_label


_MODEL = build_ranker(toy_dataset(30))


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(30))))
def test_prediction_of_a_row_ignores_other_rows(order):
    X = toy_dataset(30).X
    full = _MODEL.predict(X)
    shuffled = _MODEL.predict(X[order])
    for k in full:
        np.testing.assert_allclose(shuffled[k], full[k][order], rtol=0, atol=1e-12)
