import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import integrate, special, stats

from milpool import tensor as T
from milpool.data import METAL_BALLS, DatasetSplit, MixtureSpec, RawBag, generate_metal_balls, stratified_split
from milpool.errors import InputError, NumericError, ParameterError, TrainingError
from milpool.model import LayerSpec, ModelSpec, TaskKind, build_model
from milpool.pooling import PoolingSpec
from milpool.rng import RngStream
from milpool.stats import (binomial_two_sided, chi2_upper_1df, mcnemar_from_counts, mcnemar_test, paired_t_test,
                           t_two_sided)
from milpool.train import (AdamState, CVReport, FoldResult, TrainConfig, adam_step, cross_validate, evaluate,
                           train_model, write_history_csv)


# -- ADAM ---------------------------------------------------------------------------

def test_adam_zero_gradient_fixed_point():
    p = {"w": T.Tensor([1.0, -2.0])}
    state = AdamState()
    for _ in range(5):
        adam_step(p, {"w": np.zeros(2)}, state, 0.1)
    assert p["w"].values.tolist() == [1.0, -2.0] and state.t == 5


def test_adam_first_step_by_hand():
    p = {"w": T.Tensor([1.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), 0.1)
    assert p["w"].values[0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_second_step_same_magnitude():
    p = {"w": T.Tensor([1.0])}
    state = AdamState()
    adam_step(p, {"w": np.array([0.3])}, state, 0.01)
    first = 1.0 - p["w"].values[0]
    before = p["w"].values[0]
    adam_step(p, {"w": np.array([0.3])}, state, 0.01)
    assert abs(before - p["w"].values[0]) == pytest.approx(first, rel=0.01)


def test_adam_matches_reference_recurrence():
    gen = np.random.default_rng(0)
    grads = gen.normal(size=(6, 3))
    p = {"w": T.Tensor(np.ones(3))}
    state = AdamState()
    ref, m, v = np.ones(3), np.zeros(3), np.zeros(3)
    lr, lam = 0.05, 0.1
    for t, g in enumerate(grads, 1):
        adam_step(p, {"w": g}, state, lr, lam)
        g = g + lam * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"].values, ref, rtol=1e-13)


def test_adam_weight_decay_is_coupled():
    p = {"w": T.Tensor([2.0])}
    adam_step(p, {"w": np.zeros(1)}, AdamState(), 0.1, weight_decay=0.5)
    # the decay term enters the moments, so the first step is a full lr step
    assert p["w"].values[0] == pytest.approx(2.0 - 0.1, abs=1e-7)


def test_adam_non_finite_names_block():
    with pytest.raises(NumericError, match="head.weight"):
        adam_step({"head.weight": T.Tensor([1.0])}, {"head.weight": np.array([np.nan])}, AdamState(), 0.1)


def test_train_config_problems():
    cfg = TrainConfig(lr=0, weight_decay=-1, batch_size=0, max_epochs=0, patience=0, monitor="auc")
    probs = cfg.problems()
    assert len(probs) == 6
    assert any("nothing to train" in p for p in probs)


# -- evaluation ---------------------------------------------------------------------

def _const_bags(values, labels, key):
    return [RawBag(f"b{i}", np.full((3, 1), v), {key: y}) for i, (v, y) in enumerate(zip(values, labels))]


def _linear_model(task, weight, bias):
    spec = ModelSpec(1, [], PoolingSpec("mean"), [], task)
    model = build_model(spec, RngStream(0))
    model.set_state({"head.weight": np.array(weight, dtype=float), "head.bias": np.array(bias, dtype=float)})
    return model


def test_evaluate_perfect_predictor():
    task = TaskKind("pos_neg")
    bags = _const_bags([0.1, 0.9, 0.2, 0.8], [0, 1, 0, 1], "pos_neg")
    m = evaluate(_linear_model(task, [[-10, 10]], [5, -5]), bags)
    assert m.accuracy == 1.0
    assert m.confusion.tolist() == [[2, 0], [0, 2]]


def test_evaluate_constant_predictor():
    task = TaskKind("multi_class", 3)
    bags = _const_bags([0.1] * 6, [0, 1, 2, 0, 1, 2], "multi_class")
    m = evaluate(_linear_model(task, [[0, 0, 0]], [1, 0, 0]), bags)
    assert m.accuracy == pytest.approx(1 / 3)
    assert m.confusion[:, 0].tolist() == [2, 2, 2]


def test_evaluate_regression_offset():
    task = TaskKind("regression")
    ys = [0.1, 0.4, 0.7]
    m = evaluate(_linear_model(task, [[1.0]], [0.1]), _const_bags(ys, ys, "regression"))
    assert m.mae == pytest.approx(0.1, abs=1e-12)
    assert m.score == m.mae and m.confusion is None


def test_evaluate_multi_task_accuracies():
    task = TaskKind("multi_task", 2)
    bags = _const_bags([1.0, 1.0], [(1, 0), (1, 1)], "multi_task")
    # outputs sigmoid(5), sigmoid(-5): predicts (1, 0) for every bag
    m = evaluate(_linear_model(task, [[5, -5]], [0, 0]), bags)
    assert m.per_task_accuracy == [1.0, 0.5]
    assert m.accuracy == 0.5


def test_evaluate_resampling_averages_outputs():
    task = TaskKind("pos_neg")
    model = _linear_model(task, [[-10, 10]], [5, -5])
    bag = RawBag("x", np.array([[0.0], [0.2], [0.9]]), {"pos_neg": 0})
    rng = RngStream(3)
    m = evaluate(model, [bag], task, resamples=40, rng=rng, bag_size=2)
    gen = rng.generator()
    from milpool.data import subsample_indices
    from milpool.model import forward_bag
    outs = [forward_bag(model, bag.instances[subsample_indices(3, 2, gen)]).values for _ in range(40)]
    np.testing.assert_allclose(m.outputs[0], np.mean(outs, axis=0), atol=1e-14)


def test_evaluate_rejects_empty_and_bad_resamples():
    model = _linear_model(TaskKind("pos_neg"), [[1, -1]], [0, 0])
    with pytest.raises(InputError):
        evaluate(model, [])
    with pytest.raises(ParameterError):
        evaluate(model, _const_bags([0.5], [0], "pos_neg"), resamples=0)


# -- training -----------------------------------------------------------------------

def _metal_split(per_class=20, balls=10, seed=0):
    bags = generate_metal_balls(METAL_BALLS, per_class, balls, RngStream(seed))
    return stratified_split(bags, rng=RngStream(seed).child(1))


def _metal_model(kind="distribution", seed=0):
    return build_model(ModelSpec(1, [], PoolingSpec(kind, 101, 0.005), [], TaskKind("multi_class", 3)),
                       RngStream(seed))


def test_early_stopping_patience_one_returns_best_weights():
    split = _metal_split()
    # a learning rate this small leaves the validation accuracy unchanged after epoch 1
    cfg = TrainConfig(lr=1e-12, batch_size=8, max_epochs=50, patience=1, loss_tiebreak=False)
    res = train_model(_metal_model(), split, cfg, RngStream(1))
    assert res.epochs_run == 2 and res.best_epoch == 1
    ref = train_model(_metal_model(), split, TrainConfig(lr=1e-12, batch_size=8, max_epochs=1), RngStream(1))
    for k, v in ref.model.get_state().items():
        assert np.array_equal(res.model.params[k].values, v)


def test_best_state_matches_history_best():
    split = _metal_split()
    cfg = TrainConfig(lr=1e-2, batch_size=16, max_epochs=40, patience=10)
    res = train_model(_metal_model("mean"), split, cfg, RngStream(2))
    best = max(h.val_metric for h in res.history)
    assert res.best_metric == best
    val = evaluate(res.model, split.validation)
    assert val.accuracy == best
    assert val.loss == pytest.approx(res.history[res.best_epoch - 1].val_loss, rel=1e-12)


def test_training_loss_decreases_on_tiny_overfit_set():
    bags = generate_metal_balls(METAL_BALLS, 1, 8, RngStream(4))
    val = generate_metal_balls(METAL_BALLS, 1, 8, RngStream(6))[:1]
    val[0].bag_id = "val0"
    split = DatasetSplit(bags, val, [])
    cfg = TrainConfig(lr=1e-3, batch_size=3, max_epochs=5, patience=10, monitor="val_loss")
    res = train_model(_metal_model(), split, cfg, RngStream(5))
    losses = [h.train_loss for h in res.history]
    assert len(losses) == 5 and losses[-1] < losses[0]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_training_is_deterministic_and_seeded_from_config():
    split = _metal_split()
    cfg = TrainConfig(lr=1e-2, batch_size=16, max_epochs=5, seed=9)
    a = train_model(_metal_model(), split, cfg)
    b = train_model(_metal_model(), split, cfg, RngStream(9))
    assert [h.train_loss for h in a.history] == [h.train_loss for h in b.history]


def test_bag_subsampling_during_training():
    split = _metal_split(balls=30)
    for resample in (True, False):
        cfg = TrainConfig(lr=1e-2, batch_size=8, max_epochs=3, bag_size=7, resample_each_epoch=resample)
        res = train_model(_metal_model(), split, cfg, RngStream(0))
        assert res.epochs_run == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_training_error():
    bags = [RawBag(f"b{i}", np.full((2, 1), 1e300), {"regression": 0.5}) for i in range(4)]
    split = DatasetSplit(bags[:3], bags[3:], [])
    model = build_model(ModelSpec(1, [], PoolingSpec("mean"), [], TaskKind("regression")), RngStream(0))
    model.set_state({"head.weight": np.array([[1e10]]), "head.bias": np.zeros(1)})
    with pytest.raises(TrainingError) as exc:
        train_model(model, split, TrainConfig(max_epochs=3), RngStream(0))
    assert exc.value.history == []


def test_invalid_config_and_empty_split():
    split = _metal_split()
    with pytest.raises(ParameterError, match="nothing to train"):
        train_model(_metal_model(), split, TrainConfig(max_epochs=0), RngStream(0))
    with pytest.raises(InputError):
        train_model(_metal_model(), DatasetSplit(split.train, [], []), TrainConfig(), RngStream(0))


def test_history_csv_rows(tmp_path):
    split = _metal_split()
    res = train_model(_metal_model(), split, TrainConfig(lr=1e-2, max_epochs=4), RngStream(0))
    path = tmp_path / "h.csv"
    write_history_csv(res.history, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_metric" and len(lines) == 1 + res.epochs_run


# -- cross-validation ---------------------------------------------------------------

def _separable_bags(n):
    return [RawBag(f"s{i}", np.full((3, 1), 0.9 if i % 2 else 0.1), {"pos_neg": i % 2}) for i in range(n)]


def _cv_spec():
    return ModelSpec(1, [], PoolingSpec("mean"), [], TaskKind("pos_neg"))


def test_cv_two_folds_on_four_bags():
    report = cross_validate(_separable_bags(4), _cv_spec(), TrainConfig(max_epochs=2), k=2, repeats=1,
                            rng=RngStream(0))
    assert [(f.repeat, f.fold) for f in report.folds] == [(0, 0), (0, 1)]
    assert all(len(f.predictions) == 2 for f in report.folds)


def test_cv_separable_data_scores_perfectly():
    # eight bags leave three training bags of both classes after the holdout
    report = cross_validate(_separable_bags(8), _cv_spec(), TrainConfig(lr=0.1, max_epochs=60, patience=60),
                            k=2, repeats=1, rng=RngStream(0))
    assert [f.score for f in report.folds] == [1.0, 1.0]


def test_cv_folds_partition_each_repeat():
    bags = _separable_bags(12)
    report = cross_validate(bags, _cv_spec(), TrainConfig(lr=0.1, max_epochs=3), k=3, repeats=2, rng=RngStream(1))
    for r in range(2):
        ids = [p[0] for f in report.folds if f.repeat == r for p in f.predictions]
        assert sorted(ids) == sorted(b.bag_id for b in bags)


def test_cv_deterministic_and_independent_of_jobs(tmp_path):
    kw = dict(k=3, repeats=2, rng=RngStream(5))
    bags, spec, cfg = _separable_bags(12), _cv_spec(), TrainConfig(lr=0.05, max_epochs=5)
    a = cross_validate(bags, spec, cfg, **kw)
    b = cross_validate(bags, spec, cfg, **kw)
    c = cross_validate(bags, spec, cfg, jobs=2, **kw)
    assert a.summary() == b.summary() == c.summary()
    for report, name in ((a, "a"), (c, "c")):
        report.write(tmp_path / name)
    for f in ("cv_folds.csv", "cv_predictions.csv", "cv_summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "c" / f).read_bytes()
    assert (tmp_path / "a" / "cv_folds.csv").read_text().splitlines()[0] == "repeat,fold,score"


def test_cv_report_aggregates():
    scores = [[0.9, 0.8, 1.0], [0.7, 0.9, 0.6]]
    folds = [FoldResult(r, f, s) for r, row in enumerate(scores) for f, s in enumerate(row)]
    folds.append(FoldResult(1, 3, None, error="diverged"))
    rep = CVReport(TaskKind("pos_neg"), 4, 2, folds)
    flat = np.ravel(scores)
    assert rep.mean == pytest.approx(flat.mean())
    assert rep.stderr == pytest.approx(flat.std(ddof=1) / math.sqrt(6))
    assert rep.repeat_means == pytest.approx([0.9, 2.2 / 3])
    s = rep.summary()
    assert s["n_scores"] == 6 and s["failed_folds"] == [{"repeat": 1, "fold": 3, "error": "diverged"}]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cv_records_diverged_fold_without_aborting():
    bags = [RawBag(f"b{i}", np.full((2, 1), 1e300 if i == 0 else 0.5), {"regression": 0.5}) for i in range(6)]
    spec = ModelSpec(1, [], PoolingSpec("mean"), [], TaskKind("regression"))
    rep = cross_validate(bags, spec, TrainConfig(lr=1e300, max_epochs=2), k=3, repeats=1, rng=RngStream(0))
    assert len(rep.folds) == 3
    assert any(f.error for f in rep.folds)


# -- statistical tests against independent oracles --------------------------------------

def _binomial_oracle(b, c):
    n = b + c
    k = min(b, c)
    tail = sum(Fraction(math.comb(n, i), 2**n) for i in range(k + 1))
    return float(min(Fraction(1), 2 * tail))


def test_mcnemar_exact_example():
    res = mcnemar_from_counts(2, 8)
    assert res.exact and res.b == 2 and res.c == 8
    assert res.p_value == pytest.approx(_binomial_oracle(2, 8), abs=1e-12)
    assert res.p_value == pytest.approx(stats.binomtest(2, 10, 0.5).pvalue, abs=1e-12)
    assert abs(res.p_value - 0.1094) <= 1e-4


def test_mcnemar_chi_square_example():
    res = mcnemar_from_counts(40, 10)
    assert not res.exact
    assert res.statistic == pytest.approx(29**2 / 50) == 16.82
    assert res.p_value == pytest.approx(stats.chi2.sf(16.82, 1), rel=1e-10)
    assert res.p_value < 0.001


def test_mcnemar_from_prediction_vectors():
    truth = [0] * 10 + [1] * 10
    a = truth[:]
    b = truth[:]
    for i in (0, 1):
        b[i] = 1 - b[i]
    for i in range(2, 10):
        a[i] = 1 - a[i]
    res = mcnemar_test(a, b, truth)
    assert (res.b, res.c) == (2, 8)
    swapped = mcnemar_test(b, a, truth)
    assert (swapped.b, swapped.c) == (8, 2) and swapped.p_value == res.p_value


def test_mcnemar_identical_is_degenerate():
    res = mcnemar_test([1, 0, 1], [1, 0, 1], [1, 1, 1])
    assert res.degenerate and res.p_value == 1.0


def test_mcnemar_tuple_labels_and_length_check():
    res = mcnemar_test([(1, 0), (0, 1)], [(1, 1), (0, 1)], [(1, 0), (0, 1)])
    assert (res.b, res.c) == (1, 0)
    with pytest.raises(InputError):
        mcnemar_test([1], [1, 0], [1])


@pytest.mark.parametrize("b,c", [(0, 3), (5, 5), (1, 12), (12, 12), (3, 21)])
def test_binomial_tail_matches_enumeration(b, c):
    assert binomial_two_sided(min(b, c), b + c) == pytest.approx(_binomial_oracle(b, c), abs=1e-15)


def test_chi2_tail_matches_scipy():
    for x in (0.0, 0.5, 3.84, 10.0, 40.0):
        assert chi2_upper_1df(x) == pytest.approx(stats.chi2.sf(x, 1), rel=1e-12, abs=1e-300)


def _t_oracle(t, df):
    """Two-sided tail by quadrature of the Student t density."""
    logc = special.gammaln((df + 1) / 2) - special.gammaln(df / 2) - 0.5 * math.log(df * math.pi)
    density = lambda x: math.exp(logc - (df + 1) / 2 * math.log1p(x * x / df))
    tail, _ = integrate.quad(density, abs(t), math.inf, epsabs=1e-14, epsrel=1e-12)
    return 2 * tail


def test_paired_t_example():
    res = paired_t_test([1, 2, 3], [0, 0, 0])
    assert res.t == pytest.approx(2 / (1 / math.sqrt(3)), rel=1e-12)
    assert res.df == 2
    assert abs(res.p_value - _t_oracle(res.t, 2)) <= 1e-6
    assert abs(res.p_value - 0.0742) <= 1e-4


@pytest.mark.parametrize("t,df", [(0.3, 1), (1.96, 10), (3.4641016, 2), (-2.5, 7), (5.0, 49)])
def test_t_tail_matches_quadrature(t, df):
    assert abs(t_two_sided(t, df) - _t_oracle(t, df)) <= 1e-6


def test_paired_t_degenerate_cases():
    same = paired_t_test([0.2, 0.4], [0.2, 0.4])
    assert same.degenerate and same.p_value == 1.0
    shifted = paired_t_test([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])
    assert shifted.degenerate and shifted.p_value == 0.0
    sym = paired_t_test([-1.0, 1.0], [0.0, 0.0])
    assert sym.t == 0 and sym.p_value == pytest.approx(1.0)


def test_paired_t_input_checks():
    with pytest.raises(InputError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(InputError):
        paired_t_test([1.0, 2.0], [1.0])
