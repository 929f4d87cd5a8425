import csv
import itertools

import numpy as np
import pytest
from sklearn.base import clone

from specfed.nn import Dense, ModelWeights, Network, Sigmoid, default_sensing_layers
from specfed.sensing import (SpectrumSensingClassifier, evaluate, iq_to_input, micro_metrics, predict, predict_hard,
                             train_local, write_metrics_csv)
from specfed.specgen import GenerationConfig, generate


def oracle_counts(preds, labels):
    """Confusion counts by explicit iteration over every (record, subchannel) cell."""
    tp = fp = fn = tn = 0
    for p_row, t_row in zip(preds, labels):
        for p, t in zip(p_row, t_row):
            if p and t:
                tp += 1
            elif p and not t:
                fp += 1
            elif t:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def oracle_prf(tp, fp, fn):
    P = 1.0 if tp + fp == 0 else tp / (tp + fp)
    R = 1.0 if tp + fn == 0 else tp / (tp + fn)
    F = 0.0 if P + R == 0 else 2 * P * R / (P + R)
    return P, R, F


def _check_against_oracle(preds, labels):
    rep = micro_metrics(preds, labels)
    tp, fp, fn, tn = oracle_counts(preds, labels)
    assert (rep.row()["tp"], rep.row()["fp"], rep.row()["fn"], rep.row()["tn"]) == (tp, fp, fn, tn)
    assert (rep.precision, rep.recall, rep.f1) == oracle_prf(tp, fp, fn)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------
def test_hand_counted_example():
    rep = micro_metrics(np.array([[1, 1]]), np.array([[1, 0]]))
    assert rep.row()["tp"] == 1 and rep.row()["fp"] == 1 and rep.row()["fn"] == 0
    assert rep.precision == 0.5 and rep.recall == 1.0
    assert rep.f1 == pytest.approx(2 / 3)


def test_perfect_predictions():
    y = np.random.default_rng(0).integers(0, 2, (20, 16))
    rep = micro_metrics(y, y)
    assert rep.precision == rep.recall == rep.f1 == 1.0


def test_all_zero_predictions():
    y = np.array([[1, 0, 1], [0, 1, 0]])
    rep = micro_metrics(np.zeros_like(y), y)
    assert rep.precision == 1.0 and rep.recall == 0.0 and rep.f1 == 0.0


def test_counts_sum_to_records():
    rng = np.random.default_rng(1)
    p, y = rng.integers(0, 2, (30, 5)), rng.integers(0, 2, (30, 5))
    rep = micro_metrics(p, y)
    assert np.all(rep.tp + rep.fp + rep.fn + rep.tn == 30)


@pytest.mark.parametrize("M", [1, 2, 3])
def test_metrics_exhaustive_small_M(M):
    """Every (prediction, label) pair of a single record, plus every two-record batch."""
    vecs = [np.array(v) for v in itertools.product([0, 1], repeat=M)]
    for p, t in itertools.product(vecs, repeat=2):
        _check_against_oracle(p[None, :], t[None, :])
    for p1, t1, p2, t2 in itertools.product(vecs, repeat=4):
        _check_against_oracle(np.stack([p1, p2]), np.stack([t1, t2]))


def test_metrics_random_M16():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(1, 40))
        density = rng.uniform(0, 1, size=2)
        p = (rng.random((n, 16)) < density[0]).astype(int)
        t = (rng.random((n, 16)) < density[1]).astype(int)
        _check_against_oracle(p, t)


def test_f1_order_invariant():
    rng = np.random.default_rng(3)
    p, y = rng.integers(0, 2, (25, 16)), rng.integers(0, 2, (25, 16))
    perm = rng.permutation(25)
    assert micro_metrics(p, y).f1 == micro_metrics(p[perm], y[perm]).f1


def test_metrics_length_mismatch():
    with pytest.raises(ValueError):
        micro_metrics(np.zeros((3, 4)), np.zeros((2, 4)))


def test_metrics_csv_columns(tmp_path):
    rep = micro_metrics(np.array([[1, 0]]), np.array([[1, 1]]), regime="CL", uav=1, snr_db=10.0)
    write_metrics_csv(tmp_path / "m.csv", [rep])
    with open(tmp_path / "m.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["regime", "uav", "snr_db", "precision", "recall", "f1", "tp", "fp", "fn", "tn", "n"]
    assert rows[1][:2] == ["CL", "1"] and rows[1][-1] == "1"


# ---------------------------------------------------------------------------
# input handling
# ---------------------------------------------------------------------------
def test_iq_to_input_layout_and_normalization():
    x = np.array([[1 + 2j, 3 - 1j]])
    raw = iq_to_input(x, "none")
    assert raw.tolist() == [[[1.0, 3.0], [2.0, -1.0]]]
    unit = iq_to_input(5 * x, "record")
    assert np.mean(unit[:, 0] ** 2 + unit[:, 1] ** 2) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        iq_to_input(x, "bogus")
    with pytest.raises(ValueError):
        iq_to_input(np.array([[np.nan + 0j]]), "none")


# ---------------------------------------------------------------------------
# training and prediction
# ---------------------------------------------------------------------------
@pytest.fixture(scope="module")
def small():
    return generate(GenerationConfig(slots=30, seed=5))[0]


def _tiny_net(J=32, M=16):
    return Network([Dense(M), Sigmoid()], (2, J))


def test_lr_zero_keeps_model(small):
    net = _tiny_net()
    m = ModelWeights(net.init(np.random.default_rng(0)), net)
    m2, curve = train_local(m, small[0], epochs=2, lr=0.0, rng=np.random.default_rng(1))
    assert np.array_equal(m2.vector, m.vector) and len(curve) == 2


def test_constant_label_loss_descends(small):
    d = small[0].train
    const = d.subset(np.arange(len(d)))
    const.labels[:] = 0
    const.labels[:, 3] = 1
    net = _tiny_net()
    m = ModelWeights(net.init(np.random.default_rng(0)), net)
    _, curve = train_local(m, const, epochs=50, batch_size=16, lr=1.0, rng=np.random.default_rng(2),
                           use_split=False)
    assert curve[-1] < 0.05
    assert all(b <= a + 1e-9 for a, b in zip(curve, curve[1:]))


def test_training_deterministic(small):
    net = _tiny_net()
    w0 = net.init(np.random.default_rng(0))
    a = train_local(ModelWeights(w0, net), small[0], 2, rng=np.random.default_rng(9))
    b = train_local(ModelWeights(w0, net), small[0], 2, rng=np.random.default_rng(9))
    assert a[1] == b[1] and np.array_equal(a[0].vector, b[0].vector)


def test_train_rejects_bad_input(small):
    net = _tiny_net()
    m = ModelWeights(net.init(np.random.default_rng(0)), net)
    with pytest.raises(ValueError):
        train_local(m, small[0], epochs=0)
    with pytest.raises(ValueError):
        train_local(m, small[0].subset([]), epochs=1, use_split=False)


def test_zero_model_predicts_all_busy(small):
    net = Network(default_sensing_layers(16), (2, 32))
    m = ModelWeights(np.zeros(net.d), net)
    pv = predict(m, small[0].record(0))
    assert np.all(pv.probs == 0.5) and np.all(pv.hard == 1)
    again = predict(m, small[0].record(0))
    assert np.array_equal(pv.probs, again.probs)


def test_prediction_shape_mismatch(small):
    net = _tiny_net(J=16)
    m = ModelWeights(net.init(np.random.default_rng(0)), net)
    with pytest.raises(ValueError):
        predict(m, small[0].record(0))


def test_evaluate_reports_each_snr(small):
    net = _tiny_net()
    m = ModelWeights(net.init(np.random.default_rng(0)), net)
    reps = evaluate(m, small[1], regime="LL")
    assert [r.keys["snr_db"] for r in reps] == [-10.0, 0.0, 10.0, 20.0]
    assert all(r.keys["uav"] == 2 and r.keys["regime"] == "LL" for r in reps)
    assert sum(r.n for r in reps) == len(small[1].eval)
    hard = predict_hard(m, small[1].eval.iq)
    sel = small[1].eval.snr_db == 20.0
    assert reps[-1].f1 == micro_metrics(hard[sel], small[1].eval.labels[sel]).f1


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------
def test_estimator_api(small):
    d = small[0]
    clf = SpectrumSensingClassifier(layers=[Dense(16), Sigmoid()], epochs=2, batch_size=32, lr=0.5)
    assert clf.get_params()["epochs"] == 2
    assert clone(clf).get_params()["lr"] == 0.5
    clf.fit(d.train.iq, d.train.labels)
    p = clf.predict(d.eval.iq)
    assert p.shape == d.eval.labels.shape and set(np.unique(p)) <= {0, 1}
    proba = clf.predict_proba(d.eval.iq)
    assert np.array_equal(p, (proba >= 0.5).astype(np.uint8))
    assert 0.0 <= clf.score(d.eval.iq, d.eval.labels) <= 1.0
    assert len(clf.loss_curve_) == 2


def test_estimator_not_fitted():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        SpectrumSensingClassifier().predict(np.ones((1, 32), dtype=complex))


def test_estimator_rejects_bad_labels(small):
    d = small[0]
    with pytest.raises(ValueError):
        SpectrumSensingClassifier(epochs=1).fit(d.iq[:5], d.labels[:4])
    with pytest.raises(ValueError):
        SpectrumSensingClassifier(epochs=1).fit(d.iq[:2], np.full((2, 16), 2))
