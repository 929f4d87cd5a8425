"""Multi-label spectrum-hole classifier and micro-averaged metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .nn import ModelWeights, Network, default_sensing_layers
from .specgen.dataset import Dataset

THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# input handling
# ---------------------------------------------------------------------------
def iq_to_input(X, normalize: str = "record") -> np.ndarray:
    """Turn complex captures ``(n, J)`` into a real ``(n, 2, J)`` tensor.

    Real input already shaped ``(n, 2, J)`` passes through. With
    ``normalize="record"`` each capture is scaled to unit mean power.
    """
    X = np.asarray(X)
    if np.iscomplexobj(X):
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2:
            raise ValueError(f"complex input must be (n, J), got shape {X.shape}")
        out = np.stack([X.real, X.imag], axis=1).astype(float)
    else:
        if X.ndim != 3 or X.shape[1] != 2:
            raise ValueError(f"real input must be (n, 2, J), got shape {X.shape}")
        out = X.astype(float)
    if normalize == "record":
        p = np.mean(out ** 2, axis=(1, 2), keepdims=True) * 2.0
        out = out / np.sqrt(np.where(p > 0, p, 1.0))
    elif normalize != "none":
        raise ValueError(f"normalize must be 'record' or 'none', got {normalize!r}")
    if not np.all(np.isfinite(out)):
        raise ValueError("input contains non-finite samples")
    return out


def _check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 2 or len(y) != n:
        raise ValueError(f"labels must be an (n, M) binary array aligned with X, got shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    return y.astype(float)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------
def _ratio(num: int, den: int) -> float:
    if den == 0:
        return 1.0 if num == 0 else 0.0
    return num / den


@dataclass
class MetricsReport:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    n: int
    keys: dict = field(default_factory=dict)

    @property
    def precision(self) -> float:
        tp = int(self.tp.sum())
        return _ratio(tp, tp + int(self.fp.sum()))

    @property
    def recall(self) -> float:
        tp = int(self.tp.sum())
        return _ratio(tp, tp + int(self.fn.sum()))

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def row(self) -> dict:
        return {**self.keys, "precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": int(self.tp.sum()), "fp": int(self.fp.sum()), "fn": int(self.fn.sum()),
                "tn": int(self.tn.sum()), "n": self.n}


def micro_metrics(preds, labels, **keys) -> MetricsReport:
    """Confusion counts per subchannel, pooled into micro precision/recall/F1.

    A ratio whose denominator is zero is 1.0 (nothing to get wrong); F1 is 0
    when precision and recall are both 0.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"predictions {preds.shape} and labels {labels.shape} are not aligned")
    if preds.ndim == 1:
        preds, labels = preds[None, :], labels[None, :]
    p = preds.astype(bool)
    t = labels.astype(bool)
    return MetricsReport(tp=(p & t).sum(axis=0), fp=(p & ~t).sum(axis=0), fn=(~p & t).sum(axis=0),
                         tn=(~p & ~t).sum(axis=0), n=len(p), keys=keys)


METRIC_COLUMNS = ["regime", "uav", "snr_db", "precision", "recall", "f1", "tp", "fp", "fn", "tn", "n"]


def write_metrics_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for rep in reports:
            row = rep.row()
            w.writerow({c: row.get(c, "") for c in METRIC_COLUMNS})


# ---------------------------------------------------------------------------
# training primitives
# ---------------------------------------------------------------------------
def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_local(model: ModelWeights, dataset: Dataset, epochs: int = 1, batch_size: int = 64, lr: float = 0.05,
                rng: np.random.Generator | None = None, normalize: str = "record", use_split: bool = True):
    """Mini-batch SGD over the training split; returns ``(model', per-epoch mean loss)``."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    data = dataset.train if use_split else dataset
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = rng or np.random.default_rng(0)
    X = iq_to_input(data.iq, normalize)
    Y = data.labels.astype(float)
    net = model.network
    w = model.vector.copy()
    curve = []
    for _ in range(epochs):
        losses, sizes = [], []
        for idx in minibatches(len(X), batch_size, rng):
            loss, g = net.bce_loss_and_grad(w, X[idx], Y[idx])
            if lr:
                w -= lr * g
            losses.append(loss)
            sizes.append(len(idx))
        curve.append(float(np.average(losses, weights=sizes)))
    return ModelWeights(w, net), curve


@dataclass
class PredictionVector:
    probs: np.ndarray
    hard: np.ndarray


def predict(model: ModelWeights, record, normalize: str = "record") -> PredictionVector:
    iq = record.iq if hasattr(record, "iq") else record
    probs = model.network.forward(model.vector, iq_to_input(np.asarray(iq)[None, :], normalize))[0]
    return PredictionVector(probs, (probs >= THRESHOLD).astype(np.uint8))


def evaluate(model: ModelWeights, dataset: Dataset, regime: str = "", normalize: str = "record",
             use_split: bool = True) -> list[MetricsReport]:
    """One report per SNR level on the held-out split."""
    data = dataset.eval if use_split else dataset
    hard = predict_hard(model, data.iq, normalize) if len(data) else np.zeros((0, dataset.plan.M), dtype=np.uint8)
    out = []
    for snr in dataset.snr_levels:
        sel = data.snr_db == snr
        out.append(micro_metrics(hard[sel], data.labels[sel], regime=regime, uav=dataset.uav_id + 1, snr_db=snr))
    return out


def predict_hard(model: ModelWeights, iq, normalize: str = "record", chunk: int = 4096) -> np.ndarray:
    X = iq_to_input(iq, normalize)
    out = np.empty((len(X),) + model.network.output_shape)
    for s in range(0, len(X), chunk):
        out[s:s + chunk] = model.network.forward(model.vector, X[s:s + chunk])
    return (out >= THRESHOLD).astype(np.uint8)


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------
class SpectrumSensingClassifier(ClassifierMixin, BaseEstimator):
    """CNN spectrum-hole detector with a scikit-learn interface.

    ``X`` is complex ``(n, J)`` captures (or real ``(n, 2, J)``), ``y`` the
    ``(n, M)`` binary occupancy labels. ``predict`` returns 1 for "busy".

    Parameters
    ----------
    layers : list of LayerSpec or dicts, optional
        Network body; defaults to two conv/conv/pool blocks and a sigmoid head.
    epochs, batch_size, lr : training schedule for plain mini-batch SGD.
    normalize : ``"record"`` scales every capture to unit power, ``"none"`` keeps raw amplitudes.
    random_state : seed for initialization and shuffling.
    """

    def __init__(self, layers=None, epochs=20, batch_size=16, lr=0.5, normalize="record", random_state=0):
        self.layers = layers
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.normalize = normalize
        self.random_state = random_state

    def _build(self, J: int, M: int) -> Network:
        layers = self.layers if self.layers is not None else default_sensing_layers(M, J)
        net = Network(layers, (2, J))
        if net.output_shape != (M,):
            raise ValueError(f"network emits {net.output_shape}, labels have width {M}")
        return net

    def fit(self, X, y):
        Xi = iq_to_input(X, self.normalize)
        Y = _check_labels(y, len(Xi))
        if len(Xi) == 0:
            raise ValueError("cannot fit on an empty dataset")
        rng = np.random.default_rng(self.random_state)
        net = self._build(Xi.shape[2], Y.shape[1])
        w = net.init(rng)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            losses, sizes = [], []
            for idx in minibatches(len(Xi), self.batch_size, rng):
                loss, g = net.bce_loss_and_grad(w, Xi[idx], Y[idx])
                w -= self.lr * g
                losses.append(loss)
                sizes.append(len(idx))
            self.loss_curve_.append(float(np.average(losses, weights=sizes)))
        self.model_ = ModelWeights(w, net)
        self.n_outputs_ = Y.shape[1]
        self.classes_ = [np.array([0, 1])] * Y.shape[1]
        return self

    def set_model(self, model: ModelWeights):
        """Adopt weights trained elsewhere (e.g. by federated rounds)."""
        self.model_ = model
        self.n_outputs_ = model.network.output_shape[0]
        self.classes_ = [np.array([0, 1])] * self.n_outputs_
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit() before predicting")

    def predict_proba(self, X):
        self._check_fitted()
        Xi = iq_to_input(X, self.normalize)
        net = self.model_.network
        if Xi.shape[1:] != net.input_shape:
            raise ValueError(f"captures of shape {Xi.shape[1:]} do not match the model input {net.input_shape}")
        out = np.empty((len(Xi),) + net.output_shape)
        for s in range(0, len(Xi), 4096):
            out[s:s + 4096] = net.forward(self.model_.vector, Xi[s:s + 4096])
        return out

    def predict(self, X):
        return (self.predict_proba(X) >= THRESHOLD).astype(np.uint8)

    def score(self, X, y, sample_weight=None):
        """Micro-averaged F1."""
        return micro_metrics(self.predict(X), y).f1
