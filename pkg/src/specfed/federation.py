"""Centralized, local and federated training of the sensing network.

Federated rounds follow the channel-aware scheme: every client computes a
gradient on a fresh batch, the server combines the gradients with either
dataset-size weights (FedAvg) or square-root-power weights (pwFedAvg), takes one
global step and broadcasts the result.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .nn import GradientVector, ModelWeights, Network, default_sensing_layers
from .rng import substream
from .sensing import evaluate, iq_to_input, train_local
from .specgen.dataset import Dataset

log = logging.getLogger(__name__)

FEDAVG = "fedavg"
PWFEDAVG = "pwfedavg"


# ---------------------------------------------------------------------------
# aggregation weights
# ---------------------------------------------------------------------------
def fedavg_weights(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=float)
    if np.any(sizes < 0) or sizes.sum() <= 0:
        raise ValueError("dataset sizes must be non-negative with a positive total")
    return sizes / sizes.sum()


def pw_weights(powers) -> np.ndarray:
    """``sqrt(P_k) / sum_j sqrt(P_j)``; all-zero powers fall back to uniform weights."""
    powers = np.asarray(powers, dtype=float)
    if np.any(powers < 0) or not np.all(np.isfinite(powers)):
        raise ValueError("mean received powers must be finite and non-negative")
    alpha = np.sqrt(powers)
    total = alpha.sum()
    if total == 0:
        warnings.warn("all client powers are zero; falling back to uniform aggregation weights", RuntimeWarning)
        return np.full(len(powers), 1.0 / len(powers))
    return alpha / total


@dataclass(frozen=True)
class AggregationRule:
    variant: str = PWFEDAVG

    def __post_init__(self):
        if self.variant not in (FEDAVG, PWFEDAVG):
            raise ValueError(f"unknown aggregation rule {self.variant!r}")

    def weights(self, sizes, powers) -> np.ndarray:
        if self.variant == FEDAVG:
            return fedavg_weights(sizes)
        return pw_weights(powers)


def aggregate(grads, rule: AggregationRule | str, sizes=None, powers=None, client_ids=None):
    """Convex combination of client gradients; returns ``(GradientVector, weights)``.

    Terms are summed in ascending client id so the result does not depend on
    the order the gradients arrived in.
    """
    rule = rule if isinstance(rule, AggregationRule) else AggregationRule(rule)
    vecs = [g.vector if isinstance(g, GradientVector) else np.asarray(g, dtype=float) for g in grads]
    if not vecs:
        raise ValueError("nothing to aggregate")
    d = vecs[0].shape
    if any(v.shape != d for v in vecs):
        raise ValueError("all client gradients must have the same dimension")
    K = len(vecs)
    sizes = np.ones(K) if sizes is None else np.asarray(sizes, dtype=float)
    powers = np.ones(K) if powers is None else np.asarray(powers, dtype=float)
    ids = np.arange(K) if client_ids is None else np.asarray(client_ids)
    order = np.argsort(ids, kind="stable")
    w_sorted = rule.weights(sizes[order], powers[order])
    out = np.zeros(d)
    for j, i in enumerate(order):
        out += w_sorted[j] * vecs[i]
    weights = np.empty(K)
    weights[order] = w_sorted
    n = sum(g.batch_size for g in grads if isinstance(g, GradientVector))
    return GradientVector(out, batch_size=n), weights


def global_step(w, g, gamma: float):
    """``w - gamma * g``."""
    w = w.vector if isinstance(w, ModelWeights) else np.asarray(w, dtype=float)
    g = g.vector if isinstance(g, GradientVector) else np.asarray(g, dtype=float)
    if w.shape != g.shape:
        raise ValueError(f"dimension mismatch: weights {w.shape} vs gradient {g.shape}")
    if gamma < 0:
        raise ValueError("learning rate must be non-negative")
    return w - gamma * g


# ---------------------------------------------------------------------------
# clients
# ---------------------------------------------------------------------------
@dataclass
class ClientState:
    uav_id: int
    dataset: Dataset  # local training data
    weights: np.ndarray = None
    batch: np.ndarray = None
    mean_power: float = 0.0
    rng: np.random.Generator = None
    _X: np.ndarray = field(default=None, repr=False)

    def inputs(self, normalize: str) -> np.ndarray:
        if self._X is None:
            self._X = iq_to_input(self.dataset.iq, normalize)
        return self._X

    @property
    def size(self) -> int:
        return len(self.dataset)


def client_update(client: ClientState, global_w, network: Network, E: int = 1, batch_size: int = 64,
                  rng: np.random.Generator | None = None, lr_local: float = 0.1, normalize: str = "record",
                  power_source: str = "batch") -> tuple[GradientVector, float]:
    """Sync to the global weights, draw a batch and return ``(gradient, mean power)``.

    With ``E == 1`` the gradient is the exact batch gradient at the global
    weights. With ``E > 1`` the client takes ``E`` gradient steps of size
    ``lr_local`` on its batch and reports ``(w_global - w_after) / lr_local``.
    """
    if client.size == 0:
        raise ValueError(f"client {client.uav_id} has no data")
    if E < 1:
        raise ValueError("E must be >= 1")
    rng = rng if rng is not None else client.rng
    client.weights = np.array(global_w, dtype=float, copy=True)
    n = client.size
    idx = np.sort(rng.choice(n, size=min(batch_size, n), replace=False))
    client.batch = idx
    X = client.inputs(normalize)[idx]
    Y = client.dataset.labels[idx].astype(float)
    if power_source == "batch":
        client.mean_power = float(np.mean(client.dataset.avg_power[idx]))
    elif power_source == "dataset":
        client.mean_power = float(np.mean(client.dataset.avg_power))
    else:
        raise ValueError(f"power_source must be 'batch' or 'dataset', got {power_source!r}")
    if E == 1:
        loss, g = network.bce_loss_and_grad(client.weights, X, Y)
        return GradientVector(g, batch_size=len(idx), loss=loss), client.mean_power
    if lr_local <= 0:
        raise ValueError("lr_local must be positive when E > 1")
    w = client.weights.copy()
    loss0 = None
    for _ in range(E):
        loss, g = network.bce_loss_and_grad(w, X, Y)
        loss0 = loss if loss0 is None else loss0
        w -= lr_local * g
    pseudo = (client.weights - w) / lr_local
    return GradientVector(pseudo, batch_size=len(idx), loss=loss0), client.mean_power


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------
def constant_schedule(gamma: float):
    return lambda t: gamma


def decay_schedule(beta: float, L: float):
    """``2 / (beta t + 2L)``."""
    return lambda t: 2.0 / (beta * t + 2.0 * L)


@dataclass
class FederatedConfig:
    rule: str = PWFEDAVG
    rounds: int = 15000
    local_epochs: int = 1
    batch_size: int = 16
    lr: float = 0.5
    lr_schedule: str = "constant"  # constant | decay
    beta: float = 1.0
    L: float = 1.0
    lr_local: float = 1.0
    power_source: str = "batch"
    normalize: str = "record"
    seed: int = 0

    def schedule(self):
        if self.lr_schedule == "constant":
            return constant_schedule(self.lr)
        if self.lr_schedule == "decay":
            return decay_schedule(self.beta, self.L)
        raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class RoundRecord:
    round: int
    grad_norms: np.ndarray
    weights: np.ndarray
    losses: np.ndarray
    global_loss: float
    gamma: float
    weights_hash: str


def _hash(w: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(w, dtype="<f8").tobytes()).hexdigest()[:16]


def run_federated(cfg: FederatedConfig, datasets: list[Dataset], network: Network | None = None, w0=None,
                  callback=None) -> tuple[ModelWeights, list[RoundRecord]]:
    """Run ``cfg.rounds`` federated rounds over the clients' training splits."""
    if not datasets:
        raise ValueError("need at least one client")
    network = network or Network(default_sensing_layers(datasets[0].plan.M, datasets[0].J), (2, datasets[0].J))
    if w0 is None:
        w0 = network.init(substream(cfg.seed, "init"))
    w = np.array(w0.vector if isinstance(w0, ModelWeights) else w0, dtype=float, copy=True)
    rule = AggregationRule(cfg.rule)
    schedule = cfg.schedule()
    clients = [ClientState(ds.uav_id, ds.train, rng=substream(cfg.seed, "client", ds.uav_id)) for ds in datasets]
    for c in clients:
        if c.size == 0:
            raise ValueError(f"client {c.uav_id} has an empty training split")
    sizes = np.array([c.size for c in clients], dtype=float)
    ids = np.array([c.uav_id for c in clients])
    history = []
    for t in range(cfg.rounds):
        grads, powers = [], []
        for c in clients:
            g, p = client_update(c, w, network, cfg.local_epochs, cfg.batch_size, lr_local=cfg.lr_local,
                                 normalize=cfg.normalize, power_source=cfg.power_source)
            grads.append(g)
            powers.append(p)
        agg, weights = aggregate(grads, rule, sizes, powers, ids)
        gamma = schedule(t)
        w = global_step(w, agg, gamma)
        if not np.all(np.isfinite(w)):
            raise FloatingPointError(f"global weights diverged at round {t}")
        for c in clients:  # broadcast
            c.weights = w
        losses = np.array([g.loss for g in grads])
        history.append(RoundRecord(t, np.array([np.linalg.norm(g.vector) for g in grads]), weights, losses,
                                   float(weights @ losses), gamma, _hash(w)))
        if callback is not None:
            callback(t, w)
    return ModelWeights(w, network), history


def write_round_log(path, history: list[RoundRecord]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["round", "client", "weight", "grad_norm", "loss", "gamma"])
        for rec in history:
            for k in range(len(rec.weights)):
                wr.writerow([rec.round, k + 1, repr(float(rec.weights[k])), repr(float(rec.grad_norms[k])),
                             repr(float(rec.losses[k])), repr(float(rec.gamma))])


@dataclass
class LocalConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.5
    normalize: str = "record"
    seed: int = 0


def run_centralized(cfg: LocalConfig, datasets: list[Dataset], network: Network | None = None, w0=None):
    """Pool every client's training split into one run; returns ``(model, loss curve, metrics)``."""
    network = network or Network(default_sensing_layers(datasets[0].plan.M, datasets[0].J), (2, datasets[0].J))
    if w0 is None:
        w0 = network.init(substream(cfg.seed, "init"))
    pooled = Dataset.concat(datasets)
    model, curve = train_local(ModelWeights(np.array(w0, dtype=float), network), pooled, cfg.epochs, cfg.batch_size,
                               cfg.lr, substream(cfg.seed, "centralized"), cfg.normalize)
    metrics = [r for ds in datasets for r in evaluate(model, ds, "CL", cfg.normalize)]
    return model, curve, metrics


def run_local(cfg: LocalConfig, datasets: list[Dataset], network: Network | None = None, w0=None):
    """One independent model per client; returns ``(models, curves, metrics)``."""
    network = network or Network(default_sensing_layers(datasets[0].plan.M, datasets[0].J), (2, datasets[0].J))
    if w0 is None:
        w0 = network.init(substream(cfg.seed, "init"))
    models, curves, metrics = [], [], []
    for ds in datasets:
        # per-client shuffling stream; with a single client this equals the centralized run
        rng = substream(cfg.seed, "centralized") if len(datasets) == 1 else substream(cfg.seed, "local", ds.uav_id)
        model, curve = train_local(ModelWeights(np.array(w0, dtype=float), network), ds, cfg.epochs,
                                   cfg.batch_size, cfg.lr, rng, cfg.normalize)
        models.append(model)
        curves.append(curve)
        metrics.extend(evaluate(model, ds, "LL", cfg.normalize))
    return models, curves, metrics


class FederatedSensingEstimator(BaseEstimator):
    """Scikit-learn style wrapper around :func:`run_federated`.

    ``fit`` takes the list of per-UAV :class:`Dataset` objects (their training
    splits are used); ``predict`` / ``predict_proba`` work on complex captures.
    """

    def __init__(self, rule=PWFEDAVG, rounds=15000, local_epochs=1, batch_size=16, lr=0.5, lr_local=1.0,
                 power_source="batch", normalize="record", layers=None, random_state=0):
        self.rule = rule
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_local = lr_local
        self.power_source = power_source
        self.normalize = normalize
        self.layers = layers
        self.random_state = random_state

    def fit(self, datasets, y=None):
        cfg = FederatedConfig(rule=self.rule, rounds=self.rounds, local_epochs=self.local_epochs,
                              batch_size=self.batch_size, lr=self.lr, lr_local=self.lr_local,
                              power_source=self.power_source, normalize=self.normalize, seed=self.random_state)
        M, J = datasets[0].plan.M, datasets[0].J
        net = Network(self.layers if self.layers is not None else default_sensing_layers(M, J), (2, J))
        self.model_, self.history_ = run_federated(cfg, datasets, net)
        return self

    def predict_proba(self, X):
        if not hasattr(self, "model_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("call fit() first")
        Xi = iq_to_input(X, self.normalize)
        return self.model_.network.forward(self.model_.vector, Xi)

    def predict(self, X):
        return (self.predict_proba(X) >= 0.5).astype(np.uint8)

    def evaluate(self, datasets, regime="FL"):
        return [r for ds in datasets for r in evaluate(self.model_, ds, regime, self.normalize)]
