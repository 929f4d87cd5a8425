"""A small differentiable network kernel with flat weight vectors.

Layers are pure functions of ``(weights, input)``; a :class:`Network` only holds
the layout that maps segments of one flat float64 vector to layer parameters.
That lets federated code add, scale and average models as plain vectors.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DivergenceError(FloatingPointError):
    """Raised when activations or losses stop being finite."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # Conv1D | MaxPool1D | Dense | Sigmoid | ReLU
    filters: int = 0
    kernel: int = 1
    stride: int = 1
    units: int = 0
    activation: str = "linear"

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "Conv1D":
            d.update(filters=self.filters, kernel=self.kernel, stride=self.stride, activation=self.activation)
        elif self.kind == "MaxPool1D":
            d.update(kernel=self.kernel, stride=self.stride)
        elif self.kind == "Dense":
            d.update(units=self.units, activation=self.activation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        kind = d.pop("kind")
        if kind not in ("Conv1D", "MaxPool1D", "Dense", "Sigmoid", "ReLU"):
            raise ValueError(f"unknown layer kind {kind!r}")
        if kind == "MaxPool1D" and "stride" not in d:
            d["stride"] = d.get("kernel", 1)
        return cls(kind=kind, **d)


def Conv1D(filters, kernel, stride=1, activation="relu"):
    return LayerSpec("Conv1D", filters=filters, kernel=kernel, stride=stride, activation=activation)


def MaxPool1D(size=2):
    return LayerSpec("MaxPool1D", kernel=size, stride=size)


def Dense(units, activation="linear"):
    return LayerSpec("Dense", units=units, activation=activation)


def Sigmoid():
    return LayerSpec("Sigmoid")


def default_sensing_layers(M: int = 16, J: int = 32) -> list[LayerSpec]:
    """Two Conv1D layers then a dense sigmoid head.

    The first kernel spans the whole capture, so it acts as a learned filter bank
    over the J samples; the second mixes the filter responses pointwise.
    """
    return [Conv1D(128, J), Conv1D(64, 1), Dense(M), Sigmoid()]


def stacked_sensing_layers(M: int = 16) -> list[LayerSpec]:
    """Two blocks of (Conv1D, Conv1D, MaxPool1D) with narrow kernels, then a dense sigmoid head."""
    return [
        Conv1D(16, 3), Conv1D(16, 3), MaxPool1D(2),
        Conv1D(32, 3), Conv1D(32, 3), MaxPool1D(2),
        Dense(M), Sigmoid(),
    ]


@dataclass
class _Slot:
    spec: LayerSpec
    in_shape: tuple
    out_shape: tuple
    params: list = field(default_factory=list)  # (name, shape, offset)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Network:
    """Layout of a feed-forward network over inputs of shape ``(channels, length)``.

    A 1-D input shape ``(features,)`` is also accepted for purely dense stacks.
    """

    def __init__(self, layers, input_shape):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in layers]
        self.input_shape = tuple(int(s) for s in input_shape)
        self._slots: list[_Slot] = []
        shape = self.input_shape
        offset = 0
        for spec in self.layers:
            params = []
            if spec.kind == "Conv1D":
                if len(shape) != 2:
                    raise ValueError("Conv1D expects a (channels, length) input")
                C, Lin = shape
                if spec.kernel > Lin:
                    raise ValueError(f"Conv1D kernel {spec.kernel} longer than input length {Lin}")
                Lout = (Lin - spec.kernel) // spec.stride + 1
                params = [("W", (spec.filters, C, spec.kernel)), ("b", (spec.filters,))]
                out = (spec.filters, Lout)
            elif spec.kind == "MaxPool1D":
                if len(shape) != 2:
                    raise ValueError("MaxPool1D expects a (channels, length) input")
                C, Lin = shape
                Lout = (Lin - spec.kernel) // spec.stride + 1
                if Lout < 1:
                    raise ValueError("MaxPool1D window longer than its input")
                out = (C, Lout)
            elif spec.kind == "Dense":
                fan_in = int(np.prod(shape))
                params = [("W", (spec.units, fan_in)), ("b", (spec.units,))]
                out = (spec.units,)
            else:  # Sigmoid, ReLU
                out = shape
            placed = []
            for name, pshape in params:
                placed.append((name, pshape, offset))
                offset += int(np.prod(pshape))
            self._slots.append(_Slot(spec, shape, out, placed))
            shape = out
        self.output_shape = shape
        self.d = offset

    # ---- layout -------------------------------------------------------
    def describe(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [l.to_dict() for l in self.layers]}

    def layout_hash(self) -> int:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")

    @classmethod
    def from_description(cls, desc: dict) -> "Network":
        return cls(desc["layers"], desc["input_shape"])

    def unflatten(self, w) -> list[dict]:
        w = self._check(w)
        out = []
        for slot in self._slots:
            out.append({name: w[off:off + int(np.prod(shape))].reshape(shape) for name, shape, off in slot.params})
        return out

    def flatten(self, params: list[dict]) -> np.ndarray:
        w = np.zeros(self.d)
        for slot, p in zip(self._slots, params):
            for name, shape, off in slot.params:
                w[off:off + int(np.prod(shape))] = np.asarray(p[name], dtype=float).reshape(-1)
        return w

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        w = np.zeros(self.d)
        for slot in self._slots:
            for name, shape, off in slot.params:
                if name != "W":
                    continue
                if slot.spec.kind == "Conv1D":
                    F, C, k = shape
                    fan_in, fan_out = C * k, F * k
                else:
                    fan_out, fan_in = shape
                lim = np.sqrt(6.0 / (fan_in + fan_out))
                w[off:off + int(np.prod(shape))] = rng.uniform(-lim, lim, size=int(np.prod(shape)))
        return w

    def _check(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.d,):
            raise ValueError(f"weight vector must have shape ({self.d},), got {w.shape}")
        return w

    # ---- forward / backward -------------------------------------------
    def forward(self, w, x, return_cache: bool = False):
        w = self._check(w)
        x = np.asarray(x, dtype=float)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input must have shape (n, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        params = self.unflatten(w)
        caches = []
        h = x
        for slot, p in zip(self._slots, params):
            spec = slot.spec
            if spec.kind == "Conv1D":
                k, s = spec.kernel, spec.stride
                cols = sliding_window_view(h, k, axis=2)[:, :, ::s, :]  # (n, C, Lout, k)
                cols = cols.transpose(0, 2, 1, 3).reshape(h.shape[0], cols.shape[2], -1)
                z = cols @ p["W"].reshape(spec.filters, -1).T + p["b"]  # (n, Lout, F)
                z = z.transpose(0, 2, 1)
                cache = (cols, h.shape)
                if spec.activation == "relu":
                    cache = cache + (z > 0,)
                    z = np.maximum(z, 0.0)
                caches.append(cache)
                h = z
            elif spec.kind == "MaxPool1D":
                k, s = spec.kernel, spec.stride
                win = sliding_window_view(h, k, axis=2)[:, :, ::s, :]
                arg = win.argmax(axis=3)
                caches.append((arg, h.shape))
                h = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
            elif spec.kind == "Dense":
                flat = h.reshape(h.shape[0], -1)
                z = flat @ p["W"].T + p["b"]
                cache = (flat, h.shape)
                if spec.activation == "relu":
                    cache = cache + (z > 0,)
                    z = np.maximum(z, 0.0)
                caches.append(cache)
                h = z
            elif spec.kind == "ReLU":
                caches.append(h > 0)
                h = np.maximum(h, 0.0)
            elif spec.kind == "Sigmoid":
                h = _sigmoid(h)
                caches.append(h)
        if not np.all(np.isfinite(h)):
            raise DivergenceError("non-finite network output")
        if return_cache:
            return h, (params, caches)
        return h

    def backward(self, w, cache, grad_out, skip_last_sigmoid: bool = False) -> np.ndarray:
        """Back-propagate ``grad_out`` (gradient w.r.t. the output) to a flat gradient.

        With ``skip_last_sigmoid`` the incoming gradient is taken to be w.r.t.
        the pre-sigmoid logits already.
        """
        params, caches = cache
        g = np.zeros(self.d)
        delta = np.asarray(grad_out, dtype=float)
        last = len(self._slots) - 1
        for i in range(last, -1, -1):
            slot, p, c = self._slots[i], params[i], caches[i]
            spec = slot.spec
            if spec.kind == "Sigmoid":
                if not (skip_last_sigmoid and i == last):
                    delta = delta * c * (1.0 - c)
            elif spec.kind == "ReLU":
                delta = delta * c
            elif spec.kind == "Dense":
                flat, in_shape = c[0], c[1]
                if spec.activation == "relu":
                    delta = delta * c[2]
                (_, _, offW), (_, _, offb) = slot.params
                g[offW:offW + p["W"].size] = (delta.T @ flat).reshape(-1)
                g[offb:offb + p["b"].size] = delta.sum(axis=0)
                delta = (delta @ p["W"]).reshape(in_shape)
            elif spec.kind == "Conv1D":
                cols, in_shape = c[0], c[1]
                if spec.activation == "relu":
                    delta = delta * c[2]
                d = delta.transpose(0, 2, 1)  # (n, Lout, F)
                (_, _, offW), (_, _, offb) = slot.params
                gW = np.einsum("nlf,nlq->fq", d, cols)
                g[offW:offW + p["W"].size] = gW.reshape(-1)
                g[offb:offb + p["b"].size] = d.sum(axis=(0, 1))
                if i == 0:
                    break
                n, C, Lin = in_shape
                k, s = spec.kernel, spec.stride
                dcols = (d @ p["W"].reshape(spec.filters, -1)).reshape(n, -1, C, k)
                dx = np.zeros(in_shape)
                Lout = dcols.shape[1]
                for j in range(k):
                    dx[:, :, j:j + s * (Lout - 1) + 1:s] += dcols[:, :, :, j].transpose(0, 2, 1)
                delta = dx
            elif spec.kind == "MaxPool1D":
                arg, in_shape = c
                k, s = spec.kernel, spec.stride
                dx = np.zeros(in_shape)
                Lout = arg.shape[2]
                pos = arg + s * np.arange(Lout)[None, None, :]
                np.add.at(dx, (np.arange(in_shape[0])[:, None, None], np.arange(in_shape[1])[None, :, None], pos), delta)
                delta = dx
        return g

    # ---- losses -------------------------------------------------------
    def bce_loss_and_grad(self, w, x, y):
        """Mean per-label binary cross-entropy and its gradient.

        Requires a sigmoid head; the gradient is taken through the logits.
        """
        if self.layers[-1].kind != "Sigmoid":
            raise ValueError("binary cross-entropy needs a Sigmoid output layer")
        y = np.asarray(y, dtype=float)
        if len(y) == 0:
            raise ValueError("empty batch")
        p, cache = self.forward(w, x, return_cache=True)
        if y.shape != p.shape:
            raise ValueError(f"labels must have shape {p.shape}, got {y.shape}")
        eps = 1e-15
        pc = np.clip(p, eps, 1.0 - eps)
        loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
        if not np.isfinite(loss):
            raise DivergenceError("non-finite loss")
        grad = self.backward(w, cache, (p - y) / p.size, skip_last_sigmoid=True)
        return float(loss), grad

    def bce_loss(self, w, x, y) -> float:
        p = self.forward(w, x)
        pc = np.clip(p, 1e-15, 1.0 - 1e-15)
        y = np.asarray(y, dtype=float)
        return float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))


@dataclass
class ModelWeights:
    vector: np.ndarray
    network: Network

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float)
        if self.vector.shape != (self.network.d,):
            raise ValueError(f"weight vector must have length {self.network.d}")

    @property
    def d(self) -> int:
        return self.network.d

    def unflatten(self) -> list[dict]:
        return self.network.unflatten(self.vector)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.vector.copy(), self.network)


@dataclass
class GradientVector:
    vector: np.ndarray
    batch_size: int = 0
    loss: float = float("nan")

    @property
    def d(self) -> int:
        return self.vector.shape[0]


def forward(weights: ModelWeights, x) -> np.ndarray:
    return weights.network.forward(weights.vector, x)


def backward(weights: ModelWeights, x, y) -> tuple[GradientVector, float]:
    loss, g = weights.network.bce_loss_and_grad(weights.vector, x, y)
    return GradientVector(g, batch_size=len(x), loss=loss), loss


def sgd_step(weights, grad, lr: float):
    """``w - lr * grad``; accepts ModelWeights/GradientVector or raw arrays."""
    w = weights.vector if isinstance(weights, ModelWeights) else np.asarray(weights, dtype=float)
    g = grad.vector if isinstance(grad, GradientVector) else np.asarray(grad, dtype=float)
    if w.shape != g.shape:
        raise ValueError(f"dimension mismatch: weights {w.shape} vs gradient {g.shape}")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    out = w - lr * g
    if isinstance(weights, ModelWeights):
        return ModelWeights(out, weights.network)
    return out


# ---- checkpoints ------------------------------------------------------
_NN_MAGIC = b"SPNN"
_NN_VERSION = 1


def save_checkpoint(path, weights: ModelWeights) -> None:
    """``SPNN`` | version u16 | d u64 | layout hash u64 | d x f64, little-endian.

    The layout description is written to a JSON sidecar so the file can be
    reloaded without knowing the architecture in advance.
    """
    path = Path(path)
    net = weights.network
    with open(path, "wb") as fh:
        fh.write(_NN_MAGIC)
        fh.write(struct.pack("<HQQ", _NN_VERSION, net.d, net.layout_hash()))
        fh.write(np.asarray(weights.vector, dtype="<f8").tobytes())
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(net.describe(), indent=2))


def load_checkpoint(path, network: Network | None = None) -> ModelWeights:
    path = Path(path)
    if network is None:
        network = Network.from_description(json.loads(path.with_suffix(path.suffix + ".json").read_text()))
    raw = path.read_bytes()
    if raw[:4] != _NN_MAGIC:
        raise ValueError(f"{path}: not a weight checkpoint")
    version, d, h = struct.unpack_from("<HQQ", raw, 4)
    if version != _NN_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if d != network.d or h != network.layout_hash():
        raise ValueError(f"{path}: checkpoint layout does not match the network")
    vec = np.frombuffer(raw, dtype="<f8", offset=4 + struct.calcsize("<HQQ"), count=d).astype(float)
    return ModelWeights(vec, network)
