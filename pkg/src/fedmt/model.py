"""Networks with hand-written backprop and a plain SGD step.

Both networks expose the same small surface used by the federation code:
``params`` (a dict of trainable arrays), ``forward``, ``gradients`` and
``with_params``.  Networks are treated as values: training returns a new
network and never mutates the one passed in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .losses import LabeledBatch, LossKind


def _inputs(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeMismatch(f"expected inputs of shape (N, {d}), got {x.shape}")
    return x


class TwoLayerReluNet:
    """``f_k(x) = M^{-1/2} sum_m a[k, m] relu(u[:, m] . x)`` with ``a`` frozen."""

    def __init__(self, u, a):
        u = np.array(u, dtype=float)
        a = np.array(a, dtype=float)
        if u.ndim != 2 or a.ndim != 2 or u.shape[1] != a.shape[1]:
            raise ShapeMismatch(f"u {u.shape} and a {a.shape} disagree on the width")
        if not np.all(np.abs(a) == 1.0):
            raise ValueError("output signs must be exactly +1 or -1")
        a.setflags(write=False)
        self.u = u
        self.a = a

    d = property(lambda self: self.u.shape[0])
    M = property(lambda self: self.u.shape[1])
    K = property(lambda self: self.a.shape[0])

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"u": self.u}

    def with_params(self, params: dict[str, np.ndarray]) -> "TwoLayerReluNet":
        net = object.__new__(TwoLayerReluNet)
        net.u = np.array(params["u"], dtype=float)
        net.a = self.a
        return net

    def copy(self) -> "TwoLayerReluNet":
        return self.with_params(self.params)

    def forward(self, inputs) -> np.ndarray:
        x = _inputs(inputs, self.d)
        h = np.maximum(x @ self.u, 0.0)
        return h @ self.a.T / math.sqrt(self.M)

    def backward(self, inputs, grad_logits) -> np.ndarray:
        """Gradient w.r.t. ``u`` of ``sum(grad_logits * forward(inputs))``."""
        x = _inputs(inputs, self.d)
        g = np.asarray(grad_logits, dtype=float)
        if g.shape != (x.shape[0], self.K):
            raise ShapeMismatch(f"grad_logits must be {(x.shape[0], self.K)}, got {g.shape}")
        active = (x @ self.u) > 0.0  # relu'(0) = 0
        dz = (g @ self.a) * active / math.sqrt(self.M)
        return x.T @ dz

    def gradients(self, inputs, grad_logits) -> dict[str, np.ndarray]:
        return {"u": self.backward(inputs, grad_logits)}

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "M": self.M,
            "K": self.K,
            "u": [float(v) for v in self.u.ravel()],
            "a": [int(v) for v in self.a.ravel()],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TwoLayerReluNet":
        d, M, K = int(doc["d"]), int(doc["M"]), int(doc["K"])
        u = np.asarray(doc["u"], dtype=float).reshape(d, M)
        a = np.asarray(doc["a"], dtype=float).reshape(K, M)
        return cls(u, a)


def init_ntk(d: int, M: int, K: int, seed: int) -> TwoLayerReluNet:
    """Gaussian hidden weights, uniform random output signs."""
    if min(d, M, K) < 1:
        raise ValueError("d, M and K must all be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((d, M))
    a = np.where(rng.random((K, M)) < 0.5, -1.0, 1.0)
    return TwoLayerReluNet(u, a)


class MlpNet:
    """Fully connected ReLU network; the last affine layer is the head."""

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ShapeMismatch("need one bias per weight matrix")
        ws = [np.array(w, dtype=float) for w in weights]
        bs = [np.array(b, dtype=float).reshape(-1) for b in biases]
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape[0] != w.shape[1]:
                raise ShapeMismatch(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and ws[i - 1].shape[1] != w.shape[0]:
                raise ShapeMismatch(f"layer {i} input {w.shape[0]} != previous output {ws[i - 1].shape[1]}")
        self.weights = ws
        self.biases = bs

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def d(self) -> int:
        return self.weights[0].shape[0]

    @property
    def K(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def head_keys(self) -> tuple[str, str]:
        last = self.n_layers - 1
        return (f"W{last}", f"b{last}")

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def with_params(self, params: dict[str, np.ndarray]) -> "MlpNet":
        n = len(params) // 2
        return MlpNet([params[f"W{i}"] for i in range(n)], [params[f"b{i}"] for i in range(n)])

    def copy(self) -> "MlpNet":
        return self.with_params(self.params)

    def _activations(self, x):
        acts = [x]
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def forward(self, inputs) -> np.ndarray:
        return self._activations(_inputs(inputs, self.d))[-1]

    def gradients(self, inputs, grad_logits) -> dict[str, np.ndarray]:
        x = _inputs(inputs, self.d)
        acts = self._activations(x)
        delta = np.asarray(grad_logits, dtype=float)
        if delta.shape != acts[-1].shape:
            raise ShapeMismatch(f"grad_logits must be {acts[-1].shape}, got {delta.shape}")
        grads = {}
        for i in range(self.n_layers - 1, -1, -1):
            grads[f"W{i}"] = acts[i].T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0.0)
        return grads

    def replace_head(self, K: int, seed) -> "MlpNet":
        """Same hidden layers, fresh randomly initialised ``K``-way output layer."""
        rng = np.random.default_rng(seed)
        fan_in = self.weights[-1].shape[0]
        w = rng.standard_normal((fan_in, K)) * math.sqrt(1.0 / fan_in)
        return MlpNet(self.weights[:-1] + [w], self.biases[:-1] + [np.zeros(K)])

    def to_dict(self) -> dict:
        return {
            "dims": self.dims,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpNet":
        return cls(doc["weights"], doc["biases"])


def init_mlp(dims, seed: int) -> MlpNet:
    """He-initialised MLP; each layer draws from its own seeded stream."""
    dims = [int(v) for v in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"need at least input and output dims, got {dims}")
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        rng = np.random.default_rng([seed, i])
        last = i == len(dims) - 2
        scale = math.sqrt((1.0 if last else 2.0) / fan_in)
        weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
        biases.append(np.zeros(fan_out))
    return MlpNet(weights, biases)


@dataclass(frozen=True)
class SgdConfig:
    """Local optimiser settings.

    ``batch_size=0`` means full batch.  When ``local_epochs`` is set it
    overrides ``local_steps`` with ``local_epochs * ceil(N / batch)``.
    """

    eta_sgd: float
    batch_size: int = 0
    local_steps: int = 1
    local_epochs: int | None = None

    def __post_init__(self):
        if not self.eta_sgd >= 0:
            raise ValueError("eta_sgd must be non-negative")
        if self.local_steps < 0 or self.batch_size < 0:
            raise ValueError("local_steps and batch_size must be >= 0")
        if self.local_epochs is not None and self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")

    def steps_for(self, n: int) -> int:
        if self.local_epochs is None:
            return self.local_steps
        b = n if self.batch_size in (0,) or self.batch_size >= n else self.batch_size
        return self.local_epochs * math.ceil(n / b)


class BatchStream:
    """Mini-batches without replacement, reshuffled every epoch.

    Full-batch streams (``batch_size`` 0 or >= n) always yield every index in
    order and consume no randomness.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot draw batches from an empty dataset")
        self.n = n
        self.full = batch_size == 0 or batch_size >= n
        self.batch_size = n if self.full else batch_size
        self.rng = rng
        self._order = np.arange(n)
        self._pos = n

    def next(self) -> np.ndarray:
        if self.full:
            return self._order
        if self._pos >= self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def loss_and_grads(net, batch: LabeledBatch, loss_kind: LossKind):
    logits = net.forward(batch.inputs)
    loss, grad_logits = loss_kind(logits, batch)
    return loss, net.gradients(batch.inputs, grad_logits)


def sgd_step(net, batch: LabeledBatch, loss_kind: LossKind, cfg: SgdConfig):
    """One step ``theta <- theta - eta * grad``; returns ``(new_net, pre-step loss)``."""
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    loss, grads = loss_and_grads(net, batch, loss_kind)
    params = {k: v - cfg.eta_sgd * grads[k] for k, v in net.params.items()}
    return net.with_params(params), loss


def predict(net, inputs) -> np.ndarray:
    return np.argmax(net.forward(inputs), axis=1)


def accuracy(net, batch: LabeledBatch) -> float:
    if len(batch) == 0:
        return float("nan")
    return float(np.mean(predict(net, batch.inputs) == batch.labels))
