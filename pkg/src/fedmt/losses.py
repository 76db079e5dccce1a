"""Cross-entropy, forward/backward corrected CE and weighted MSE.

Every loss returns ``(mean loss, gradient w.r.t. its first argument)``.  The
corrected losses take a :class:`~fedmt.projection.ProjectionMatrix` and use
its ``observation_map`` / ``label_weights`` views, so Q (J x K) and T (K x K,
row = true class) are handled with one code path.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import NonfiniteLoss, ShapeMismatch
from .projection import ProjectionMatrix, Role

LOG_FLOOR = 1e-300


class SpaceKind(str, enum.Enum):
    DESIRED = "desired"
    OTHER = "other"


@dataclass(frozen=True)
class Space:
    kind: SpaceKind
    size: int

    @classmethod
    def desired(cls, K: int) -> "Space":
        return cls(SpaceKind.DESIRED, K)

    @classmethod
    def other(cls, J: int) -> "Space":
        return cls(SpaceKind.OTHER, J)

    def to_dict(self):
        return {"kind": self.kind.value, "size": self.size}

    @classmethod
    def from_dict(cls, d):
        return cls(SpaceKind(d["kind"]), int(d["size"]))


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    """Inputs ``(N, d)`` with integer labels drawn from ``space``."""

    inputs: np.ndarray
    labels: np.ndarray
    space: Space

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(x), -1) if len(x) else x.reshape(0, 0)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2:
            raise ShapeMismatch(f"inputs must be 2-D, got {x.shape}")
        if x.shape[0] != y.shape[0]:
            raise ShapeMismatch(f"{x.shape[0]} inputs but {y.shape[0]} labels")
        if y.size and (y.min() < 0 or y.max() >= self.space.size):
            raise ShapeMismatch(f"labels must lie in [0, {self.space.size})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.inputs[idx], self.labels[idx], self.space)

    def to_dict(self) -> dict:
        return {
            "n": len(self),
            "d": self.dim,
            "inputs": [float(v) for v in self.inputs.ravel()],
            "labels": [int(v) for v in self.labels],
            "space": self.space.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledBatch":
        n, dim = int(d["n"]), int(d["d"])
        x = np.asarray(d["inputs"], dtype=float).reshape(n, dim)
        return cls(x, np.asarray(d["labels"], dtype=np.int64), Space.from_dict(d["space"]))


def _labels(labels, n: int, width: int) -> np.ndarray:
    y = labels.labels if isinstance(labels, LabeledBatch) else np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeMismatch(f"{n} rows of outputs but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= width):
        raise ShapeMismatch(f"label outside [0, {width})")
    return y


def _check_2d(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] == 0:
        raise ShapeMismatch(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    return a


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    inner = np.sum(probs * grad_probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def plain_ce(logits, labels) -> tuple[float, np.ndarray]:
    z = _check_2d(logits, "logits")
    n, K = z.shape
    y = _labels(labels, n, K)
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = -np.mean(logp[rows, y])
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return float(loss), grad / n


def _check_matrix(m: ProjectionMatrix, K: int):
    obs = m.observation_map
    if obs.shape[1] != K:
        raise ShapeMismatch(f"projection maps {obs.shape[1]} classes but outputs have {K}")
    return obs


def forward_corrected_ce(logits, labels, m: ProjectionMatrix) -> tuple[float, np.ndarray]:
    """Cross-entropy on probabilities pushed through the observation map."""
    z = _check_2d(logits, "logits")
    if m.is_identity:
        return plain_ce(z, labels)
    n, K = z.shape
    obs = _check_matrix(m, K)
    y = _labels(labels, n, obs.shape[0])
    p = softmax(z)
    mix = obs[y]  # (n, K) row of the map for each observed label
    q = np.sum(mix * p, axis=1)
    if np.any(q <= LOG_FLOOR):
        bad = int(np.argmax(q <= LOG_FLOOR))
        raise NonfiniteLoss(f"projected probability of sample {bad} is {q[bad]:.3g}")
    loss = -np.mean(np.log(q))
    grad = p - p * mix / q[:, None]
    return float(loss), grad / n


def backward_corrected_ce(logits, labels, m: ProjectionMatrix) -> tuple[float, np.ndarray]:
    """Cross-entropy against the label vector re-weighted by the pseudo-inverse.

    Can be negative when the pseudo-inverse has negative entries.
    """
    z = _check_2d(logits, "logits")
    if m.is_identity:
        return plain_ce(z, labels)
    n, K = z.shape
    _check_matrix(m, K)
    w_all = m.label_weights
    y = _labels(labels, n, w_all.shape[1])
    w = w_all[:, y].T  # (n, K)
    logp = log_softmax(z)
    loss = -np.mean(np.sum(w * logp, axis=1))
    grad = np.exp(logp) * w.sum(axis=1, keepdims=True) - w
    return float(loss), grad / n


def mse_targets(labels, m: ProjectionMatrix, n: int | None = None) -> np.ndarray:
    """Target vectors in the desired space for the weighted MSE.

    Noise-map (server) labels become one-hot vectors.  Label-space (client)
    labels become the support of their map row, scaled to sum to one.
    """
    obs = m.observation_map
    y = labels.labels if isinstance(labels, LabeledBatch) else np.asarray(labels, dtype=np.int64).reshape(-1)
    if n is not None and y.shape[0] != n:
        raise ShapeMismatch(f"{n} rows of outputs but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= obs.shape[0]):
        raise ShapeMismatch(f"label outside [0, {obs.shape[0]})")
    if m.role is Role.NOISE:
        return np.eye(obs.shape[1])[y]
    rows = obs[y]
    return rows / rows.sum(axis=1, keepdims=True)


def weighted_mse(outputs, labels, m: ProjectionMatrix) -> tuple[float, np.ndarray]:
    """Class-weighted squared error between probabilities and targets.

    Class ``k`` is weighted by ``m.class_weights[k]`` (the pseudo-inverse
    summed over observed labels).  The gradient is w.r.t. ``outputs``.
    """
    g = _check_2d(outputs, "outputs")
    n, K = g.shape
    _check_matrix(m, K)
    target = mse_targets(labels, m, n)
    w = m.class_weights
    diff = g - target
    loss = np.sum(w * diff * diff) / n
    grad = 2.0 * w * diff / n
    return float(loss), grad


class LossFamily(str, enum.Enum):
    PLAIN = "PlainCE"
    FORWARD = "ForwardCorrected"
    BACKWARD = "BackwardCorrected"
    WMSE = "WeightedMSE"


@dataclass(frozen=True)
class LossKind:
    family: LossFamily
    matrix: ProjectionMatrix | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", LossFamily(self.family))
        if self.family is not LossFamily.PLAIN and self.matrix is None:
            raise ValueError(f"{self.family.value} needs a projection matrix")

    @classmethod
    def plain(cls):
        return cls(LossFamily.PLAIN)

    @classmethod
    def forward(cls, m):
        return cls(LossFamily.FORWARD, m)

    @classmethod
    def backward(cls, m):
        return cls(LossFamily.BACKWARD, m)

    @classmethod
    def wmse(cls, m):
        return cls(LossFamily.WMSE, m)

    def __call__(self, logits, labels) -> tuple[float, np.ndarray]:
        """Loss value and gradient w.r.t. the logits."""
        if self.family is LossFamily.PLAIN:
            return plain_ce(logits, labels)
        if self.family is LossFamily.FORWARD:
            return forward_corrected_ce(logits, labels, self.matrix)
        if self.family is LossFamily.BACKWARD:
            return backward_corrected_ce(logits, labels, self.matrix)
        probs = softmax(_check_2d(logits, "logits"))
        loss, grad_p = weighted_mse(probs, labels, self.matrix)
        return loss, softmax_backward(probs, grad_p)
