"""Label-space correspondence (Q) and label-noise (T) matrices.

Orientation conventions
-----------------------
``LabelSpaceMap`` matrices are stored ``J x K``: row ``j`` holds the mixing
weights of the K desired classes that make up other-space class ``j``.

``NoiseMap`` matrices are stored ``K x K`` with ``T[i, j] = p(noisy=j | true=i)``
so every row is a conditional distribution.

The losses need both kinds in a single orientation, *observed x true*.  That
view is :attr:`ProjectionMatrix.observation_map` (``Q`` itself, or ``T.T``),
and its pseudo-inverse is :attr:`ProjectionMatrix.label_weights`.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import InvalidMatrix, PartitionMismatch, SingularNoise, UnsupportedK

PINV_RTOL = 1e-10
ROW_SUM_TOL = 1e-9
PENROSE_TOL = 1e-8


class Role(str, enum.Enum):
    LABEL_SPACE = "LabelSpaceMap"
    NOISE = "NoiseMap"


def pseudo_inverse(m, rtol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose inverse via SVD.

    Singular values below ``rtol * s_max`` are treated as zero.  Accepts a
    :class:`ProjectionMatrix` or any 2-D array.
    """
    a = m.entries if isinstance(m, ProjectionMatrix) else np.asarray(m, dtype=float)
    if a.ndim != 2:
        raise InvalidMatrix(f"expected a 2-D matrix, got shape {a.shape}")
    if a.size == 0:
        return np.zeros(a.shape[::-1])
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = rtol * s[0] if s.size else 0.0
    keep = s > cutoff
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (vt.T * s_inv) @ u.T


def penrose_residuals(a: np.ndarray, p: np.ndarray) -> tuple[float, float, float, float]:
    """Max-abs residuals of the four Penrose identities for ``p = pinv(a)``."""
    ap = a @ p
    pa = p @ a
    return (
        float(np.max(np.abs(ap @ a - a))),
        float(np.max(np.abs(pa @ p - p))),
        float(np.max(np.abs(ap - ap.T))),
        float(np.max(np.abs(pa - pa.T))),
    )


def _is_binary(a: np.ndarray) -> bool:
    return bool(np.all((a == 0.0) | (a == 1.0)))


class ProjectionMatrix:
    """Immutable, validated Q or T matrix with a cached pseudo-inverse."""

    def __init__(self, entries, role: Role | str, pinv=None):
        a = np.array(entries, dtype=float, copy=True)
        if a.ndim != 2 or 0 in a.shape:
            raise InvalidMatrix(f"projection matrix must be a non-empty 2-D array, got {a.shape}")
        role = Role(role)
        if not np.all(np.isfinite(a)):
            raise InvalidMatrix("entries must be finite")
        if np.any(a < 0.0) or np.any(a > 1.0):
            raise InvalidMatrix("entries must lie in [0, 1]")

        sums = a.sum(axis=1)
        if role is Role.NOISE:
            if a.shape[0] != a.shape[1]:
                raise InvalidMatrix(f"noise matrix must be square, got {a.shape}")
            if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
                raise InvalidMatrix("noise matrix rows must sum to 1")
            smin = np.linalg.svd(a, compute_uv=False)[-1]
            if smin <= 1e-12:
                raise SingularNoise(f"noise matrix is singular (smallest singular value {smin:.3g})")
        elif _is_binary(a):
            # 0/1 block form: each coarse class must own at least one fine class
            if np.any(sums < 1.0 - ROW_SUM_TOL):
                raise InvalidMatrix("every row of a 0/1 label-space map needs at least one 1")
        elif np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
            raise InvalidMatrix("label-space map rows must sum to 1 (or be 0/1 blocks)")

        a.setflags(write=False)
        self._entries = a
        self.role = role
        if pinv is None:
            p = pseudo_inverse(a)
        else:
            p = np.array(pinv, dtype=float, copy=True)
            if p.shape != a.shape[::-1]:
                raise InvalidMatrix(f"pinv shape {p.shape} does not match {a.shape[::-1]}")
        if np.max(np.abs(a @ p @ a - a)) > PENROSE_TOL:
            raise InvalidMatrix("A @ pinv @ A != A; pseudo-inverse is inconsistent")
        p.setflags(write=False)
        self._pinv = p

    # -- basic views ------------------------------------------------------
    @property
    def entries(self) -> np.ndarray:
        return self._entries

    @property
    def pinv(self) -> np.ndarray:
        return self._pinv

    @property
    def rows(self) -> int:
        return self._entries.shape[0]

    @property
    def cols(self) -> int:
        return self._entries.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._entries.shape

    @cached_property
    def is_identity(self) -> bool:
        a = self._entries
        return a.shape[0] == a.shape[1] and bool(np.array_equal(a, np.eye(a.shape[0])))

    @cached_property
    def observation_map(self) -> np.ndarray:
        """``(observed, true)`` view used by the corrected losses."""
        return self._entries.T if self.role is Role.NOISE else self._entries

    @cached_property
    def label_weights(self) -> np.ndarray:
        """``(true, observed)`` matrix whose column ``j`` re-weights label ``j``."""
        return self._pinv.T if self.role is Role.NOISE else self._pinv

    @cached_property
    def class_weights(self) -> np.ndarray:
        """Per desired class ``k``: the sum over observed labels of ``label_weights[k, :]``.

        For Q this is ``sum_j pinv(Q)[k, j]``; for T it is the column sum
        ``sum_i inv(T)[i, k]``.  These are the Gram-matrix prefactors.
        """
        return self.label_weights.sum(axis=1)

    # -- serialisation ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "role": self.role.value,
            "entries": [float(v) for v in self._entries.ravel()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectionMatrix":
        try:
            rows, cols = int(d["rows"]), int(d["cols"])
            entries = np.asarray(d["entries"], dtype=float)
            role = d["role"]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidMatrix(f"malformed projection matrix document: {exc}") from exc
        if entries.size != rows * cols:
            raise InvalidMatrix(f"expected {rows * cols} entries, got {entries.size}")
        return cls(entries.reshape(rows, cols), role)

    @classmethod
    def from_json(cls, text: str) -> "ProjectionMatrix":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProjectionMatrix):
            return NotImplemented
        return self.role is other.role and np.array_equal(self._entries, other._entries)

    def __hash__(self):
        return hash((self.role, self._entries.tobytes(), self._entries.shape))

    def __repr__(self) -> str:
        return f"ProjectionMatrix(role={self.role.value}, shape={self.shape})"


def identity(K: int, role: Role | str = Role.NOISE) -> ProjectionMatrix:
    return ProjectionMatrix(np.eye(K), role, pinv=np.eye(K))


@dataclass(frozen=True)
class LabelSpaceSpec:
    """Desired space of ``K`` classes and an other space of ``J`` classes.

    Give ``partition`` (sizes ``k_1..k_J``) for nested labels, or ``q_rows``
    for an explicit overlapping ``J x K`` map.
    """

    K: int
    partition: tuple[int, ...] | None = None
    q_rows: tuple[tuple[float, ...], ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        if (self.partition is None) == (self.q_rows is None):
            raise ValueError("give exactly one of partition or q_rows")
        if self.partition is not None:
            part = tuple(int(k) for k in self.partition)
            object.__setattr__(self, "partition", part)
            if any(k < 1 for k in part):
                raise PartitionMismatch(f"partition sizes must be >= 1, got {part}")
            if sum(part) != self.K:
                raise PartitionMismatch(f"partition {part} sums to {sum(part)}, not K={self.K}")
        else:
            rows = np.asarray(self.q_rows, dtype=float)
            if rows.ndim != 2 or rows.shape[1] != self.K:
                raise InvalidMatrix(f"q_rows must be J x {self.K}, got {rows.shape}")
            ProjectionMatrix(rows, Role.LABEL_SPACE)

    @property
    def kind(self) -> str:
        return "hierarchical" if self.partition is not None else "overlapping"

    @property
    def J(self) -> int:
        return len(self.partition) if self.partition is not None else len(self.q_rows)

    def to_dict(self) -> dict:
        if self.partition is not None:
            return {"K": self.K, "partition": list(self.partition)}
        return {"K": self.K, "q_rows": [list(r) for r in self.q_rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpaceSpec":
        if "partition" in d:
            return cls(int(d["K"]), partition=tuple(d["partition"]))
        return cls(int(d["K"]), q_rows=tuple(tuple(r) for r in d["q_rows"]))


def build_hierarchical_q(spec: LabelSpaceSpec | Sequence[int], row_stochastic: bool = False) -> ProjectionMatrix:
    """Block map whose row ``j`` covers the ``k_j`` fine classes of block ``j``.

    The default is the 0/1 form; ``row_stochastic=True`` divides row ``j`` by
    ``k_j``.  The pseudo-inverse is filled in from its closed form.
    """
    if not isinstance(spec, LabelSpaceSpec):
        part = tuple(int(k) for k in spec)
        spec = LabelSpaceSpec(sum(part), partition=part)
    if spec.partition is None:
        raise PartitionMismatch("build_hierarchical_q needs a hierarchical spec")
    part = spec.partition
    J, K = len(part), spec.K
    q = np.zeros((J, K))
    pinv = np.zeros((K, J))
    start = 0
    for j, kj in enumerate(part):
        block = slice(start, start + kj)
        if row_stochastic:
            q[j, block] = 1.0 / kj
            pinv[block, j] = 1.0
        else:
            q[j, block] = 1.0
            pinv[block, j] = 1.0 / kj
        start += kj
    return ProjectionMatrix(q, Role.LABEL_SPACE, pinv=pinv)


def build_overlapping_q(spec: LabelSpaceSpec) -> ProjectionMatrix:
    if spec.q_rows is None:
        return build_hierarchical_q(spec)
    return ProjectionMatrix(np.asarray(spec.q_rows, dtype=float), Role.LABEL_SPACE)


def build_q(spec: LabelSpaceSpec) -> ProjectionMatrix:
    return build_hierarchical_q(spec) if spec.partition is not None else build_overlapping_q(spec)


def symmetric_noise_entries(K: int, xi: float) -> np.ndarray:
    return (1.0 - K / (K - 1) * xi) * np.eye(K) + xi / (K - 1) * np.ones((K, K))


def woodbury_noise_inverse(K: int, xi: float) -> np.ndarray:
    """Closed-form inverse of the symmetric noise matrix."""
    denom = K - 1 - K * xi
    if abs(denom) < 1e-12:
        raise SingularNoise(f"K-1-K*xi = {denom:.3g}; symmetric noise matrix is singular")
    return (K - 1) / denom * np.eye(K) - xi / denom * np.ones((K, K))


def build_symmetric_noise_t(K: int, xi: float) -> ProjectionMatrix:
    """Noise matrix with diagonal ``1 - xi`` and off-diagonal ``xi/(K-1)``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if K == 1:
        if xi != 0:
            raise SingularNoise("a single class cannot be flipped")
        return identity(1)
    if abs(K - 1 - K * xi) < 1e-12:
        raise SingularNoise(f"xi={xi} makes the symmetric noise matrix singular for K={K}")
    if not 0.0 <= xi < (K - 1) / K:
        raise ValueError(f"xi must lie in [0, {(K - 1) / K:.4f}) for K={K}, got {xi}")
    if xi == 0.0:
        return identity(K)
    return ProjectionMatrix(symmetric_noise_entries(K, xi), Role.NOISE, pinv=woodbury_noise_inverse(K, xi))


_SEMG_Q = {
    5: [
        [3 / 5, 2 / 5, 0, 0, 0],
        [0, 1 / 5, 3 / 5, 1 / 5, 0],
        [0, 0, 0, 2 / 5, 3 / 5],
    ],
    10: [
        [3 / 10, 3 / 10, 3 / 10, 1 / 10, 0, 0, 0, 0, 0, 0],
        [0, 0, 0, 1 / 5, 3 / 10, 3 / 10, 1 / 5, 0, 0, 0],
        [0, 0, 0, 0, 0, 0, 1 / 10, 3 / 10, 3 / 10, 3 / 10],
    ],
}


def build_semg_q(K: int) -> ProjectionMatrix:
    """Overlapping 3-interval vs K-bin severity map (K in {5, 10})."""
    if K not in _SEMG_Q:
        raise UnsupportedK(f"sEMG label map only exists for K in (5, 10), got {K}")
    return ProjectionMatrix(np.array(_SEMG_Q[K]), Role.LABEL_SPACE)
