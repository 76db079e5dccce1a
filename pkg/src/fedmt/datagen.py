"""Synthetic mixed-label federated datasets.

Every generator is a pure function of its spec: each participant draws from
its own ``numpy`` stream keyed on ``(seed, role, index)`` so outputs do not
depend on generation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp

from .errors import DegenerateSignal, DegenerateSpec, InfeasibleSplit, InvalidMatrix, UnsupportedK
from .losses import LabeledBatch, Space
from .projection import LabelSpaceSpec, ProjectionMatrix, Role, build_q, build_semg_q, build_symmetric_noise_t

# stream tags for default_rng([seed, tag, index])
_MEANS, _SERVER, _CLIENT, _TEST, _FLIP, _SPLIT = range(6)

SEVERITY_MAX = 5.0
WAMP_ZETA = 1.0
LOG_FLOOR = 1e-12

FEATURE_NAMES = ("MAV", "MSV", "RMS", "VAR", "STD", "WL", "WAMP", "LOG", "SSC", "ZC", "MSF", "MF")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Gaussian-cluster task.

    ``n`` is the number of server samples per desired class, ``C`` the number
    of clients holding ``N_c`` other-space samples each.  ``client_split`` is
    ``"balanced"`` (even per fine class), ``"iid"`` or ``"noniid"``.
    """

    d: int
    K: int
    space: LabelSpaceSpec
    n: int
    C: int
    N_c: int
    xi: float = 0.0
    seed: int = 0
    separation: float = 4.0
    n_test_per_class: int = 100
    S: int = 1
    client_split: str = "balanced"
    noise_std: float = 1.0

    def __post_init__(self):
        problems = []
        if self.d < 1:
            problems.append("d must be >= 1")
        if self.space.K != self.K:
            problems.append(f"space has K={self.space.K}, spec has K={self.K}")
        if self.n < 1 or self.C < 1 or self.N_c < 1 or self.S < 1:
            problems.append("n, C, N_c and S must all be >= 1")
        if not 0.0 <= self.xi < (self.K - 1) / self.K:
            problems.append(f"xi={self.xi} outside [0, (K-1)/K)")
        if self.client_split not in ("balanced", "iid", "noniid"):
            problems.append(f"unknown client_split {self.client_split!r}")
        if self.n_test_per_class < 0:
            problems.append("n_test_per_class must be >= 0")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def J(self) -> int:
        return self.space.J

    def to_dict(self) -> dict:
        return {
            "kind": "gaussian",
            "d": self.d,
            "K": self.K,
            "space": self.space.to_dict(),
            "n": self.n,
            "C": self.C,
            "N_c": self.N_c,
            "xi": self.xi,
            "seed": self.seed,
            "separation": self.separation,
            "n_test_per_class": self.n_test_per_class,
            "S": self.S,
            "client_split": self.client_split,
            "noise_std": self.noise_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        d = {k: v for k, v in d.items() if k != "kind"}
        d["space"] = LabelSpaceSpec.from_dict(d["space"])
        return cls(**d)


@dataclass(frozen=True)
class SemgTaskSpec:
    """Synthetic tremor-severity task with the 12 sEMG features as inputs."""

    K: int = 5
    n: int = 10
    C: int = 50
    N_c: int = 180
    xi: float = 0.0
    seed: int = 0
    n_test_per_class: int = 200
    S: int = 1
    length: int = 2048
    fs: float = 1000.0

    def __post_init__(self):
        if self.K not in (5, 10):
            raise UnsupportedK(f"sEMG task supports K in {{5, 10}}, got {self.K}")
        if self.n < 1 or self.C < 1 or self.N_c < 1 or self.S < 1:
            raise ValueError("n, C, N_c and S must all be >= 1")
        if not 0.0 <= self.xi < (self.K - 1) / self.K:
            raise ValueError(f"xi={self.xi} outside [0, (K-1)/K)")
        if self.length < 3:
            raise DegenerateSignal("signal length must be >= 3")

    J = 3
    d = len(FEATURE_NAMES)

    def to_dict(self) -> dict:
        return {
            "kind": "semg",
            "K": self.K,
            "n": self.n,
            "C": self.C,
            "N_c": self.N_c,
            "xi": self.xi,
            "seed": self.seed,
            "n_test_per_class": self.n_test_per_class,
            "S": self.S,
            "length": self.length,
            "fs": self.fs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SemgTaskSpec":
        return cls(**{k: v for k, v in d.items() if k != "kind"})


def spec_from_dict(d: dict):
    return SemgTaskSpec.from_dict(d) if d.get("kind") == "semg" else SyntheticTaskSpec.from_dict(d)


@dataclass(frozen=True, eq=False)
class FederatedDataset:
    server_sets: list
    client_sets: list
    test_set: LabeledBatch
    q: ProjectionMatrix
    t: ProjectionMatrix
    spec: object = field(default=None)

    def __post_init__(self):
        K, J = self.t.rows, self.q.rows
        if self.q.cols != K:
            raise InvalidMatrix(f"q is {self.q.shape} but t is {self.t.shape}")
        for b in list(self.server_sets) + [self.test_set]:
            if b.space != Space.desired(K):
                raise ValueError("server and test sets must use the desired space")
        for b in self.client_sets:
            if b.space != Space.other(J):
                raise ValueError("client sets must use the other space")
        object.__setattr__(self, "server_sets", list(self.server_sets))
        object.__setattr__(self, "client_sets", list(self.client_sets))

    K = property(lambda self: self.t.rows)
    J = property(lambda self: self.q.rows)
    S = property(lambda self: len(self.server_sets))
    C = property(lambda self: len(self.client_sets))
    d = property(lambda self: self.test_set.dim)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict() if self.spec is not None else None,
            "q": self.q.to_dict(),
            "t": self.t.to_dict(),
            "server_sets": [b.to_dict() for b in self.server_sets],
            "client_sets": [b.to_dict() for b in self.client_sets],
            "test_set": self.test_set.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "FederatedDataset":
        return cls(
            server_sets=[LabeledBatch.from_dict(b) for b in d["server_sets"]],
            client_sets=[LabeledBatch.from_dict(b) for b in d["client_sets"]],
            test_set=LabeledBatch.from_dict(d["test_set"]),
            q=ProjectionMatrix.from_dict(d["q"]),
            t=ProjectionMatrix.from_dict(d["t"]),
            spec=spec_from_dict(d["spec"]) if d.get("spec") else None,
        )

    @classmethod
    def from_json(cls, text: str) -> "FederatedDataset":
        return cls.from_dict(json.loads(text))


def flip_labels(labels, t: ProjectionMatrix, seed) -> np.ndarray:
    """Resample each label independently from its row of ``t``."""
    if t.role is not Role.NOISE:
        raise InvalidMatrix("flip_labels needs a noise matrix")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size == 0:
        return y.copy()
    cum = np.cumsum(t.entries, axis=1)
    cum[:, -1] = np.inf  # guard against rows summing to 1 - eps
    u = np.random.default_rng(seed).random(y.size)
    return np.argmax(u[:, None] < cum[y], axis=1).astype(np.int64)


def _cluster_means(spec: SyntheticTaskSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, _MEANS])
    if spec.K <= spec.d:
        means = np.eye(spec.K, spec.d) * (spec.separation / math.sqrt(2.0))
    else:
        means = rng.standard_normal((spec.K, spec.d))
    if spec.K > 1:
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        gap = dist[np.triu_indices(spec.K, 1)].min()
        means = means * (spec.separation / gap)
    # random rotation so class axes are not coordinate aligned
    rot, _ = np.linalg.qr(rng.standard_normal((spec.d, spec.d)))
    return means @ rot


def _balanced_counts(total: int, K: int, offset: int = 0) -> np.ndarray:
    counts = np.full(K, total // K)
    extra = (offset + np.arange(total % K)) % K
    counts[extra] += 1
    return counts


def _draw(means, counts, std, rng):
    y = np.repeat(np.arange(len(counts)), counts)
    x = means[y] + std * rng.standard_normal((y.size, means.shape[1]))
    perm = rng.permutation(y.size)
    return x[perm], y[perm]


def _coarse_labels(y: np.ndarray, q: ProjectionMatrix, rng) -> np.ndarray:
    """Other-space label from ``P(j | k)`` proportional to column ``k`` of ``q``."""
    cond = q.entries / q.entries.sum(axis=0, keepdims=True)
    cum = np.cumsum(cond.T, axis=1)
    cum[:, -1] = np.inf
    u = rng.random(y.size)
    return np.argmax(u[:, None] < cum[y], axis=1).astype(np.int64)


def _server_sets(x, y, S, K):
    if S == 1:
        return [LabeledBatch(x, y, Space.desired(K))]
    return [LabeledBatch(x[s::S], y[s::S], Space.desired(K)) for s in range(S)]


def gen_gaussian_clusters(spec: SyntheticTaskSpec) -> FederatedDataset:
    if not spec.separation > 0:
        raise DegenerateSpec(f"separation must be > 0, got {spec.separation}")
    K, J = spec.K, spec.J
    means = _cluster_means(spec)
    q = build_q(spec.space)
    t = build_symmetric_noise_t(K, spec.xi)

    rng = np.random.default_rng([spec.seed, _SERVER, 0])
    xs, ys = _draw(means, np.full(K, spec.n), spec.noise_std, rng)
    ys = flip_labels(ys, t, [spec.seed, _FLIP, 0])
    servers = _server_sets(xs, ys, spec.S, K)

    if spec.client_split == "balanced":
        clients = []
        for c in range(spec.C):
            rng = np.random.default_rng([spec.seed, _CLIENT, c])
            x, y = _draw(means, _balanced_counts(spec.N_c, K, c), spec.noise_std, rng)
            clients.append(LabeledBatch(x, _coarse_labels(y, q, rng), Space.other(J)))
    else:
        rng = np.random.default_rng([spec.seed, _CLIENT, spec.C])
        x, y = _draw(means, _balanced_counts(spec.C * spec.N_c, K), spec.noise_std, rng)
        pool = LabeledBatch(x, y, Space.desired(K))
        split = split_iid if spec.client_split == "iid" else split_noniid
        clients = []
        for c, part in enumerate(split(pool, spec.C, [spec.seed, _SPLIT])):
            rng = np.random.default_rng([spec.seed, _CLIENT, c])
            clients.append(LabeledBatch(part.inputs, _coarse_labels(part.labels, q, rng), Space.other(J)))

    rng = np.random.default_rng([spec.seed, _TEST, 0])
    xt, yt = _draw(means, np.full(K, spec.n_test_per_class), spec.noise_std, rng)
    test = LabeledBatch(xt, yt, Space.desired(K))
    return FederatedDataset(servers, clients, test, q, t, spec)


def _client_sizes(N: int, C: int) -> np.ndarray:
    return np.array([N // C + (c < N % C) for c in range(C)])


def noniid_counts(class_counts, sizes) -> np.ndarray:
    """Integer ``C x K`` count matrix meeting the majority/minority quotas.

    Client ``c`` has majority classes ``2c, 2c+1 (mod K)`` each holding a
    fraction in ``[0.15, 0.25]`` of its data; every other class stays
    strictly below ``0.08``.
    """
    class_counts = np.asarray(class_counts, dtype=int)
    sizes = np.asarray(sizes, dtype=int)
    K, C = class_counts.size, sizes.size
    if K < 3:
        raise InfeasibleSplit(f"need at least 3 classes for two majority classes, got K={K}")
    if sizes.sum() != class_counts.sum():
        raise InfeasibleSplit("client sizes and class counts disagree")
    lo = np.zeros((C, K))
    hi = np.zeros((C, K))
    for c, n in enumerate(sizes):
        hi[c, :] = math.ceil(0.08 * n) - 1
        for k in ((2 * c) % K, (2 * c + 1) % K):
            lo[c, k] = math.ceil(0.15 * n)
            hi[c, k] = math.floor(0.25 * n)
    if np.any(lo > hi) or np.any(hi < 0):
        raise InfeasibleSplit("per-client quotas are empty for these client sizes")

    nvar = C * K
    rows = np.zeros((C, nvar))
    cols = np.zeros((K, nvar))
    for c in range(C):
        rows[c, c * K : (c + 1) * K] = 1.0
    for k in range(K):
        cols[k, k::K] = 1.0
    cons = [LinearConstraint(rows, sizes, sizes), LinearConstraint(cols, class_counts, class_counts)]
    res = milp(
        c=np.zeros(nvar),
        constraints=cons,
        integrality=np.ones(nvar),
        bounds=Bounds(lo.ravel(), hi.ravel()),
    )
    if not res.success:
        raise InfeasibleSplit(f"no integer split satisfies the quotas ({res.message})")
    return np.rint(res.x).astype(int).reshape(C, K)


def split_noniid(pool: LabeledBatch, C: int, seed) -> list[LabeledBatch]:
    K = pool.space.size
    counts = noniid_counts(np.bincount(pool.labels, minlength=K), _client_sizes(len(pool), C))
    rng = np.random.default_rng(seed)
    members = [rng.permutation(np.flatnonzero(pool.labels == k)) for k in range(K)]
    starts = np.zeros(K, dtype=int)
    out = []
    for c in range(C):
        idx = []
        for k in range(K):
            idx.append(members[k][starts[k] : starts[k] + counts[c, k]])
            starts[k] += counts[c, k]
        out.append(pool.subset(rng.permutation(np.concatenate(idx))))
    return out


def split_iid(pool: LabeledBatch, C: int, seed) -> list[LabeledBatch]:
    if C < 1:
        raise ValueError("C must be >= 1")
    perm = np.random.default_rng(seed).permutation(len(pool))
    return [pool.subset(part) for part in np.array_split(perm, C)]


# sEMG-like task


def severity_labels(severity, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Desired bin among ``K`` equal bins of ``[0, 5]`` and the 3-interval class."""
    s = np.asarray(severity, dtype=float)
    fine = np.arange(K) * (SEVERITY_MAX / K)
    coarse = np.array([0.0, SEVERITY_MAX / 3, 2 * SEVERITY_MAX / 3])
    desired = np.clip(np.searchsorted(fine, s, side="right") - 1, 0, K - 1)
    other = np.clip(np.searchsorted(coarse, s, side="right") - 1, 0, 2)
    return desired.astype(np.int64), other.astype(np.int64)


def synth_signals(severity, rng, length: int = 2048, fs: float = 1000.0) -> np.ndarray:
    """Tremor-like bursts: a sinusoid plus band-limited noise, both growing with severity."""
    s = np.asarray(severity, dtype=float).reshape(-1, 1)
    tt = np.arange(length) / fs
    freq = 4.0 + 1.2 * s + 0.3 * rng.standard_normal(s.shape)
    amp = 0.4 + 0.8 * s
    phase = rng.uniform(0, 2 * np.pi, s.shape)
    tone = amp * np.sin(2 * np.pi * freq * tt + phase)

    white = rng.standard_normal((s.shape[0], length))
    spec = np.fft.rfft(white, axis=1)
    f = np.fft.rfftfreq(length, 1.0 / fs)
    spec[:, (f < 20.0) | (f > 150.0)] = 0.0
    band = np.fft.irfft(spec, n=length, axis=1)
    band /= band.std(axis=1, keepdims=True)
    return tone + (0.3 + 0.5 * s) * band


def _features(x: np.ndarray, fs: float, zeta: float) -> np.ndarray:
    """Row-wise feature matrix for signals ``x`` of shape ``(B, N)``."""
    N = x.shape[1]
    ax = np.abs(x)
    sq = x * x
    dx = np.diff(x, axis=1)
    mav = ax.mean(axis=1)
    msv = sq.mean(axis=1)
    rms = np.sqrt(msv)
    var = sq.sum(axis=1) / (N - 1)
    std = np.sqrt(var)
    wl = np.abs(dx).sum(axis=1)
    wamp = (np.abs(dx) >= zeta).sum(axis=1)
    log = np.exp(np.log(np.maximum(ax, LOG_FLOOR)).mean(axis=1))
    ssc = ((x[:, 1:-1] - x[:, :-2]) * (x[:, 1:-1] - x[:, 2:]) >= zeta).sum(axis=1)
    zc = ((x[:, :-1] * x[:, 1:] < 0) & (np.abs(dx) >= zeta)).sum(axis=1)

    power = np.abs(np.fft.rfft(x, axis=1)) ** 2
    freqs = np.fft.rfftfreq(N, 1.0 / fs)
    total = power.sum(axis=1)
    safe = np.where(total > 0, total, 1.0)
    msf = np.where(total > 0, (power * freqs).sum(axis=1) / safe, 0.0)
    cum = np.cumsum(power, axis=1)
    mf_idx = np.argmax(cum >= 0.5 * total[:, None], axis=1)
    mf = np.where(total > 0, freqs[mf_idx], 0.0)
    return np.column_stack([mav, msv, rms, var, std, wl, wamp, log, ssc, zc, msf, mf]).astype(float)


def extract_semg_features(signal, fs: float = 1000.0, zeta: float = WAMP_ZETA) -> np.ndarray:
    """The 12 time/frequency statistics in the order of ``FEATURE_NAMES``."""
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1 or x.size < 3:
        raise DegenerateSignal(f"need a 1-D signal with at least 3 samples, got shape {x.shape}")
    return _features(x[None, :], fs, zeta)[0]


def _semg_features(severity, rng, spec: SemgTaskSpec, chunk: int = 1000) -> np.ndarray:
    out = []
    for i in range(0, len(severity), chunk):
        sig = synth_signals(severity[i : i + chunk], rng, spec.length, spec.fs)
        out.append(_features(sig, spec.fs, WAMP_ZETA))
    return np.vstack(out) if out else np.zeros((0, SemgTaskSpec.d))


def _severity_in_bins(counts, K, rng) -> np.ndarray:
    width = SEVERITY_MAX / K
    k = np.repeat(np.arange(K), counts)
    return rng.permutation((k + rng.random(k.size)) * width)


def gen_semg_like(spec: SemgTaskSpec) -> FederatedDataset:
    K = spec.K
    q = build_semg_q(K)
    t = build_symmetric_noise_t(K, spec.xi)

    rng = np.random.default_rng([spec.seed, _SERVER, 0])
    s_server = _severity_in_bins(np.full(K, spec.n), K, rng)
    f_server = _semg_features(s_server, rng, spec)
    y_server = flip_labels(severity_labels(s_server, K)[0], t, [spec.seed, _FLIP, 0])

    rng = np.random.default_rng([spec.seed, _CLIENT, 0])
    s_client = rng.uniform(0.0, SEVERITY_MAX, spec.C * spec.N_c)
    f_client = _semg_features(s_client, rng, spec)
    y_client = severity_labels(s_client, K)[1]

    rng = np.random.default_rng([spec.seed, _TEST, 0])
    s_test = _severity_in_bins(np.full(K, spec.n_test_per_class), K, rng)
    f_test = _semg_features(s_test, rng, spec)
    y_test = severity_labels(s_test, K)[0]

    train = np.vstack([f_server, f_client])
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0

    def z(f):
        return (f - mu) / sd

    servers = _server_sets(z(f_server), y_server, spec.S, K)
    clients = [
        LabeledBatch(z(f_client[part]), y_client[part], Space.other(3))
        for part in np.array_split(np.arange(spec.C * spec.N_c), spec.C)
    ]
    test = LabeledBatch(z(f_test), y_test, Space.desired(K))
    return FederatedDataset(servers, clients, test, q, t, spec)


def generate(spec) -> FederatedDataset:
    return gen_semg_like(spec) if isinstance(spec, SemgTaskSpec) else gen_gaussian_clusters(spec)
