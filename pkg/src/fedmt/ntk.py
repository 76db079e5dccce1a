"""Finite-width NTK Gram matrix at initialization and convergence checks.

The Gram matrix is indexed by ``l * N + p`` for output class ``l`` and
sample ``p``, with samples ordered clients first and servers last.  Entry
``((l, p), (m, q))`` is ``w_q[m] * <grad_u g_l(x_p), grad_u g_m(x_q)>`` where
``g = softmax(f)`` and ``w_q`` are the class weights of the participant that
owns sample ``q``.

Because softmax outputs sum to one, the per-sample all-ones directions lie in
the kernel's null space and the plain smallest eigenvalue is zero.  Training
residuals never leave the complement of that null space, so
``effective_min_eigenvalue`` restricts to it.  It also measures the kernel in
the metric of the weighted loss: with class weights ``W`` the loss decays at
rate ``min r'WKWr / r'Wr`` over that subspace, which is the symmetrized
eigenvalue whenever the weights are uniform.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh, helmert

from .errors import ConvergenceFailure, InvalidRate, TooLarge
from .losses import softmax
from .model import TwoLayerReluNet
from .projection import ProjectionMatrix, Role, build_hierarchical_q, build_symmetric_noise_t, identity

DEFAULT_CAP = 5000
BOUND_TOL = 1e-8
XI_REL_TOL = 1e-9


def _stack(inputs_list) -> tuple[np.ndarray, list[int]]:
    xs = [np.asarray(getattr(x, "inputs", x), dtype=float) for x in inputs_list]
    return (np.vstack(xs) if xs else np.zeros((0, 0))), [x.shape[0] for x in xs]


def _neuron_factors(net: TwoLayerReluNet, x: np.ndarray) -> np.ndarray:
    """``V[l, p, m]`` with ``grad_u_m g_l(x_p) = V[l, p, m] * x_p``."""
    pre = x @ net.u
    act = (pre > 0.0).astype(float)
    g = softmax(np.maximum(pre, 0.0) @ net.a.T / math.sqrt(net.M))
    mixed = g @ net.a  # (n, M): sum_k g_k a_km
    # (K, n, M): g_l * (a_lm - sum_k g_k a_km) * relu'(u_m . x) / sqrt(M)
    return g.T[:, :, None] * (net.a[:, None, :] - mixed[None, :, :]) * act[None, :, :] / math.sqrt(net.M)


def gram_kernel(net: TwoLayerReluNet, x: np.ndarray) -> np.ndarray:
    """Unweighted kernel ``<grad g_l(x_p), grad g_m(x_q)>`` in ``(l, p)`` order."""
    n = x.shape[0]
    v = _neuron_factors(net, x).reshape(net.K * n, net.M)
    xx = x @ x.T
    return (v @ v.T) * np.tile(xx, (net.K, net.K))


def softmax_jacobian(net: TwoLayerReluNet, x) -> np.ndarray:
    """Explicit ``(K*n, d*M)`` Jacobian of ``softmax(f(x))`` w.r.t. ``u`` (row ``l*n + p``)."""
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    K, M = net.K, net.M
    pre = x @ net.u
    g = softmax(np.maximum(pre, 0.0) @ net.a.T / math.sqrt(M))
    jac = np.zeros((K * n, d, M))
    for p in range(n):
        df = np.zeros((K, d, M))  # d f_k / d u[:, m]
        for m in range(M):
            if pre[p, m] > 0.0:
                df[:, :, m] = np.outer(net.a[:, m], x[p]) / math.sqrt(M)
        dg = (np.diag(g[p]) - np.outer(g[p], g[p])) @ df.reshape(K, d * M)
        for l in range(K):
            jac[l * n + p] = dg[l].reshape(d, M)
    return jac.reshape(K * n, d * M)


def plain_kernel(net: TwoLayerReluNet, x) -> np.ndarray:
    jac = softmax_jacobian(net, x)
    return jac @ jac.T


@dataclass
class GramMatrix:
    dense: np.ndarray
    K: int
    sizes: list[int]
    roles: list[str]
    col_weights: np.ndarray = field(repr=False)
    kernel: np.ndarray = field(repr=False, default=None)

    @property
    def N(self) -> int:
        return int(sum(self.sizes))

    @property
    def side(self) -> int:
        return self.dense.shape[0]

    @property
    def asymmetry_norm(self) -> float:
        return float(np.linalg.norm(self.dense - self.dense.T))

    def block(self, l: int, m: int, a: int | None = None, b: int | None = None) -> np.ndarray:
        """Class block ``(l, m)``, optionally narrowed to participants ``a`` x ``b``."""
        n = self.N
        blk = self.dense[l * n : (l + 1) * n, m * n : (m + 1) * n]
        if a is None:
            return blk
        off = np.concatenate([[0], np.cumsum(self.sizes)])
        return blk[off[a] : off[a + 1], off[b] : off[b + 1]]


def build_gram_parts(net: TwoLayerReluNet, parts, cap: int = DEFAULT_CAP, weighted: bool = True) -> GramMatrix:
    """Gram matrix for ``parts``: a list of ``(inputs, ProjectionMatrix)`` pairs."""
    x, sizes = _stack([p[0] for p in parts])
    side = net.K * x.shape[0]
    if side > cap:
        raise TooLarge(f"Gram side {side} exceeds cap {cap}")
    kernel = gram_kernel(net, x)
    w = np.ones((net.K, x.shape[0]))
    if weighted:
        off = 0
        for (_, m), size in zip(parts, sizes):
            if m.cols != net.K:
                raise ValueError(f"projection has {m.cols} desired classes, net has {net.K}")
            w[:, off : off + size] = m.class_weights[:, None]
            off += size
    col = w.reshape(-1)
    dense = kernel * col[None, :]
    if not np.all(np.isfinite(dense)):
        raise ValueError("Gram matrix has non-finite entries")
    roles = ["server" if m.role is Role.NOISE else "client" for _, m in parts]
    return GramMatrix(dense, net.K, sizes, roles, col, kernel)


def build_gram(net: TwoLayerReluNet, dataset, q: ProjectionMatrix | None = None, t: ProjectionMatrix | None = None, cap: int = DEFAULT_CAP) -> GramMatrix:
    q = dataset.q if q is None else q
    t = dataset.t if t is None else t
    parts = [(b.inputs, q) for b in dataset.client_sets] + [(b.inputs, t) for b in dataset.server_sets]
    return build_gram_parts(net, parts, cap)


def _sym(g) -> np.ndarray:
    a = g.dense if isinstance(g, GramMatrix) else np.asarray(g, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return (a + a.T) / 2.0


def _eigvalsh(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.eigvalsh(a)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from exc


def min_eigenvalue(g) -> float:
    """Smallest eigenvalue of ``(G + G^T) / 2``."""
    return float(_eigvalsh(_sym(g))[0])


def max_eigenvalue(g) -> float:
    return float(_eigvalsh(_sym(g))[-1])


def sum_zero_basis(K: int, N: int) -> np.ndarray:
    """Orthonormal basis of vectors whose class entries sum to zero for every sample."""
    if K < 2:
        raise ValueError("the sum-zero subspace is empty for K < 2")
    return np.kron(helmert(K).T, np.eye(N))


def symmetrized_effective_min_eigenvalue(g: GramMatrix) -> float:
    """Smallest eigenvalue of ``(G + G^T) / 2`` on the sum-zero subspace."""
    b = sum_zero_basis(g.K, g.N)
    return float(_eigvalsh(b.T @ _sym(g) @ b)[0])


def effective_min_eigenvalue(g: GramMatrix) -> float:
    """``min r'WKWr / r'Wr`` over sum-zero residuals ``r``; ``G = K W``."""
    w = g.col_weights
    if np.any(w <= 0):
        raise ValueError("loss-metric eigenvalue needs positive class weights")
    b = sum_zero_basis(g.K, g.N)
    wb = w[:, None] * b
    a = wb.T @ g.kernel @ wb
    m = b.T @ wb
    try:
        return float(eigh((a + a.T) / 2, (m + m.T) / 2, eigvals_only=True)[0])
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from exc


@dataclass
class EnvelopeResult:
    rho_theory: float
    rho_fitted: float
    holds: bool
    first_violation: int | None
    ratios: list[float]
    slack: float

    def to_dict(self) -> dict:
        return {
            "rho_theory": self.rho_theory,
            "rho_fitted": self.rho_fitted,
            "holds": self.holds,
            "first_violation": self.first_violation,
            "slack": self.slack,
            "max_ratio": max(self.ratios) if self.ratios else None,
        }


def theory_rate(eta_agg: float, eta_sgd: float, t: int, C: int, lam: float) -> float:
    rho = 1.0 - eta_agg * eta_sgd * lam * t / (2.0 * C)
    if not 0.0 < rho < 1.0:
        raise InvalidRate(f"rate {rho!r} is outside (0, 1) for these constants")
    return rho


def rate_envelope(trace, eta_agg: float, eta_sgd: float, t: int, C: int, lam: float, slack: float = 0.1) -> EnvelopeResult:
    """Check ``L_r <= rho^r * L_0 * (1 + slack)`` for every recorded round.

    ``trace`` is a sequence of losses or of objects with ``overall_loss``.
    The fitted factor is ``exp`` of the least-squares slope of ``log L_r``.
    """
    losses = np.array([getattr(v, "overall_loss", v) for v in trace], dtype=float)
    if losses.size < 2:
        raise ValueError("need at least two recorded rounds")
    rho = theory_rate(eta_agg, eta_sgd, t, C, lam)
    r = np.arange(losses.size)
    bound = losses[0] * rho**r * (1.0 + slack)
    ok = losses <= bound
    bad = np.flatnonzero(~ok)
    pos = losses > 0
    slope = np.polyfit(r[pos], np.log(losses[pos]), 1)[0] if pos.sum() >= 2 else -np.inf
    return EnvelopeResult(
        rho_theory=rho,
        rho_fitted=float(np.exp(slope)),
        holds=bool(ok.all()),
        first_violation=int(bad[0]) if bad.size else None,
        ratios=[float(v) for v in losses / bound],
        slack=slack,
    )


def balanced_partition(K: int, J: int) -> tuple[int, ...]:
    return tuple(K // J + (j < K % J) for j in range(J))


def corollary_checks(net: TwoLayerReluNet, client_inputs, server_inputs, partitions, xis, cap: int = DEFAULT_CAP) -> dict:
    """Partition sweep on client data and noise sweep with a server.

    The partition sweep uses clients only so that ``lambda_0`` is the
    effective eigenvalue of the same samples' unweighted kernel.  The noise
    sweep adds the server and keeps the client map at the identity.
    """
    K = net.K
    checks = []
    lam_by_j, raw_by_j, bound_by_j = {}, {}, {}
    asym = 0.0

    base = build_gram_parts(net, [(x, identity(K, Role.LABEL_SPACE)) for x in client_inputs], cap, weighted=False)
    lam0 = effective_min_eigenvalue(base)
    for part in partitions:
        part = tuple(int(k) for k in part)
        if sum(part) != K:
            raise ValueError(f"partition {part} does not sum to K={K}")
        q = build_hierarchical_q(part)
        g = build_gram_parts(net, [(x, q) for x in client_inputs], cap)
        asym = max(asym, g.asymmetry_norm)
        lam = effective_min_eigenvalue(g)
        bound = min(1.0 / k for k in part) * lam0
        key = ",".join(map(str, part))
        lam_by_j[key] = lam
        raw_by_j[key] = min_eigenvalue(g)
        bound_by_j[key] = bound
        checks.append({"name": f"bound J={len(part)} ({key})", "lhs": lam, "rhs": bound + BOUND_TOL, "pass": bool(lam <= bound + BOUND_TOL)})

    balanced = sorted(
        (len(p), bound_by_j[",".join(map(str, p))]) for p in map(tuple, partitions) if max(p) - min(p) <= 1
    )
    for (j1, b1), (j2, b2) in zip(balanced, balanced[1:]):
        checks.append({"name": f"bound monotone J={j1}->{j2}", "lhs": b1, "rhs": b2, "pass": bool(b1 <= b2 + BOUND_TOL)})

    lam_by_xi = {}
    for xi in xis:
        t = build_symmetric_noise_t(K, float(xi))
        parts = [(x, identity(K, Role.LABEL_SPACE)) for x in client_inputs] + [(x, t) for x in server_inputs]
        g = build_gram_parts(net, parts, cap)
        asym = max(asym, g.asymmetry_norm)
        lam_by_xi[repr(float(xi))] = effective_min_eigenvalue(g)
    if lam_by_xi:
        vals = np.array(list(lam_by_xi.values()))
        spread = float((vals.max() - vals.min()) / max(abs(vals).max(), 1e-300))
        checks.append({"name": "xi spread", "lhs": spread, "rhs": XI_REL_TOL, "pass": bool(spread <= XI_REL_TOL)})

    return {
        "lambda0": lam0,
        "lambda_by_J": lam_by_j,
        "raw_lambda_by_J": raw_by_j,
        "lambda_by_xi": lam_by_xi,
        "asymmetry_norm": asym,
        "bound_checks": checks,
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
