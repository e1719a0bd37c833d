"""Matrix-free Gauss-Newton curvature probes.

The GN matrix ``(1/n) sum_i J_i^T H_z(p_i) J_i`` is never formed. Each product
costs one forward-mode pass, a K x K multiply per example and one reverse pass.
Top eigenpairs come from block power iteration with Gram-Schmidt (QR)
re-orthogonalisation and a Rayleigh-Ritz rotation every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import netcore as nc
from .errors import NumericalFailure, SpecError


@dataclass(frozen=True)
class CurvatureProbeConfig:
    power_iters: int = 100
    tol: float = 1e-6
    deflation_k: int = 1
    probe_batch_size: int = 128
    rng_seed: int = 0
    extra_vectors: int = 2  # guard vectors carried alongside the wanted block

    def __post_init__(self):
        if self.power_iters < 1:
            raise SpecError("power_iters must be >= 1")
        if self.tol <= 0:
            raise SpecError("tol must be > 0")
        if self.deflation_k < 1 or self.extra_vectors < 0:
            raise SpecError("deflation_k must be >= 1 and extra_vectors >= 0")


@dataclass(frozen=True)
class SharpnessEstimate:
    lambda_max: float
    iterations_used: int
    converged: bool
    residual: float


@dataclass(frozen=True)
class EigenBasis:
    vectors: np.ndarray  # (P, k), orthonormal columns
    values: np.ndarray  # (k,), nonincreasing
    iterations_used: int
    converged: bool


def logit_hessian(p) -> np.ndarray:
    """``diag(p) - p p^T``; batched over leading axes."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -1e-15) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise SpecError("logit_hessian needs probability vectors")
    eye = np.eye(p.shape[-1])
    return p[..., :, None] * eye - p[..., :, None] * p[..., None, :]


def _apply_logit_hessian(p: np.ndarray, u: np.ndarray, loss_kind: str) -> np.ndarray:
    if loss_kind == "mse":
        return (2.0 / p.shape[1]) * u
    return p * u - p * np.sum(p * u, axis=1, keepdims=True)


class GNOperator:
    """Callable ``v -> H_GN v`` on flat arrays, with the forward trace cached."""

    def __init__(self, params: nc.ParamVector, X, loss_kind: str = "ce"):
        if loss_kind not in ("ce", "mse"):
            raise SpecError(f"GN operator defined for 'ce' and 'mse', got {loss_kind!r}")
        self.params = params
        self.trace = nc.trace_forward(params, X)
        self.n = self.trace.logits.shape[0]
        if self.n == 0:
            raise SpecError("GN operator needs a nonempty slice")
        self.p = nc.softmax(self.trace.logits)
        self.loss_kind = loss_kind
        self.dim = len(params)

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        Jv = nc._jvp_trace(self.params, self.trace, self.params.with_values(v), None)
        w = _apply_logit_hessian(self.p, Jv, self.loss_kind)
        g, _ = nc.backward(self.params, self.trace, w / self.n)
        return g.values


def gn_vector_product(params: nc.ParamVector, X, v: nc.ParamVector, loss_kind: str = "ce") -> nc.ParamVector:
    return params.with_values(GNOperator(params, X, loss_kind)(v.values))


def block_power_iteration(matvec: Callable[[np.ndarray], np.ndarray], dim: int, k: int,
                          cfg: CurvatureProbeConfig) -> EigenBasis:
    """Top-k eigenpairs of a symmetric PSD operator.

    Convergence: relative change of every wanted Ritz value below ``tol``
    across a 5-iteration window. A zero response to a random block is retried
    once with a fresh seed; a second zero block means the operator vanishes on
    a random subspace, so all wanted eigenvalues are reported as 0.
    """
    k = min(k, dim)
    block = min(dim, k + cfg.extra_vectors)
    for attempt in range(2):
        rng = np.random.default_rng([cfg.rng_seed, attempt])
        V, _ = np.linalg.qr(rng.standard_normal((dim, block)))
        history = []
        converged = False
        it = 0
        for it in range(1, cfg.power_iters + 1):
            W = np.column_stack([matvec(V[:, j]) for j in range(block)])
            if not np.all(np.isfinite(W)):
                raise NumericalFailure("non-finite operator output in power iteration")
            if not np.any(W):
                break
            T = V.T @ W
            evals, S = np.linalg.eigh(0.5 * (T + T.T))
            order = np.argsort(evals)[::-1]
            evals, S = evals[order], S[:, order]
            V, W = V @ S, W @ S
            history.append(evals[:k])
            if len(history) > 5:
                old = history[-6]
                scale = np.maximum(np.abs(evals[:k]), 1e-300)
                if np.all(np.abs(evals[:k] - old) <= cfg.tol * scale):
                    converged = True
                    break
            if it < cfg.power_iters:
                V, _ = np.linalg.qr(W)
        if history:
            return EigenBasis(V[:, :k].copy(), np.asarray(history[-1]), it, converged)
    return EigenBasis(V[:, :k].copy(), np.zeros(k), it, True)


def _residual(matvec, v, lam) -> float:
    return float(np.linalg.norm(matvec(v) - lam * v))


def gn_sharpness(params: nc.ParamVector, X, cfg: CurvatureProbeConfig = CurvatureProbeConfig(),
                 loss_kind: str = "ce") -> SharpnessEstimate:
    op = GNOperator(params, X, loss_kind)
    basis = block_power_iteration(op, op.dim, 1, cfg)
    lam = float(basis.values[0])
    return SharpnessEstimate(lam, basis.iterations_used, basis.converged,
                             _residual(op, basis.vectors[:, 0], lam))


def top_k_eigenvectors(params: nc.ParamVector, X, k: int, cfg: CurvatureProbeConfig = CurvatureProbeConfig(),
                       loss_kind: str = "ce") -> EigenBasis:
    if k < 1:
        raise SpecError("k must be >= 1")
    op = GNOperator(params, X, loss_kind)
    return block_power_iteration(op, op.dim, k, cfg)


def sample_minibatch(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(n, size=min(batch_size, n), replace=False))


def batch_sharpness(params: nc.ParamVector, X_batch, cfg: CurvatureProbeConfig = CurvatureProbeConfig(),
                    loss_kind: str = "ce") -> SharpnessEstimate:
    """GN sharpness of a single minibatch (the caller draws it)."""
    return gn_sharpness(params, X_batch, cfg, loss_kind)


def jacobian_opnorm(params: nc.ParamVector, x, cfg: CurvatureProbeConfig = CurvatureProbeConfig()) -> float:
    """``||J_theta(x)||_op`` by power iteration on ``J^T J`` using jvp/vjp."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))[:1]
    trace = nc.trace_forward(params, x)

    def jtj(v):
        Jv = nc._jvp_trace(params, trace, params.with_values(v), None)
        g, _ = nc.backward(params, trace, Jv)
        return g.values

    basis = block_power_iteration(jtj, len(params), 1, cfg)
    return float(np.sqrt(max(basis.values[0], 0.0)))


def jacobian_opnorms(params: nc.ParamVector, X) -> np.ndarray:
    """Exact per-example ``||J_theta(x_i)||_op`` from the K x K Gram ``J J^T``.

    dz/dW_l[o, a] = D_l[:, o] h_l[a] with D_l = dz/d(pre-activation of layer l),
    so ``J J^T = sum_l D_l D_l^T (||h_l||^2 + 1)``.
    """
    trace = nc.trace_forward(params, X)
    blocks = params.blocks()
    n, K = trace.logits.shape
    D = np.broadcast_to(np.eye(K), (n, K, K))
    gram = np.zeros((n, K, K))
    for l in range(len(blocks) - 1, -1, -1):
        h = trace.hs[l]
        scale = np.einsum("ij,ij->i", h, h) + 1.0
        gram += np.einsum("nko,nqo->nkq", D, D) * scale[:, None, None]
        if l > 0:
            D = (D @ blocks[l][0]) * trace.d1[l - 1][:, None, :]
    top = np.linalg.eigvalsh(gram)[:, -1]
    return np.sqrt(np.maximum(top, 0.0))


def cj_estimate(params: nc.ParamVector, X) -> float:
    """Empirical C_J: the largest logit-Jacobian operator norm over ``X``."""
    return float(np.max(jacobian_opnorms(params, X)))
