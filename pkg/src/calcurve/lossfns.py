"""CE, MSE and CalMO objectives, plus the sign-gradient PGD adversary."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import netcore as nc
from .errors import DimensionError, NumericalFailure, SpecError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
LOG_FLOOR = np.log(PROB_FLOOR)


@dataclass(frozen=True)
class CalMOConfig:
    lambda_r: float = 0.5
    lambda_s: float = 0.01
    epsilon: float = 8 / 255
    pgd_steps: int = 3
    pgd_alpha: float = 2 / 255
    random_start: bool = False
    seed: int = 0  # only used when random_start is set

    def __post_init__(self):
        if self.lambda_r < 0 or self.lambda_s < 0:
            raise SpecError("lambda_r and lambda_s must be >= 0")
        if self.epsilon < 0:
            raise SpecError("epsilon must be >= 0")
        if self.pgd_steps < 1:
            raise SpecError("pgd_steps must be >= 1")
        if self.pgd_alpha <= 0:
            raise SpecError("pgd_alpha must be > 0")
        if self.pgd_alpha > self.epsilon > 0:
            log.warning("pgd_alpha %.4g exceeds epsilon %.4g", self.pgd_alpha, self.epsilon)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossValue:
    total: float
    ce_part: float
    rob_part: float = 0.0
    smooth_part: float = 0.0


def _check_batch(probs_or_z, labels):
    if labels is None or len(labels) == 0:
        raise DimensionError("empty batch")


def ce_loss(probs: nc.ProbBatch) -> float:
    _check_batch(probs.probs, probs.labels)
    py = probs.probs[np.arange(probs.n), probs.labels]
    return float(np.mean(-np.log(np.maximum(py, PROB_FLOOR))))


def mse_loss(batch: nc.LogitBatch) -> float:
    _check_batch(batch.logits, batch.labels)
    z = batch.logits
    err = z - nc.onehot(batch.labels, z.shape[1])
    return float(np.mean(np.mean(err * err, axis=1)))


def _ce_from_logits(z, y):
    lp = np.maximum(nc.log_softmax(z)[np.arange(len(y)), y], LOG_FLOOR)
    return -lp


def kl_rows(z_clean: np.ndarray, z_adv: np.ndarray) -> np.ndarray:
    """Per-row KL(softmax(z_clean) || softmax(z_adv)) with the probability floor."""
    p = nc.softmax(z_clean)
    lp = np.maximum(nc.log_softmax(z_clean), LOG_FLOOR)
    lq = np.maximum(nc.log_softmax(z_adv), LOG_FLOOR)
    return np.sum(p * (lp - lq), axis=1)


def _kl_logit_grads(z_clean, z_adv):
    p = nc.softmax(z_clean)
    q = nc.softmax(z_adv)
    lp_raw = nc.log_softmax(z_clean)
    lq_raw = nc.log_softmax(z_adv)
    mp = (lp_raw > LOG_FLOOR).astype(np.float64)
    mq = (lq_raw > LOG_FLOOR).astype(np.float64)
    ell = np.maximum(lp_raw, LOG_FLOOR) - np.maximum(lq_raw, LOG_FLOOR)
    # d/dz of sum_k p_k ell_k; floored logs have zero slope
    g_clean = p * (ell - np.sum(p * ell, axis=1, keepdims=True))
    g_clean += p * mp - p * np.sum(p * mp, axis=1, keepdims=True)
    g_adv = -(p * mq - q * np.sum(p * mq, axis=1, keepdims=True))
    return g_clean, g_adv


def pgd_attack(params: nc.ParamVector, X, y, cfg: CalMOConfig, bounded: bool = False) -> np.ndarray:
    """L-inf sign-gradient ascent on CE, started at the clean input.

    Rows whose input gradient turns non-finite are reset to the clean point and
    reported through the module logger.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (X.shape[0],))
    if cfg.epsilon == 0:
        return X[0].copy() if single else X.copy()
    x_adv = X.copy()
    if cfg.random_start:
        rng = np.random.default_rng(cfg.seed)
        x_adv = x_adv + rng.uniform(-cfg.epsilon, cfg.epsilon, size=X.shape)
        if bounded:
            x_adv = np.clip(x_adv, 0.0, 1.0)
    failed = np.zeros(X.shape[0], dtype=bool)
    for _ in range(cfg.pgd_steps):
        g = nc.input_gradients(params, x_adv, y, head="loss")
        bad = ~np.all(np.isfinite(g), axis=1)
        failed |= bad
        g[bad] = 0.0
        x_adv = x_adv + cfg.pgd_alpha * np.sign(g)
        x_adv = np.clip(x_adv, X - cfg.epsilon, X + cfg.epsilon)
        if bounded:
            x_adv = np.clip(x_adv, 0.0, 1.0)
    if failed.any():
        log.warning("PGD aborted on %d example(s): non-finite input gradient", int(failed.sum()))
        x_adv[failed] = X[failed]
    return x_adv[0] if single else x_adv


def calmo_loss_and_grad(params: nc.ParamVector, X, y, cfg: CalMOConfig, bounded: bool = False,
                        x_adv=None, need_grad: bool = True):
    """CalMO objective and its parameter gradient.

    ``x_adv`` is treated as a constant; pass it explicitly to reuse a fixed
    adversarial batch (finite-difference checks do this).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size == 0:
        raise DimensionError("empty batch")
    n = y.size
    tr = nc.trace_forward(params, X)
    ce_rows = _ce_from_logits(tr.logits, y)
    grad = None
    if need_grad:
        grad, _ = nc.backward(params, tr, nc.logit_loss_grad(tr.logits, y, "ce") / n)

    rob = 0.0
    if cfg.lambda_r > 0:
        if x_adv is None:
            x_adv = pgd_attack(params, X, y, cfg, bounded=bounded)
        tr_adv = nc.trace_forward(params, x_adv)
        rob = float(np.mean(kl_rows(tr.logits, tr_adv.logits)))
        if need_grad:
            g_clean, g_adv = _kl_logit_grads(tr.logits, tr_adv.logits)
            s = cfg.lambda_r / n
            gc, _ = nc.backward(params, tr, s * g_clean)
            ga, _ = nc.backward(params, tr_adv, s * g_adv)
            grad.values += gc.values + ga.values

    smooth = 0.0
    if cfg.lambda_s > 0:
        pen, gs = nc.smoothness_value_and_grad(params, X, y)
        smooth = float(np.mean(pen))
        if need_grad:
            grad.values += cfg.lambda_s * gs.values

    ce = float(np.mean(ce_rows))
    value = LossValue(ce + cfg.lambda_r * rob + cfg.lambda_s * smooth, ce, rob, smooth)
    if not np.isfinite(value.total) or (grad is not None and not grad.is_finite()):
        raise NumericalFailure("non-finite CalMO loss or gradient")
    return value, grad


def calmo_loss(params: nc.ParamVector, X, y, cfg: CalMOConfig, bounded: bool = False, x_adv=None) -> LossValue:
    value, _ = calmo_loss_and_grad(params, X, y, cfg, bounded=bounded, x_adv=x_adv, need_grad=False)
    return value


def objective(params: nc.ParamVector, X, y, loss_kind="ce", bounded: bool = False) -> float:
    """Mean training objective for any supported loss kind."""
    if isinstance(loss_kind, CalMOConfig):
        return calmo_loss(params, X, y, loss_kind, bounded=bounded).total
    z = nc.logits(params, X)
    y = np.asarray(y, dtype=np.int64)
    if loss_kind == "ce":
        return ce_loss(nc.ProbBatch(nc.softmax(z), y))
    if loss_kind == "mse":
        return mse_loss(nc.LogitBatch(z, y))
    raise SpecError(f"unknown loss kind {loss_kind!r}")


def value_and_grad(params: nc.ParamVector, X, y, loss_kind="ce", bounded: bool = False):
    """``(LossValue, gradient)`` for CE, MSE or CalMO; used by the training loop."""
    if isinstance(loss_kind, CalMOConfig):
        return calmo_loss_and_grad(params, X, y, loss_kind, bounded=bounded)
    tr = nc.trace_forward(params, X)
    y = np.asarray(y, dtype=np.int64)
    z = tr.logits
    if loss_kind == "ce":
        val = float(np.mean(_ce_from_logits(z, y)))
    else:
        val = mse_loss(nc.LogitBatch(z, y))
    g, _ = nc.backward(params, tr, nc.logit_loss_grad(z, y, loss_kind) / len(y))
    if not (np.isfinite(val) and g.is_finite()):
        raise NumericalFailure("non-finite loss or gradient")
    return LossValue(val, val), g
