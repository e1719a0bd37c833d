"""Logit margins, exponential margin moments and executable bound checks.

Every check returns :class:`BoundReport` objects. ``kind="theorem"`` marks an
inequality that must hold for the quantities as computed; ``kind="surrogate"``
marks checks whose inputs are heuristic estimates (for example a local
Lipschitz constant read off a PGD path), where a failure says the estimate is
poor rather than that a bound is wrong.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import calib
from . import netcore as nc

DEFAULT_TOL = 1e-9
LOG_CAP = 700.0


@dataclass
class BoundReport:
    bound_id: str
    lhs: float
    rhs: float
    slack: float
    holds: bool | None  # None: precondition not met, nothing asserted
    tol: float = DEFAULT_TOL
    kind: str = "theorem"
    context: dict = field(default_factory=dict)

    @classmethod
    def check(cls, bound_id: str, lhs: float, rhs: float, tol: float = DEFAULT_TOL,
              kind: str = "theorem", **context) -> "BoundReport":
        slack = float(rhs) - float(lhs)
        return cls(bound_id, float(lhs), float(rhs), slack, bool(slack >= -tol), tol, kind, context)

    @classmethod
    def inactive(cls, bound_id: str, lhs: float, rhs: float, tol: float = DEFAULT_TOL, **context) -> "BoundReport":
        return cls(bound_id, float(lhs), float(rhs), float(rhs) - float(lhs), None, tol, "theorem", context)

    @property
    def active(self) -> bool:
        return self.holds is not None


# ---------------------------------------------------------------------------
# margins


def _zy(batch):
    if isinstance(batch, nc.LogitBatch):
        return batch.logits, batch.labels
    z, y = batch
    return np.atleast_2d(np.asarray(z, dtype=np.float64)), np.asarray(y, dtype=np.int64).reshape(-1)


def clean_margin(batch) -> np.ndarray:
    """``z_y - max_{j != y} z_j`` per row; takes a LogitBatch or ``(logits, labels)``."""
    z, y = _zy(batch)
    rows = np.arange(z.shape[0])
    return z[rows, y] - z[rows, nc.runner_up(z, y)]


def predicted_margin(logits) -> np.ndarray:
    """Top logit minus the runner-up logit (label free, >= 0)."""
    z = logits.logits if isinstance(logits, nc.LogitBatch) else np.atleast_2d(np.asarray(logits, dtype=np.float64))
    top2 = np.sort(z, axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


@dataclass
class RobustMargins:
    clean: np.ndarray
    robust: np.ndarray  # min margin found on the PGD path (<= clean)
    lipschitz: np.ndarray  # max dual-norm input-gradient along the path


def robust_margins(params: nc.ParamVector, X, y, epsilon: float, steps: int = 3, alpha: float = 2 / 255,
                   bounded: bool = False) -> RobustMargins:
    """PGD estimate of ``inf_{||d||_inf <= eps} m(x + d, y)`` for a batch.

    Descends the margin with sign-gradient steps from the clean point. The
    result is an upper estimate of the true infimum. The Lipschitz surrogate
    is the largest l1 norm (dual of l-inf) of the margin's input gradient
    over the visited points.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (X.shape[0],))
    x = X.copy()
    best = None
    lip = np.zeros(X.shape[0])
    clean = None
    for t in range(steps + 1):
        tr = nc.trace_forward(params, x)
        m = clean_margin((tr.logits, y))
        if clean is None:
            clean = m.copy()
            best = m.copy()
        else:
            best = np.minimum(best, m)
        _, g = nc.backward(params, tr, nc.head_cotangent(tr.logits, y, "margin"), need_input=True)
        lip = np.maximum(lip, np.abs(g).sum(axis=1))
        if t == steps or epsilon == 0:
            break
        x = np.clip(x - alpha * np.sign(g), X - epsilon, X + epsilon)
        if bounded:
            x = np.clip(x, 0.0, 1.0)
    return RobustMargins(clean, best, lip)


def robust_margin(params: nc.ParamVector, x, y: int, cfg, bounded: bool = False) -> float:
    """Single-example robust margin using the step schedule of a CalMOConfig."""
    r = robust_margins(params, np.asarray(x)[None, :], [y], cfg.epsilon, cfg.pgd_steps, cfg.pgd_alpha, bounded)
    return float(r.robust[0])


def margin_lipschitz_bound(params: nc.ParamVector, y) -> np.ndarray:
    """Global l-inf Lipschitz constant of ``m(., y)`` valid for tanh and relu nets.

    Activation slopes lie in [0, 1], so ``|c^T J_x| <= |c|^T |W_L| ... |W_1|``
    entrywise for every input, with ``c = e_y - e_j``.
    """
    M = None
    for W, _ in params.blocks():
        M = np.abs(W) if M is None else np.abs(W) @ M
    row = M.sum(axis=1)  # l1 norm over the input of each output row
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    K = row.size
    out = np.empty(y.size)
    for i, yi in enumerate(y):
        others = np.delete(np.arange(K), yi)
        out[i] = row[yi] + row[others].max()
    return out


@dataclass
class GridMargins:
    grid_min: np.ndarray
    certified: np.ndarray  # guaranteed lower bound on the robust margin
    spacing: float


def grid_robust_margins(params: nc.ParamVector, X, y, epsilon: float, grid_points: int = 41,
                        bounded: bool = False, chunk: int = 50_000) -> GridMargins:
    """Exhaustive grid search of the l-inf ball for low-dimensional inputs.

    Every point of the ball is within half a grid spacing of a grid node, so
    ``grid_min - L * spacing / 2`` with the global Lipschitz constant ``L`` is a
    certified lower bound on the robust margin.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    if d > 3:
        raise ValueError("grid certification is only offered for d <= 3")
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    lo, hi = X - epsilon, X + epsilon
    if bounded:
        lo, hi = np.clip(lo, 0.0, 1.0), np.clip(hi, 0.0, 1.0)
    t = np.linspace(0.0, 1.0, grid_points)
    mesh = np.stack(np.meshgrid(*([t] * d), indexing="ij"), axis=-1).reshape(-1, d)
    G = mesh.shape[0]
    grid_min = np.empty(n)
    per = max(1, chunk // G)
    for s in range(0, n, per):
        e = min(n, s + per)
        pts = lo[s:e, None, :] + mesh[None, :, :] * (hi - lo)[s:e, None, :]
        z = nc.logits(params, pts.reshape(-1, d))
        m = clean_margin((z, np.repeat(y[s:e], G))).reshape(e - s, G)
        grid_min[s:e] = m.min(axis=1)
    spacing = 2.0 * epsilon / (grid_points - 1) if grid_points > 1 else 2.0 * epsilon
    lip = margin_lipschitz_bound(params, y)
    return GridMargins(grid_min, grid_min - lip * spacing / 2.0, spacing)


# ---------------------------------------------------------------------------
# exponential margin moments


@dataclass(frozen=True)
class QMoments:
    q_d: float
    q0: float
    q_minus: float
    q_plus: float
    saturated: bool = False


def _log_mean_exp(a: np.ndarray) -> float:
    return float(logsumexp(a) - np.log(a.size))


def exp_moment(values: np.ndarray) -> tuple[float, bool]:
    """``mean(exp(values))`` accumulated in log space, capped at e^700."""
    lv = _log_mean_exp(np.asarray(values, dtype=np.float64))
    if lv > LOG_CAP:
        return float(np.exp(LOG_CAP)), True
    return float(np.exp(lv)), False


def q_moments(clean, robust=None, lipschitz=None, epsilon: float = 0.0) -> QMoments:
    """Q_D, Q0_eps, Q-_eps and Q+ from per-sample margins."""
    clean = np.asarray(clean, dtype=np.float64)
    robust = clean if robust is None else np.asarray(robust, dtype=np.float64)
    lip = np.zeros_like(clean) if lipschitz is None else np.asarray(lipschitz, dtype=np.float64)
    q_d, s1 = exp_moment(-clean)
    q0, s2 = exp_moment(-robust)
    qm, s3 = exp_moment(-epsilon * lip - robust)
    qp, s4 = exp_moment(epsilon * lip - robust)
    return QMoments(q_d, q0, qm, qp, s1 or s2 or s3 or s4)


@dataclass
class MarginStats:
    clean: np.ndarray
    predicted: np.ndarray
    robust: np.ndarray | None = None
    lipschitz: np.ndarray | None = None
    epsilon: float = 0.0

    @property
    def gamma(self) -> float:
        return float(np.min(self.clean))

    def moments(self) -> QMoments:
        return q_moments(self.clean, self.robust, self.lipschitz, self.epsilon)


def margin_stats(params: nc.ParamVector, X, y, epsilon: float = 0.0, steps: int = 3,
                 alpha: float = 2 / 255, bounded: bool = False) -> MarginStats:
    z = nc.logits(params, X)
    pm = predicted_margin(z)
    if epsilon > 0:
        r = robust_margins(params, X, y, epsilon, steps, alpha, bounded)
        return MarginStats(r.clean, pm, r.robust, r.lipschitz, epsilon)
    cm = clean_margin((z, y))
    return MarginStats(cm, pm, cm.copy(), np.zeros_like(cm), 0.0)


# ---------------------------------------------------------------------------
# lemma and theorem checks


def tail_quantities(z: np.ndarray, y: np.ndarray):
    """Per-row ``(1 - p_y, m, (K-1) e^{-m}, e^{-m} / (1 + (K-1) e^{-m}))``."""
    z = np.atleast_2d(z)
    K = z.shape[1]
    m = clean_margin((z, y))
    p = nc.softmax(z)
    rows = np.arange(z.shape[0])
    tail = p.sum(axis=1) - p[rows, y]  # sum of the other classes; keeps tiny tails exact
    tail = np.maximum(tail, 0.0)
    upper = (K - 1) * np.exp(-m)
    lower = 1.0 / (np.exp(m) + (K - 1))  # e^{-m}/(1+(K-1)e^{-m}) without overflow
    return tail, m, upper, lower


def lemma_tail_oracle(z, y: int, tol: float = 1e-10) -> list[BoundReport]:
    """Softmax tail sandwich between ``1 - p_y`` and ``e^{-m}``."""
    z = np.asarray(z, dtype=np.float64)
    K = z.size
    tail, m, upper, lower = (float(v[0]) for v in tail_quantities(z[None, :], np.array([y])))
    out = [
        BoundReport.check("softmax-tail-upper", tail, upper, tol),
        BoundReport.check("softmax-tail-lower", lower, tail, tol),
    ]
    if m >= 0:
        out.append(BoundReport.check("softmax-tail-sandwich", np.exp(-m) / K, tail, tol))
    return out


def gershgorin_slack(p: np.ndarray) -> np.ndarray:
    """``2 (1 - p_max) - lambda_max(H_z(p))`` per row, by dense eigendecomposition."""
    p = np.atleast_2d(p)
    H = p[:, :, None] * np.eye(p.shape[1]) - p[:, :, None] * p[:, None, :]
    lam = np.linalg.eigvalsh(H)[:, -1]
    return 2.0 * (1.0 - p.max(axis=1)) - lam


def _ece(probs: nc.ProbBatch, scheme) -> float:
    return calib.ece(probs, scheme)


def abs_gap_rows(probs: nc.ProbBatch) -> np.ndarray:
    """``|1{yhat = y} - P_hat|`` per sample."""
    correct, conf = calib.correctness(probs)
    return np.abs(correct - conf)


def lemma_ece_gap_report(probs: nc.ProbBatch, scheme=calib.DEFAULT_SCHEME, tol: float = DEFAULT_TOL,
                         **context) -> BoundReport:
    """Binned ECE never exceeds the mean per-sample gap (triangle inequality per bin)."""
    return BoundReport.check("ece-abs-gap", _ece(probs, scheme), float(np.mean(abs_gap_rows(probs))),
                             tol, **context)


def lemma_gap_trueprob_report(probs: nc.ProbBatch, tol: float = DEFAULT_TOL, **context) -> BoundReport:
    """Worst sample of ``|1{yhat = y} - P_hat| <= 1 - p_y``."""
    gap = abs_gap_rows(probs)
    tail = 1.0 - probs.probs[np.arange(probs.n), probs.labels]
    i = int(np.argmin(tail - gap))
    return BoundReport.check("gap-true-prob", gap[i], tail[i], tol, **context)


def robust_trivial_report(margins: MarginStats, tol: float = DEFAULT_TOL, **context) -> BoundReport:
    """Worst sample of ``e^{-m} <= e^{-m_eps}``, compared on the margin scale."""
    i = int(np.argmin(margins.clean - margins.robust))
    return BoundReport.check("robust-below-clean", margins.robust[i], margins.clean[i], tol, **context)


def theorem_overlap_oracle(probs: nc.ProbBatch, margins: MarginStats, cj: float | None, K: int,
                           lambda_max: float | None = None, scheme=calib.DEFAULT_SCHEME,
                           clamp: bool = True, tol: float = DEFAULT_TOL, robust=None, **context) -> list[BoundReport]:
    """ECE <= (K-1) Q and lambda_max <= 2 C_J^2 (K-1) Q with Q from robust margins.

    ``robust`` overrides the robust margins in ``margins`` (for example with
    grid-certified lower bounds).
    """
    m_eps = margins.robust if robust is None else np.asarray(robust)
    Q, _ = exp_moment(-np.asarray(m_eps if m_eps is not None else margins.clean))
    e = _ece(probs, scheme)
    bound = (K - 1) * Q
    out = [BoundReport.check("overlap-ece", e, min(1.0, bound) if clamp else bound, tol, **context)]
    if lambda_max is not None and cj is not None:
        out.append(BoundReport.check("overlap-gn", lambda_max, 2 * cj**2 * (K - 1) * Q, tol, **context))
    return out


def theorem_separable_oracle(probs: nc.ProbBatch, margins: MarginStats, cj: float | None, K: int,
                             lambda_max: float | None = None, scheme=calib.DEFAULT_SCHEME,
                             tol: float = DEFAULT_TOL, **context) -> list[BoundReport]:
    """Two-sided ECE control and GN coupling once every margin is positive.

    With ``gamma <= 0`` a single inactive report is returned and nothing is
    asserted.
    """
    gamma = margins.gamma
    if not gamma > 0:
        return [BoundReport.inactive("separable-regime", 0.0, gamma, tol, **context)]
    q = margins.moments()
    e = _ece(probs, scheme)
    mis = calib.mean_misconfidence(probs)
    c2 = None if cj is None else 2 * cj**2
    out = [
        BoundReport.check("separable-ece-lower", q.q_d / K, e, tol, **context),
        BoundReport.check("separable-ece-upper", e, (K - 1) * q.q_d, tol, **context),
        BoundReport.check("separable-gamma", (K - 1) * q.q_d, (K - 1) * np.exp(-gamma), tol, **context),
        BoundReport.check("separable-misconfidence", abs(e - mis), 0.0, 1e-12, **context),
    ]
    if lambda_max is not None and c2 is not None:
        out += [
            BoundReport.check("separable-gn-moment", lambda_max, c2 * (K - 1) * q.q_d, tol, **context),
            BoundReport.check("separable-gn-ece", c2 * (K - 1) * q.q_d, c2 * K * (K - 1) * e, tol, **context),
        ]
    if margins.robust is not None and margins.epsilon > 0:
        out += [
            BoundReport.check("separable-robust-lower", q.q_minus / K, e, tol, **context),
            BoundReport.check("separable-robust-upper", e, (K - 1) * q.q0, tol, **context),
        ]
        if lambda_max is not None and c2 is not None:
            out.append(BoundReport.check("separable-robust-gn", lambda_max, c2 * (K - 1) * q.q0, tol, **context))
    return out


def label_free_gn_bound(probs: nc.ProbBatch, predicted_margins, cj: float, K: int, lambda_max: float,
                        tol: float = DEFAULT_TOL, **context) -> BoundReport:
    """lambda_max <= 2 C_J^2 (K-1) mean(e^{-predicted margin})."""
    Q, _ = exp_moment(-np.asarray(predicted_margins, dtype=np.float64))
    return BoundReport.check("label-free-gn", lambda_max, 2 * cj**2 * (K - 1) * Q, tol, **context)


def lipschitz_lower_oracle(params: nc.ParamVector, x, y: int, epsilon: float, steps: int = 3,
                           alpha: float = 2 / 255, bounded: bool = False, tol: float = DEFAULT_TOL) -> BoundReport:
    """Checks ``m_eps >= m - eps * L_m`` with the PGD estimate and path surrogate."""
    r = robust_margins(params, np.asarray(x)[None, :], [y], epsilon, steps, alpha, bounded)
    return BoundReport.check("robust-lipschitz-lower", r.clean[0] - epsilon * r.lipschitz[0], r.robust[0],
                             tol, kind="surrogate")


def lipschitz_surrogate_report(margins: MarginStats, tol: float = DEFAULT_TOL, **context) -> BoundReport:
    """Worst per-sample slack of ``m_eps >= m - eps L_m`` over a batch."""
    slack = margins.robust - (margins.clean - margins.epsilon * margins.lipschitz)
    i = int(np.argmin(slack))
    return BoundReport.check("robust-lipschitz-lower", margins.clean[i] - margins.epsilon * margins.lipschitz[i],
                             margins.robust[i], tol, kind="surrogate", **context)
