"""Randomised certification of the softmax, calibration and margin lemmas."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import calib, margins
from .. import netcore as nc


@dataclass
class LemmaSummary:
    bound_id: str
    checks: int
    violations: int
    worst_slack: float

    def to_dict(self) -> dict:
        return {"bound_id": self.bound_id, "checks": self.checks, "violations": self.violations,
                "worst_slack": self.worst_slack}


class _Tally:
    def __init__(self, tol):
        self.tol = tol
        self.data: dict[str, list] = {}

    def add(self, bound_id: str, slack) -> None:
        slack = np.atleast_1d(np.asarray(slack, dtype=np.float64))
        c = self.data.setdefault(bound_id, [0, 0, np.inf])
        c[0] += slack.size
        c[1] += int(np.sum(~(slack >= -self.tol)))
        c[2] = min(c[2], float(slack.min()))

    def summary(self) -> list[LemmaSummary]:
        return [LemmaSummary(k, *v) for k, v in self.data.items()]


def random_logits(rng: np.random.Generator, n: int, K: int) -> np.ndarray:
    """Logit draws spanning near-uniform to saturated softmax outputs, with some exact ties."""
    scale = np.exp(rng.uniform(np.log(1e-2), np.log(60.0), size=(n, 1)))
    z = scale * rng.standard_normal((n, K))
    ties = rng.random(n) < 0.1
    z[ties] = rng.integers(-2, 3, size=(int(ties.sum()), K)).astype(np.float64)
    return z


def certify_lemmas(samples: int = 100_000, seed: int = 0, Ks=range(2, 11), tol: float = 1e-10,
                   batch_size: int = 200, nets_per_K: int = 4) -> list[LemmaSummary]:
    rng = np.random.default_rng(seed)
    tally = _Tally(tol)
    scheme = calib.DEFAULT_SCHEME
    for K in Ks:
        z = random_logits(rng, samples, K)
        y = rng.integers(0, K, size=samples)
        tail, m, upper, lower = margins.tail_quantities(z, y)
        tally.add("softmax-tail-upper", upper - tail)
        tally.add("softmax-tail-lower", tail - lower)
        pos = m >= 0
        tally.add("softmax-tail-sandwich", tail[pos] - np.exp(-m[pos]) / K)
        p = nc.softmax(z)
        tally.add("logit-hessian-gershgorin", margins.gershgorin_slack(p))

        probs = nc.ProbBatch(p, y)
        gap = margins.abs_gap_rows(probs)
        tally.add("gap-true-prob", tail - gap)
        for s in range(0, samples - batch_size + 1, batch_size):
            sl = slice(s, s + batch_size)
            b = nc.ProbBatch(p[sl], y[sl])
            tally.add("ece-abs-gap", float(np.mean(gap[sl])) - calib.ece(b, scheme))

        # the robust margin can only lie below the clean one
        for j in range(nets_per_K):
            d = int(rng.integers(2, 6))
            spec = nc.NetworkSpec(d, ((8, "tanh" if j % 2 else "relu"),), K, init_seed=int(rng.integers(2**32)))
            params = nc.init_network(spec)
            X = rng.standard_normal((256, d))
            yy = rng.integers(0, K, size=256)
            rm = margins.robust_margins(params, X, yy, epsilon=0.1, steps=3, alpha=0.04)
            tally.add("robust-below-clean", rm.clean - rm.robust)
    return tally.summary()
