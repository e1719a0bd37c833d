"""Binned calibration error, MCE, kernel calibration error and reliability tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SpecError
from .netcore import ProbBatch


@dataclass(frozen=True)
class BinningScheme:
    """Bin edges ``0 = a_0 < ... < a_M = 1``; bins are ``(a_{m-1}, a_m]``.

    A confidence of exactly 0 is assigned to the first bin.
    """

    edges: tuple[float, ...]

    def __post_init__(self):
        e = tuple(float(x) for x in self.edges)
        object.__setattr__(self, "edges", e)
        if len(e) < 2 or e[0] != 0.0 or e[-1] != 1.0 or any(b <= a for a, b in zip(e, e[1:])):
            raise SpecError("bin edges must increase strictly from 0 to 1")

    @classmethod
    def equal_width(cls, M: int = 15) -> "BinningScheme":
        if M < 1:
            raise SpecError("need at least one bin")
        return cls(tuple(np.linspace(0.0, 1.0, M + 1)))

    @property
    def M(self) -> int:
        return len(self.edges) - 1

    def assign(self, conf: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(np.asarray(self.edges), conf, side="left") - 1
        return np.clip(idx, 0, self.M - 1)


DEFAULT_SCHEME = BinningScheme.equal_width(15)


@dataclass
class ReliabilityTable:
    lows: np.ndarray
    highs: np.ndarray
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray
    n: int

    def rows(self):
        for row in zip(self.lows, self.highs, self.counts, self.accuracy, self.confidence):
            yield float(row[0]), float(row[1]), int(row[2]), float(row[3]), float(row[4])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_low", "bin_high", "count", "acc", "conf"])
            for r in self.rows():
                w.writerow([repr(r[0]), repr(r[1]), r[2], repr(r[3]), repr(r[4])])


def _need_labels(probs: ProbBatch):
    if probs.labels is None or probs.n == 0:
        raise DimensionError("calibration metrics need a nonempty labelled batch")


def predictions(probs: ProbBatch) -> tuple[np.ndarray, np.ndarray]:
    """Predicted label (smallest index among maximisers) and its probability."""
    yhat = np.argmax(probs.probs, axis=1)
    return yhat, probs.probs[np.arange(probs.n), yhat]


def correctness(probs: ProbBatch) -> tuple[np.ndarray, np.ndarray]:
    yhat, conf = predictions(probs)
    return (yhat == probs.labels).astype(np.float64), conf


def reliability_table(probs: ProbBatch, scheme: BinningScheme = DEFAULT_SCHEME) -> ReliabilityTable:
    _need_labels(probs)
    correct, conf = correctness(probs)
    bins = scheme.assign(conf)
    M = scheme.M
    counts = np.bincount(bins, minlength=M)
    sum_acc = np.bincount(bins, weights=correct, minlength=M)
    sum_conf = np.bincount(bins, weights=conf, minlength=M)
    nz = counts > 0
    acc = np.zeros(M)
    cf = np.zeros(M)
    acc[nz] = sum_acc[nz] / counts[nz]
    cf[nz] = sum_conf[nz] / counts[nz]
    e = np.asarray(scheme.edges)
    return ReliabilityTable(e[:-1], e[1:], counts, acc, cf, probs.n)


def ece(probs: ProbBatch, scheme: BinningScheme = DEFAULT_SCHEME) -> float:
    t = reliability_table(probs, scheme)
    return float(np.sum(t.counts / t.n * np.abs(t.accuracy - t.confidence)))


def mce(probs: ProbBatch, scheme: BinningScheme = DEFAULT_SCHEME) -> float:
    t = reliability_table(probs, scheme)
    nz = t.counts > 0
    return float(np.max(np.abs(t.accuracy[nz] - t.confidence[nz])))


def mean_misconfidence(probs: ProbBatch) -> float:
    _need_labels(probs)
    return float(np.mean(1.0 - probs.probs[np.arange(probs.n), probs.labels]))


def median_bandwidth(conf: np.ndarray) -> float:
    """Median pairwise |c_i - c_j| over i < j; 1.0 if every confidence coincides."""
    conf = np.asarray(conf, dtype=np.float64)
    i, j = np.triu_indices(conf.size, k=1)
    h = float(np.median(np.abs(conf[i] - conf[j]))) if i.size else 0.0
    return h if h > 0 else 1.0


def kce_from_scores(conf, correct, bandwidth: float | None = None, chunk: int = 2048) -> float:
    """Unbiased kernel calibration error from (confidence, correctness) pairs.

    Mean over ordered pairs i != j of ``k(c_i, c_j) r_i r_j`` with residuals
    ``r = correct - conf`` and a Gaussian kernel of width ``bandwidth``.
    ``correct`` may be fractional (an expected correctness).
    """
    c = np.asarray(conf, dtype=np.float64)
    r = np.asarray(correct, dtype=np.float64) - c
    n = c.size
    if n < 2:
        raise DimensionError("KCE needs at least two samples")
    if bandwidth is None:
        # sorting first keeps the subsampled median independent of sample order
        bandwidth = median_bandwidth(np.sort(c)[:: max(1, n // 1024)])
    if bandwidth <= 0:
        raise SpecError("bandwidth must be > 0")
    inv = 1.0 / (2.0 * bandwidth * bandwidth)
    total = 0.0
    for s in range(0, n, chunk):
        blk = np.exp(-((c[s:s + chunk, None] - c[None, :]) ** 2) * inv)
        total += float(r[s:s + chunk] @ (blk @ r))
    total -= float(np.sum(r * r))  # drop the i == j terms, where k = 1
    return total / (n * (n - 1))


def kce(probs: ProbBatch, bandwidth: float | None = None) -> float:
    _need_labels(probs)
    correct, conf = correctness(probs)
    return kce_from_scores(conf, correct, bandwidth)
