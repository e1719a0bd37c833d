"""CIFAR-10 binary reader, Gaussian-mixture generator and seeded splits."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate, optimize, stats

from .errors import DimensionError, FormatError, SpecError

CIFAR_RECORD = 3073
CIFAR_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST = "test_batch.bin"


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    K: int
    bounded: bool = False
    name: str = ""
    source_seed: int | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.size:
            raise DimensionError("features and labels disagree on n")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise SpecError(f"labels must lie in 0..{self.K - 1}")
        if self.bounded and self.features.size and (self.features.min() < 0 or self.features.max() > 1):
            raise SpecError("bounded dataset has features outside [0, 1]")

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.K, self.bounded, self.name, self.source_seed)


@dataclass(frozen=True)
class SplitSpec:
    train_n: int
    val_n: int
    subsample_seed: int = 0

    def __post_init__(self):
        if self.train_n < 0 or self.val_n < 0:
            raise SpecError("split sizes must be >= 0")

    @classmethod
    def small(cls, seed: int = 0) -> "SplitSpec":
        return cls(5000, 5000, seed)

    @classmethod
    def large(cls, seed: int = 0) -> "SplitSpec":
        return cls(45000, 5000, seed)


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise FormatError(f"missing CIFAR-10 file: {path}")
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} > 9")
    return rec[:, 1:].astype(np.float64) / 255.0, labels


def load_cifar_files(paths, name: str = "cifar10") -> LabeledDataset:
    parts = [_read_cifar_file(Path(p)) for p in paths]
    X = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, 3072))
    y = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, dtype=np.int64)
    if y.size == 0:
        raise FormatError("CIFAR-10 files contain no records")
    return LabeledDataset(X, y, 10, True, name)


def load_cifar10(dir_path, which: str = "train") -> LabeledDataset:
    """Load the binary distribution; ``which`` is 'train', 'test' or 'all'.

    All six files must be present so a partial download fails loudly.
    """
    root = Path(dir_path)
    for f in CIFAR_FILES + (CIFAR_TEST,):
        if not (root / f).is_file():
            raise FormatError(f"missing CIFAR-10 file: {root / f}")
    files = {"train": CIFAR_FILES, "test": (CIFAR_TEST,), "all": CIFAR_FILES + (CIFAR_TEST,)}.get(which)
    if files is None:
        raise SpecError(f"unknown CIFAR-10 part {which!r}")
    return load_cifar_files([root / f for f in files], f"cifar10-{which}")


def class_directions(K: int, d: int, seed: int = 0) -> np.ndarray:
    """Unit class directions: the standard basis when ``d >= K``, else seeded random unit vectors."""
    if d >= K:
        return np.eye(K, d)
    U = np.random.default_rng([seed, 7]).standard_normal((K, d))
    return U / np.linalg.norm(U, axis=1, keepdims=True)


def gen_gaussian_mixture(K: int, d: int, n_per_class: int, class_separation: float, seed: int = 0,
                         name: str = "") -> LabeledDataset:
    """Class ``k`` is ``N(separation * u_k, I_d)``; rows are shuffled with the seed."""
    if K < 2 or d < 1 or n_per_class < 1:
        raise SpecError("need K >= 2, d >= 1 and n_per_class >= 1")
    if not np.isfinite(class_separation) or class_separation < 0:
        raise SpecError("class_separation must be finite and >= 0")
    rng = np.random.default_rng(seed)
    U = class_directions(K, d, seed)
    y = np.repeat(np.arange(K), n_per_class)
    X = class_separation * U[y] + rng.standard_normal((y.size, d))
    perm = rng.permutation(y.size)
    return LabeledDataset(X[perm], y[perm], K, False, name or f"gmm-K{K}-d{d}-s{class_separation:g}", seed)


def bayes_accuracy(K: int, separation: float) -> float:
    """Bayes accuracy for means ``s e_k`` with unit noise.

    Only valid for orthonormal class directions, i.e. mixtures with ``d >= K``.

    The Bayes rule picks the nearest mean, so accuracy is
    ``P(s + g_0 > max_k g_k) = int phi(t) Phi(t + s)^(K-1) dt``.
    """
    if K == 2:
        return float(stats.norm.cdf(separation / np.sqrt(2.0)))
    f = lambda t: stats.norm.pdf(t) * stats.norm.cdf(t + separation) ** (K - 1)
    val, _ = integrate.quad(f, -np.inf, np.inf, epsabs=1e-12)
    return float(val)


def separation_for_bayes_accuracy(K: int, target: float) -> float:
    if not 1.0 / K < target < 1.0:
        raise SpecError(f"target accuracy must lie in (1/K, 1), got {target}")
    return float(optimize.brentq(lambda s: bayes_accuracy(K, s) - target, 0.0, 50.0, xtol=1e-12))


def split(dataset: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset]:
    if spec.train_n + spec.val_n > dataset.n:
        raise SpecError(f"split asks for {spec.train_n + spec.val_n} rows, dataset has {dataset.n}")
    perm = np.random.default_rng(spec.subsample_seed).permutation(dataset.n)
    return dataset.subset(perm[:spec.train_n]), dataset.subset(perm[spec.train_n:spec.train_n + spec.val_n])


def save_dataset(path, ds: LabeledDataset) -> None:
    np.savez(path, features=ds.features, labels=ds.labels, K=ds.K, bounded=ds.bounded, name=ds.name,
             source_seed=-1 if ds.source_seed is None else ds.source_seed)


def load_dataset(path) -> LabeledDataset:
    with np.load(path, allow_pickle=False) as z:
        seed = int(z["source_seed"])
        return LabeledDataset(z["features"], z["labels"], int(z["K"]), bool(z["bounded"]), str(z["name"]),
                              None if seed < 0 else seed)
