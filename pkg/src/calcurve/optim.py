"""First-order optimizers over a flat ParamVector: GD, SGD, AdamW, Muon, SAM, BulkSGD."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import netcore as nc
from .curvature import CurvatureProbeConfig, block_power_iteration
from .errors import FormatError, NumericalFailure, SpecError

log = logging.getLogger(__name__)

KINDS = ("GD", "SGD", "AdamW", "Muon", "SAM", "BulkSGD")
STATE_MAGIC = b"CALO1"
MUON_COEFFS = (3.4445, -4.7750, 2.0315)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "GD"
    lr: float = 0.01
    batch_size: int | None = None  # None: full batch
    momentum: float = 0.95  # Muon momentum
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    sam_rho: float = 0.05
    muon_ns_steps: int = 5
    muon_coeffs: tuple[float, float, float] = MUON_COEFFS
    muon_polish_steps: int = 2  # cubic Newton-Schulz rounds after the quintic ones
    bulk_k: int = 1
    bulk_refresh_every: int = 50
    bulk_power_iters: int = 20

    def __post_init__(self):
        object.__setattr__(self, "muon_coeffs", tuple(float(c) for c in self.muon_coeffs))
        if self.kind not in KINDS:
            raise SpecError(f"unknown optimizer kind {self.kind!r}")
        if not (np.isfinite(self.lr) and self.lr >= 0):
            raise SpecError("lr must be finite and >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise SpecError("batch_size must be >= 1")
        if self.kind == "GD" and self.batch_size is not None:
            raise SpecError("GD is full batch; leave batch_size unset")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise SpecError("need 0 <= beta1, beta2 < 1 and eps > 0")
        if not 0 <= self.momentum < 1:
            raise SpecError("momentum must be in [0, 1)")
        if self.sam_rho < 0 or self.weight_decay < 0:
            raise SpecError("sam_rho and weight_decay must be >= 0")
        if self.muon_ns_steps < 0 or self.muon_polish_steps < 0 or len(self.muon_coeffs) != 3:
            raise SpecError("bad Muon iteration settings")
        if self.bulk_k < 0 or self.bulk_refresh_every < 1 or self.bulk_power_iters < 1:
            raise SpecError("bulk_k must be >= 0 and the refresh cadence >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["muon_coeffs"] = list(self.muon_coeffs)
        return d


@dataclass
class OptimizerState:
    step: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    basis: np.ndarray | None = None  # (P, k) orthonormal columns, BulkSGD only
    basis_step: int = -1

    def to_bytes(self) -> bytes:
        names = sorted(self.buffers)
        arrays = [self.buffers[k] for k in names]
        if self.basis is not None:
            arrays.append(self.basis)
        header = {
            "step": self.step,
            "basis_step": self.basis_step,
            "buffers": [[k, list(self.buffers[k].shape)] for k in names],
            "basis": None if self.basis is None else list(self.basis.shape),
        }
        h = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
        return STATE_MAGIC + struct.pack("<I", len(h)) + h + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "OptimizerState":
        if data[:5] != STATE_MAGIC:
            raise FormatError("not a calcurve optimizer state")
        (hl,) = struct.unpack("<I", data[5:9])
        header = json.loads(data[9:9 + hl].decode("utf-8"))
        off = 9 + hl

        def take(shape):
            nonlocal off
            size = int(np.prod(shape)) * 8
            if off + size > len(data):
                raise FormatError("optimizer state truncated")
            a = np.frombuffer(data[off:off + size], dtype="<f8").astype(np.float64).reshape(shape)
            off += size
            return a

        buffers = {k: take(shape) for k, shape in header["buffers"]}
        basis = None if header["basis"] is None else take(header["basis"])
        if off != len(data):
            raise FormatError("trailing bytes in optimizer state")
        return cls(header["step"], buffers, basis, header["basis_step"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "OptimizerState":
        return cls.from_bytes(Path(path).read_bytes())


def _check_grad(params: nc.ParamVector, grad: nc.ParamVector):
    if len(grad) != len(params):
        raise SpecError("gradient and parameter layouts differ")
    if not grad.is_finite():
        raise NumericalFailure("non-finite gradient")


def step_gd(params: nc.ParamVector, grad: nc.ParamVector, cfg: OptimizerConfig) -> nc.ParamVector:
    """``theta - lr * g``; the caller supplies the full-data gradient."""
    _check_grad(params, grad)
    return params.with_values(params.values - cfg.lr * grad.values)


step_sgd = step_gd  # identical update; only the gradient's batch differs


def step_adamw(params: nc.ParamVector, grad: nc.ParamVector, state: OptimizerState, cfg: OptimizerConfig):
    _check_grad(params, grad)
    g = grad.values
    m = state.buffers.get("m", np.zeros_like(g))
    v = state.buffers.get("v", np.zeros_like(g))
    t = state.step + 1
    m = cfg.beta1 * m + (1 - cfg.beta1) * g
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
        raise NumericalFailure("non-finite AdamW moments")
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    theta = params.values * (1 - cfg.lr * cfg.weight_decay)
    theta = theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    new_state = OptimizerState(t, {"m": m, "v": v}, state.basis, state.basis_step)
    return params.with_values(theta), new_state


def newton_schulz(G: np.ndarray, steps: int = 5, coeffs=MUON_COEFFS, polish_steps: int = 2) -> np.ndarray:
    """Approximate polar factor of ``G`` by an odd matrix polynomial iteration.

    The quintic rounds move every singular value quickly into a band around 1
    without converging inside it; the cubic rounds afterwards contract that
    band towards 1. A zero matrix is returned unchanged.
    """
    G = np.asarray(G, dtype=np.float64)
    norm = np.linalg.norm(G)
    if norm == 0:
        return G.copy()
    tall = G.shape[0] > G.shape[1]
    X = (G.T if tall else G) / norm
    a, b, c = coeffs
    for _ in range(steps):
        A = X @ X.T
        X = a * X + (b * A + c * A @ A) @ X
    for _ in range(polish_steps):
        X = 1.5 * X - 0.5 * (X @ X.T) @ X
    return X.T if tall else X


def step_muon(params: nc.ParamVector, grad: nc.ParamVector, state: OptimizerState, cfg: OptimizerConfig):
    _check_grad(params, grad)
    mom = cfg.momentum * state.buffers.get("mom", np.zeros_like(grad.values)) + grad.values
    upd = params.with_values(mom.copy())
    for arr in upd.views():
        if arr.ndim == 2:
            if not np.any(arr):
                continue
            arr[...] = newton_schulz(arr, cfg.muon_ns_steps, cfg.muon_coeffs, cfg.muon_polish_steps)
            arr *= np.sqrt(max(arr.shape))
    new_state = OptimizerState(state.step + 1, {"mom": mom}, state.basis, state.basis_step)
    return params.with_values(params.values - cfg.lr * upd.values), new_state


def step_sam(params: nc.ParamVector, batch, cfg: OptimizerConfig,
             base_grad_fn: Callable[[nc.ParamVector, object], nc.ParamVector]) -> nc.ParamVector:
    """Ascend to ``theta + rho g/||g||`` and descend with the gradient found there."""
    g = base_grad_fn(params, batch)
    _check_grad(params, g)
    gn = float(np.linalg.norm(g.values))
    if cfg.sam_rho == 0 or gn == 0:
        return step_sgd(params, g, cfg)
    probe = params.with_values(params.values + (cfg.sam_rho / gn) * g.values)
    g_adv = base_grad_fn(probe, batch)
    return step_sgd(params, g_adv, cfg)


def project_out(g: np.ndarray, V: np.ndarray | None) -> np.ndarray:
    """``g - V V^T g`` with a second pass to clean up rounding."""
    if V is None or V.shape[1] == 0:
        return g
    out = g - V @ (V.T @ g)
    return out - V @ (V.T @ out)


def step_bulk_sgd(params: nc.ParamVector, grad: nc.ParamVector, state: OptimizerState, cfg: OptimizerConfig,
                  gnvp: Callable[[np.ndarray], np.ndarray] | None, seed: int = 0):
    """SGD with the gradient projected off the top-k GN eigenvectors.

    ``gnvp`` is the GN product at the current parameters; it is only called
    when the cached basis is missing or older than ``bulk_refresh_every``.
    """
    _check_grad(params, grad)
    basis, basis_step = state.basis, state.basis_step
    if cfg.bulk_k > 0 and (basis is None or state.step - basis_step >= cfg.bulk_refresh_every):
        if gnvp is None:
            raise SpecError("BulkSGD needs a GN product to refresh its basis")
        pc = CurvatureProbeConfig(power_iters=cfg.bulk_power_iters, deflation_k=cfg.bulk_k,
                                  rng_seed=seed + state.step)
        basis = block_power_iteration(gnvp, len(params), cfg.bulk_k, pc).vectors
        basis_step = state.step
    g = project_out(grad.values, basis if cfg.bulk_k > 0 else None)
    new_state = OptimizerState(state.step + 1, dict(state.buffers), basis, basis_step)
    return params.with_values(params.values - cfg.lr * g), new_state
