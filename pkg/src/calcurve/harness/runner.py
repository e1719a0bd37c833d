"""Training loop with periodic metric, curvature and bound probes."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import calib, curvature, data, lossfns, margins, optim
from .. import netcore as nc
from ..errors import BoundViolation, ConfigError, FormatError, NumericalFailure
from .config import ExperimentConfig, ProbeSettings, data_dir
from .logs import TrajectoryLog, write_bounds

log = logging.getLogger(__name__)


@dataclass
class ProbeResult:
    row: dict
    bounds: list[margins.BoundReport]
    table: calib.ReliabilityTable


@dataclass
class RunResult:
    log: TrajectoryLog
    bounds: list[tuple[int, str, margins.BoundReport]]
    params: nc.ParamVector
    status: str = "ok"
    log_dir: Path | None = None
    reliability: dict = field(default_factory=dict)

    def violations(self) -> list[tuple[int, str, margins.BoundReport]]:
        return [b for b in self.bounds if b[2].holds is False and b[2].kind == "theorem"]


def load_data(cfg: ExperimentConfig) -> tuple[data.LabeledDataset, data.LabeledDataset]:
    ds_cfg = cfg.dataset
    kind = ds_cfg["kind"]
    seed = cfg.seeds.data
    if kind == "gaussian_mixture":
        K = ds_cfg["K"]
        if "separation" in ds_cfg:
            sep = ds_cfg["separation"]
        elif "bayes_accuracy" in ds_cfg:
            if ds_cfg["d"] < K:
                raise ConfigError("bayes_accuracy needs d >= K (orthonormal class means)", "/dataset/bayes_accuracy")
            sep = data.separation_for_bayes_accuracy(K, ds_cfg["bayes_accuracy"])
        else:
            raise ConfigError("gaussian_mixture needs separation or bayes_accuracy", "/dataset")
        ds = data.gen_gaussian_mixture(K, ds_cfg["d"], ds_cfg["n_per_class"], sep, seed)
    elif kind == "cifar10":
        root = data_dir(ds_cfg.get("dir"))
        if root is None:
            raise ConfigError("no CIFAR-10 directory: set dataset.dir or CALCURVE_DATA_DIR", "/dataset/dir")
        ds = data.load_cifar10(root, ds_cfg.get("part", "train"))
    else:
        ds = data.load_dataset(ds_cfg["path"])
    sp = cfg.split or {"train_n": ds.n, "val_n": 0}
    return data.split(ds, data.SplitSpec(sp["train_n"], sp["val_n"], sp.get("seed", seed)))


def build_network(cfg: ExperimentConfig, d: int, K: int) -> nc.ParamVector:
    spec = nc.NetworkSpec(d, tuple(tuple(h) for h in cfg.network["hidden_layers"]), K,
                          init_seed=cfg.seeds.global_, init_scheme=cfg.network.get("init_scheme", "uniform-fan-in"))
    return nc.init_network(spec)


def _gn_kind(loss) -> str:
    return "mse" if loss == "mse" else "ce"


def probe_split(params: nc.ParamVector, ds: data.LabeledDataset, loss, settings: ProbeSettings, step: int,
                split_name: str, probe_seed: int) -> ProbeResult:
    """All metrics, curvature probes and bound checks for one split at one step."""
    X, y, K = ds.features, ds.labels, ds.K
    scheme = calib.BinningScheme.equal_width(settings.bins)
    z = nc.logits(params, X)
    probs = nc.softmax(nc.LogitBatch(z, y))
    acc = float(np.mean(nc.predicted_labels(z) == y))
    eps = settings.epsilon
    if eps > 0:
        rm = margins.robust_margins(params, X, y, eps, settings.pgd_steps, settings.pgd_alpha, ds.bounded)
        ms = margins.MarginStats(rm.clean, margins.predicted_margin(z), rm.robust, rm.lipschitz, eps)
    else:
        cm = margins.clean_margin((z, y))
        ms = margins.MarginStats(cm, margins.predicted_margin(z), cm.copy(), np.zeros_like(cm), 0.0)
    q = ms.moments()

    lam = bs = cj = None
    converged = None
    gn_idx = np.arange(ds.n)
    if settings.gn_max_examples is not None and settings.gn_max_examples < ds.n:
        gn_idx = np.sort(np.random.default_rng([probe_seed, step, 1]).choice(ds.n, settings.gn_max_examples,
                                                                             replace=False))
    if settings.curvature:
        ccfg = settings.curvature_config(probe_seed + step)
        est = curvature.gn_sharpness(params, X[gn_idx], ccfg, _gn_kind(loss))
        mb = curvature.sample_minibatch(ds.n, settings.probe_batch_size, np.random.default_rng([probe_seed, step, 2]))
        bs_est = curvature.batch_sharpness(params, X[mb], ccfg, _gn_kind(loss))
        lam, bs = est.lambda_max, bs_est.lambda_max
        converged = est.converged and bs_est.converged
        cj = curvature.cj_estimate(params, X[gn_idx])

    row = {
        "step": step, "split": split_name,
        "loss": float(lossfns.objective(params, X, y, loss, ds.bounded)),
        "accuracy": acc,
        "ece": calib.ece(probs, scheme),
        "mce": calib.mce(probs, scheme),
        "kce": calib.kce(probs) if ds.n >= 2 else None,
        "mean_margin": float(np.mean(ms.clean)),
        "min_margin": ms.gamma,
        "q_d": q.q_d, "q0_eps": q.q0,
        "lambda_max": lam, "batch_sharpness": bs, "cj_estimate": cj,
        "probe_converged": converged,
    }
    reports = []
    if settings.bounds:
        reports = _bound_reports(params, ds, probs, ms, lam, cj, gn_idx, loss, settings, scheme)
    return ProbeResult(row, reports, calib.reliability_table(probs, scheme))


def _subset_stats(ms: margins.MarginStats, idx) -> margins.MarginStats:
    return margins.MarginStats(ms.clean[idx], ms.predicted[idx], ms.robust[idx], ms.lipschitz[idx], ms.epsilon)


def _bound_reports(params, ds, probs, ms, lam, cj, gn_idx, loss, settings, scheme) -> list[margins.BoundReport]:
    tol = settings.bound_tol
    K = ds.K
    out = [
        margins.lemma_ece_gap_report(probs, scheme, tol),
        margins.lemma_gap_trueprob_report(probs, tol),
        margins.robust_trivial_report(ms, tol),
    ]
    if ms.epsilon > 0:
        out.append(margins.lipschitz_surrogate_report(ms, tol))
    # ECE statements use the whole split; curvature statements use the GN probe set
    out += margins.theorem_overlap_oracle(probs, ms, None, K, None, scheme, tol=tol)
    out += margins.theorem_separable_oracle(probs, ms, None, K, None, scheme, tol)
    grid = None
    if settings.grid_points is not None and ds.d <= 3 and ms.epsilon > 0:
        grid = margins.grid_robust_margins(params, ds.features, ds.labels, ms.epsilon, settings.grid_points,
                                           ds.bounded)
        for r in margins.theorem_overlap_oracle(probs, ms, None, K, None, scheme, tol=tol, robust=grid.certified):
            r.bound_id += "-grid"
            out.append(r)
    if lam is not None and _gn_kind(loss) == "ce":
        sub = nc.ProbBatch(probs.probs[gn_idx], probs.labels[gn_idx])
        sms = _subset_stats(ms, gn_idx)
        out += [r for r in margins.theorem_overlap_oracle(sub, sms, cj, K, lam, scheme, tol=tol) if "gn" in r.bound_id]
        out += [r for r in margins.theorem_separable_oracle(sub, sms, cj, K, lam, scheme, tol)
                if "gn" in r.bound_id]
        if grid is not None:
            for r in margins.theorem_overlap_oracle(sub, sms, cj, K, lam, scheme, tol=tol,
                                                    robust=grid.certified[gn_idx]):
                if "gn" in r.bound_id:
                    r.bound_id += "-grid"
                    out.append(r)
        out.append(margins.label_free_gn_bound(sub, sms.predicted, cj, K, lam, tol))
    return out


class _LazyGN:
    """GN product at fixed parameters, built on first use."""

    def __init__(self, params, X, kind):
        self.args = (params, X, kind)
        self.op = None

    def __call__(self, v):
        if self.op is None:
            self.op = curvature.GNOperator(*self.args)
        return self.op(v)


def train_step(params: nc.ParamVector, state: optim.OptimizerState, cfg: ExperimentConfig, Xb, yb, bounded: bool):
    loss = cfg.loss
    oc = cfg.optimizer

    def grad_fn(p, batch):
        return lossfns.value_and_grad(p, batch[0], batch[1], loss, bounded)[1]

    if oc.kind == "SAM":
        return optim.step_sam(params, (Xb, yb), oc, grad_fn), optim.OptimizerState(state.step + 1)
    g = grad_fn(params, (Xb, yb))
    if oc.kind in ("GD", "SGD"):
        return optim.step_gd(params, g, oc), optim.OptimizerState(state.step + 1)
    if oc.kind == "AdamW":
        return optim.step_adamw(params, g, state, oc)
    if oc.kind == "Muon":
        return optim.step_muon(params, g, state, oc)
    return optim.step_bulk_sgd(params, g, state, oc, _LazyGN(params, Xb, _gn_kind(loss)), cfg.seeds.probe)


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> RunResult:
    """Train for ``cfg.steps`` updates, probing at step 0, every ``probe_every`` steps and at the end."""
    train, val = load_data(cfg)
    params = build_network(cfg, train.d, train.K)
    splits = [(name, ds) for name, ds in (("train", train), ("val", val)) if name in cfg.probe.splits and ds.n > 0]
    out_dir = Path(cfg.log_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    traj = TrajectoryLog()
    bounds: list[tuple[int, str, margins.BoundReport]] = []
    result = RunResult(traj, bounds, params, log_dir=out_dir if write else None)
    state = optim.OptimizerState()
    batch_rng = np.random.default_rng([cfg.seeds.global_, 1])
    bs = cfg.optimizer.batch_size

    def probe(step):
        for name, ds in splits:
            pr = probe_split(result.params, ds, cfg.loss, cfg.probe, step, name, cfg.seeds.probe)
            traj.append(pr.row)
            bounds.extend((step, name, b) for b in pr.bounds)
            result.reliability[name] = pr.table
            bad = [b for b in pr.bounds if b.holds is False and b.kind == "theorem"]
            if bad and cfg.probe.abort_on_violation:
                _finish(result, cfg, state, write, "violation", f"step={step} split={name} {bad[0].bound_id}")
                if write:
                    _dump_violation(out_dir, step, name, bad, pr.row)
                raise BoundViolation(f"{bad[0].bound_id} failed at step {step} on {name}: "
                                     f"lhs={bad[0].lhs!r} rhs={bad[0].rhs!r}")

    probe(0)
    for t in range(cfg.steps):
        if bs is None or bs >= train.n:
            Xb, yb = train.features, train.labels
        else:
            idx = batch_rng.choice(train.n, size=bs, replace=False)
            Xb, yb = train.features[idx], train.labels[idx]
        try:
            result.params, state = train_step(result.params, state, cfg, Xb, yb, train.bounded)
            if not result.params.is_finite():
                raise NumericalFailure("parameters became non-finite")
        except NumericalFailure as exc:
            log.error("run terminated at step %d: %s", t + 1, exc)
            _finish(result, cfg, state, write, "diverged", f"step={t + 1} {exc}")
            return result
        step = t + 1
        if step % cfg.probe_every == 0 or step == cfg.steps:
            try:
                probe(step)
            except NumericalFailure as exc:
                _finish(result, cfg, state, write, "diverged", f"step={step} probe: {exc}")
                return result
    _finish(result, cfg, state, write, "ok", "")
    return result


def _finish(result: RunResult, cfg, state, write: bool, status: str, note: str) -> None:
    result.status = status
    result.log.status, result.log.note = status, note
    if not write:
        return
    d = result.log_dir
    result.log.write(d / "trajectory.csv")
    write_bounds(d / "bounds.csv", result.bounds)
    for name, table in result.reliability.items():
        table.to_csv(d / f"reliability_{name}.csv")
    nc.save_checkpoint(d / "checkpoint.bin", result.params)
    state.save(d / "optimizer_state.bin")
    (d / "status.json").write_text(json.dumps({"status": status, "note": note}, sort_keys=True) + "\n",
                                   encoding="utf-8")
    (d / "config.json").write_text(json.dumps(cfg.raw, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _dump_violation(out_dir: Path, step: int, split_name: str, bad, row) -> None:
    dump = {
        "step": step, "split": split_name, "row": row,
        "violations": [{"bound_id": b.bound_id, "lhs": b.lhs, "rhs": b.rhs, "slack": b.slack, "tol": b.tol}
                       for b in bad],
    }
    (out_dir / "violation.json").write_text(json.dumps(dump, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def find_runs(root) -> list[Path]:
    """Run directories under ``root`` (itself included) that hold a trajectory log."""
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"log directory not found: {root}")
    runs = sorted(p.parent for p in root.rglob("trajectory.csv"))
    if not runs:
        raise FormatError(f"no trajectory.csv under {root}")
    return runs
