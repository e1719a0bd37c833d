"""Command line: ``run``, ``certify-lemmas``, ``report`` and ``gen-data``.

Failures print one JSON object on stderr, e.g.
``{"error": "ConfigError", "message": "...", "pointer": "/optimizer/lr"}``.
Exit codes: 0 success, 1 a run diverged or a bound failed, 2 invalid input.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .. import data
from ..errors import BoundViolation, CalcurveError, ConfigError, SpecError
from . import certify, config, logs, runner, stats


def _error(exc: Exception, **extra) -> None:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        payload["pointer"] = exc.pointer
    payload.update(extra)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def cmd_run(args) -> int:
    cfg = config.load_config(args.config)
    if args.log_dir:
        cfg.log_dir = args.log_dir
    try:
        res = runner.run_experiment(cfg)
    except BoundViolation as exc:
        _error(exc, log_dir=cfg.log_dir)
        return 1
    print(json.dumps({"status": res.status, "log_dir": str(res.log_dir), "rows": len(res.log.rows)},
                     sort_keys=True))
    return 0 if res.status == "ok" else 1


def cmd_certify(args) -> int:
    t0 = time.perf_counter()
    summary = certify.certify_lemmas(args.samples, args.seed, tol=args.tol)
    total = sum(s.violations for s in summary)
    for s in summary:
        print(json.dumps(s.to_dict(), sort_keys=True))
    print(json.dumps({"violations": total, "samples_per_K": args.samples, "seconds": round(time.perf_counter() - t0, 2)},
                     sort_keys=True))
    return 0 if total == 0 else 1


def cmd_report(args) -> int:
    runs = runner.find_runs(args.logdir)
    trajs = [logs.TrajectoryLog.read(r / "trajectory.csv") for r in runs]
    names = [str(r.relative_to(args.logdir)) if r != Path(args.logdir) else r.name for r in runs]
    pairs = [tuple(p.split(":")) for p in args.pairs] if args.pairs else stats.DEFAULT_PAIRS
    for p in pairs:
        if len(p) != 2:
            raise SpecError(f"pair must look like 'x:y', got {':'.join(p)!r}")
    rows = []
    for split in args.splits:
        if all(t.steps(split) for t in trajs):
            rows += stats.correlation_report(trajs, pairs, split)
    text = stats.write_correlation_csv(rows, Path(args.logdir) / "correlation.csv", names)
    sys.stdout.write(text)
    failures = []
    for r in runs:
        bpath = r / "bounds.csv"
        if bpath.is_file():
            failures += [(r, b) for b in logs.read_bounds(bpath) if b["holds"] is False and b["kind"] == "theorem"]
    statuses = [t.status for t in trajs]
    if failures:
        r, b = failures[0]
        print(json.dumps({"error": "BoundViolation", "count": len(failures), "run": str(r),
                          "bound_id": b["bound_id"], "step": b["step"], "slack": b["slack"]}, sort_keys=True),
              file=sys.stderr)
        return 1
    if any(s != "ok" for s in statuses):
        print(json.dumps({"error": "RunFailed", "statuses": statuses}, sort_keys=True), file=sys.stderr)
        return 1
    return 0


def _load_params(text: str) -> dict:
    p = Path(text)
    if p.suffix == ".json" or p.is_file():
        if not p.is_file():
            raise ConfigError(f"parameter file not found: {p}")
        return json.loads(p.read_text(encoding="utf-8"))
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"gen-data parameters are neither a file nor JSON: {exc.msg}") from exc


def cmd_gen_data(args) -> int:
    params = _load_params(args.params)
    raw = {"kind": "gaussian_mixture", **{k: v for k, v in params.items() if k not in ("seed", "out")}}
    config.validate({"dataset": raw, "network": {"hidden_layers": []}, "optimizer": {"kind": "GD", "lr": 0.1},
                     "steps": 0})
    K = raw["K"]
    sep = raw.get("separation")
    if sep is None:
        if "bayes_accuracy" not in raw:
            raise ConfigError("need separation or bayes_accuracy", "/dataset")
        sep = data.separation_for_bayes_accuracy(K, raw["bayes_accuracy"])
    seed = int(params.get("seed", 0))
    ds = data.gen_gaussian_mixture(K, raw["d"], raw["n_per_class"], sep, seed)
    out = Path(args.out or params.get("out") or "dataset.npz")
    data.save_dataset(out, ds)
    print(json.dumps({"path": str(out), "n": ds.n, "d": ds.d, "K": K, "separation": sep,
                      "bayes_accuracy": data.bayes_accuracy(K, sep)}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="calcurve", description="calibration / margin / curvature experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="train and probe according to a JSON config")
    r.add_argument("config")
    r.add_argument("--log-dir", help="override the config's log_dir")
    r.set_defaults(func=cmd_run)
    c = sub.add_parser("certify-lemmas", help="randomised lemma checks, no training")
    c.add_argument("--samples", type=int, default=100_000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-10)
    c.set_defaults(func=cmd_certify)
    p = sub.add_parser("report", help="correlation table and bound audit for run directories")
    p.add_argument("logdir")
    p.add_argument("--pairs", nargs="*", help="column pairs as x:y (default ece:lambda_max kce:lambda_max)")
    p.add_argument("--splits", nargs="*", default=["train", "val"])
    p.set_defaults(func=cmd_report)
    g = sub.add_parser("gen-data", help="write a Gaussian-mixture dataset to .npz")
    g.add_argument("params", help="JSON file or inline JSON with K, d, n_per_class, separation|bayes_accuracy, seed")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CalcurveError, OSError, json.JSONDecodeError) as exc:
        _error(exc)
        return 1 if isinstance(exc, BoundViolation) else 2


if __name__ == "__main__":
    sys.exit(main())
