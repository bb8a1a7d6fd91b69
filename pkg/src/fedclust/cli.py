"""Command-line experiment runner.

    fedclust run --config base.cfg --set codec.uplink=none --out runs/
    fedclust run --config base.cfg --sweep codec.uplink=mucsc,signsgd,none
    fedclust verify-rates --config base.cfg
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as config_mod
from . import ratecheck
from .errors import FedClustError, InvalidConfig
from .fedsim import Simulation

ROUNDS_COLUMNS = ("round", "loss", "accuracy", "up_bytes", "down_bytes", "comm_s", "comp_s")
COMPARISON_COLUMNS = (
    "run",
    "uplink",
    "downlink",
    "rounds",
    "final_loss",
    "final_accuracy",
    "total_traffic_bytes",
    "total_comm_s",
    "total_comp_s",
    "compression_rate",
    "target_reached",
)
EXIT_CONFIG = 2
EXIT_EXISTS = 3


class RunExists(FedClustError):
    code = "run_exists"


def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, int):
        return str(x)
    return repr(float(x))


def _load_config(args, extra=()):
    overrides = config_mod.parse_overrides(args.set) + list(extra)
    if args.seed is not None:
        overrides.append(("experiment.seed", str(args.seed)))
    if args.config:
        return config_mod.load(args.config, overrides)
    return config_mod.loads("", overrides)


def _out_root(args) -> Path:
    return Path(args.out or os.environ.get("FEDCLUST_OUT") or "runs")


def write_rounds(path, reports, timing: bool):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUNDS_COLUMNS)
        for r in reports:
            w.writerow(
                [r.round, _num(r.loss), _num(r.accuracy), r.up_bytes, r.down_bytes, _num(r.comm_s),
                 _num(r.comp_s) if timing else ""]
            )


def execute(cfg_flat: dict, run_dir: str, force: bool) -> dict:
    """Run one experiment into ``run_dir``; returns its summary."""
    cfg = config_mod.from_flat(cfg_flat)
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    digest = cfg.content_hash()
    if manifest_path.exists() and not force:
        raise RunExists(f"{run_dir} already holds a run (use --force to overwrite)")
    run_dir.mkdir(parents=True, exist_ok=True)

    result = Simulation(cfg).run()
    write_rounds(run_dir / "rounds.csv", result.reports, cfg.output.timing)
    result.ledger.to_csv(run_dir / "traffic.csv")
    summary = dict(result.summary, config_hash=digest)
    if not cfg.output.timing:
        summary.pop("total_comp_s", None)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    manifest = {
        "name": cfg.experiment.name,
        "config": cfg.to_flat(),
        "config_hash": digest,
        "output_dir": str(run_dir),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return summary


def _execute_star(job):
    return execute(*job)


def write_comparison(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for run, s in rows:
            w.writerow([run] + [_num(s.get(c)) if not isinstance(s.get(c), str) else s[c]
                                for c in COMPARISON_COLUMNS[1:]])


def cmd_run(args) -> int:
    if not args.sweep:
        cfg = _load_config(args)
        run_dir = _out_root(args) / cfg.experiment.name
        summary = execute(cfg.to_flat(), str(run_dir), args.force)
        print(json.dumps({"run_dir": str(run_dir), **summary}, sort_keys=True))
        return 0

    key, sep, values = args.sweep.partition("=")
    if not sep or not values:
        raise InvalidConfig(f"--sweep {args.sweep!r} is not key=v1,v2,...")
    base = _load_config(args)
    root = _out_root(args) / base.experiment.name
    jobs, names = [], []
    for value in [v.strip() for v in values.split(",") if v.strip()]:
        cfg = _load_config(args, extra=[(key.strip(), value)])
        name = f"{key.strip()}={value}"
        names.append(name)
        jobs.append((cfg.to_flat(), str(root / name), args.force))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_execute_star, jobs))
    else:
        summaries = [_execute_star(j) for j in jobs]
    write_comparison(root / "comparison.csv", list(zip(names, summaries)))
    print(json.dumps({"sweep_dir": str(root), "runs": names}))
    return 0


def cmd_verify_rates(args) -> int:
    cfg = _load_config(args)
    rows = ratecheck.verify_rates(cfg)
    print(f"d={cfg.verify.d} h={cfg.verify.h} K={cfg.fedavg.participants} N={cfg.fedavg.n_clients}")
    print(f"{'codec':<9}{'down':<9}{'formula':>10}{'measured':>10}{'reference':>11}  result")
    for r in rows:
        verdict = {True: "PASS", False: "FAIL", None: "-"}[r.passed]
        ref = f"{r.reference:.2f}" if r.reference is not None else "-"
        print(f"{r.codec:<9}{r.downlink:<9}{r.formula:>10.2f}{r.measured:>10.2f}{ref:>11}  {verdict}")
    if args.json:
        Path(args.json).write_text(json.dumps([r.as_dict() for r in rows], indent=2) + "\n")
    return 0 if all(r.passed is not False for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedclust", description="Compressed FedAvg simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI-style experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="shorthand for --set experiment.seed=N")

    run = sub.add_parser("run", help="run one experiment or a sweep")
    common(run)
    run.add_argument("--sweep", metavar="KEY=V1,V2", help="one run per value")
    run.add_argument("--out", help="output root (default $FEDCLUST_OUT or ./runs)")
    run.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    run.add_argument("--jobs", type=int, default=1, help="parallel processes for sweeps")
    run.set_defaults(func=cmd_run)

    vr = sub.add_parser("verify-rates", help="closed-form vs measured compression rates")
    common(vr)
    vr.add_argument("--json", help="also write the table as JSON")
    vr.set_defaults(func=cmd_verify_rates)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RunExists as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return EXIT_EXISTS
    except FedClustError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
