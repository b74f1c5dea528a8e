"""Command line: ``semigcomp {calibrate,simulate,analyze,bootstrap}``.

Exit codes: 0 success, 2 input error (bad arguments, configs or data),
3 numerical failure (fits that fail or do not converge, unattained calibration
targets, too many failed replicates).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import datetime as _dt
import io
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, load_dataset, write_csv
from .glm import RankDeficientError, ZeroWeightError
from .inference import BootstrapFailure, bootstrap, replicates_csv, summary_csv
from .mixture import EMError
from .pipeline import (DISPLAY_NAMES, AnalysisConfig, EstimateReport, InputError, NumericalFailure,
                       parse_estimators, run_estimators)
from .simulation import (SIM_ESTIMATORS, CalibrationError, CalibrationTargets, ScenarioConfig,
                         ScenarioFailure, calibrate, estimates_csv, generate_dataset, metrics_csv,
                         metrics_table, replicate_rng, run_scenario)
from .pmm import EmptyPoolError

EXIT_INPUT = 2
EXIT_NUMERICAL = 3

INPUT_ERRORS = (InputError, DataError, FileNotFoundError, configparser.Error, ValueError)
NUMERICAL_ERRORS = (NumericalFailure, EMError, RankDeficientError, ZeroWeightError, EmptyPoolError,
                    np.linalg.LinAlgError,
                    CalibrationError, ScenarioFailure, BootstrapFailure)


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int
    version: str
    started: str
    finished: str = ""
    settings: dict = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["run"] = {"command": self.command, "config": self.config or "", "seed": str(self.seed),
                     "version": self.version, "started": self.started, "finished": self.finished}
        cp["settings"] = {k: str(v) for k, v in self.settings.items()}
        cp["outputs"] = {f"file{i}": p for i, p in enumerate(self.outputs)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class _Run:
    """Output directory bookkeeping: every written file goes into the manifest."""

    def __init__(self, args, command: str):
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command, getattr(args, "config", None), args.seed, __version__,
                                    _now())

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text)
        self.manifest.outputs.append(str(path))
        return path

    def finish(self, **settings):
        self.manifest.settings.update(settings)
        self.manifest.finished = _now()
        path = self.out / "manifest.ini"
        self.manifest.outputs.append(str(path))
        path.write_text(self.manifest.to_text())


# --- commands ------------------------------------------------------------------------


def _read_targets(path: str | None) -> tuple[CalibrationTargets, ScenarioConfig]:
    """``[targets]`` section (CalibrationTargets fields) plus an optional ``[scenario]`` base."""
    if path is None:
        return CalibrationTargets(), ScenarioConfig()
    text = Path(path).read_text()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    cp.read_string(text)
    base = ScenarioConfig.from_text(text) if "scenario" in cp else ScenarioConfig()
    kwargs = {}
    if "targets" in cp:
        for key, raw in cp["targets"].items():
            if key == "compliance_by_time":
                kwargs[key] = tuple(float(v) for v in raw.split(","))
            elif key in CalibrationTargets.__dataclass_fields__:
                kwargs[key] = float(raw)
            else:
                raise InputError(f"unknown target {key!r}")
    return CalibrationTargets(**kwargs), base


def cmd_calibrate(args) -> int:
    targets, base = _read_targets(args.config)
    run = _Run(args, "calibrate")
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    res = calibrate(targets, base, n=args.pilot_size, seed=args.seed, max_rounds=args.max_rounds,
                    log=log)
    header = f"calibrated scenario, outcome R^2 = {targets.r2}\npilot size {args.pilot_size}"
    run.write("scenario.cfg", res.config.to_text(header))
    run.write("calibration.txt", res.report())
    run.finish(pilot_size=args.pilot_size, max_rounds=args.max_rounds, **asdict(targets))
    print(res.stats.to_text())
    return 0


def cmd_simulate(args) -> int:
    cfg = ScenarioConfig.read(args.config) if args.config else ScenarioConfig()
    if args.n is not None:
        cfg = cfg.replace(n=args.n)
    run = _Run(args, "simulate")
    if args.dataset_only:
        ds = generate_dataset(cfg, replicate_rng(args.seed, 0))
        path = write_csv(ds, run.out / "dataset.csv")
        run.manifest.outputs.append(str(path))
        run.finish(n=cfg.n)
        return 0
    names = parse_estimators(args.estimators) if args.estimators else SIM_ESTIMATORS
    try:
        res = run_scenario(cfg, args.reps, names, args.mc_samples, args.seed, args.threads)
    except ScenarioFailure as exc:
        run.write("metrics.csv", metrics_csv(exc.result.rows))
        raise
    run.write("metrics.csv", metrics_csv(res.rows))
    title = f"n = {cfg.n}, R^2 = {cfg.r2_target}, replicates = {args.reps}, R = {args.mc_samples}"
    table = metrics_table(res.rows, title)
    run.write("metrics.txt", table)
    run.write("estimates.csv", estimates_csv(res))
    run.finish(n=cfg.n, reps=args.reps, R=args.mc_samples, estimators=",".join(names),
               threads=args.threads, oracle_mean=repr(res.oracle.mean), oracle_se=repr(res.oracle.se))
    print(table, end="")
    return 0


def _reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EstimateReport.FIELDS)
    for r in reports:
        row = []
        for f in EstimateReport.FIELDS:
            v = getattr(r, f)
            row.append("" if v is None else (repr(v) if isinstance(v, float) else v))
        w.writerow(row)
    return buf.getvalue()


def _reports_table(reports) -> str:
    names = [DISPLAY_NAMES[r.estimator] for r in reports]
    width = max(len("Estimator"), *map(len, names))
    lines = [f"{'Estimator':<{width}}  {'Estimate':>10}", "-" * (width + 12)]
    lines += [f"{n:<{width}}  {r.estimate:>10.3f}" for n, r in zip(names, reports)]
    return "\n".join(lines) + "\n"


def _analysis(args) -> AnalysisConfig:
    cfg = AnalysisConfig.read(args.config) if args.config else AnalysisConfig()
    return cfg.replace(R=args.mc_samples) if args.mc_samples is not None else cfg


def cmd_analyze(args) -> int:
    ds = load_dataset(args.data)
    cfg = _analysis(args)
    names = parse_estimators(args.estimators)
    run = _Run(args, "analyze")
    res = run_estimators(ds, names, cfg, args.seed)
    if res.failures:
        name, why = next(iter(res.failures.items()))
        raise NumericalFailure(f"{name}: {why}")
    reports = [res.reports[n] for n in names]
    run.write("estimates.csv", _reports_csv(reports))
    table = _reports_table(reports)
    run.write("estimates.txt", table)
    run.finish(data=args.data, estimators=",".join(names), **asdict(cfg))
    print(table, end="")
    return 0


def cmd_bootstrap(args) -> int:
    ds = load_dataset(args.data)
    cfg = _analysis(args)
    names = parse_estimators(args.estimators)
    run = _Run(args, "bootstrap")
    results = bootstrap(ds, names, B=args.reps, R=cfg.R, seed=args.seed, cfg=cfg,
                        threads=args.threads)
    text = summary_csv(results)
    run.write("bootstrap.csv", text)
    run.write("replicates.csv", replicates_csv(results))
    run.finish(data=args.data, estimators=",".join(names), B=args.reps, threads=args.threads,
               **asdict(cfg))
    print(text, end="")
    return 0


# --- parser --------------------------------------------------------------------------


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semigcomp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=False):
        sp.add_argument("--config", help="configuration file")
        sp.add_argument("--out-dir", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=20240601, help="master seed")
        sp.add_argument("--threads", type=_positive, default=1, help="worker processes")
        if data:
            sp.add_argument("--data", required=True, help="long-format CSV")

    sp = sub.add_parser("calibrate", help="calibrate a simulation scenario")
    common(sp)
    sp.add_argument("--pilot-size", type=_positive, default=50_000)
    sp.add_argument("--max-rounds", type=_positive, default=4)
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("simulate", help="replicate study of a scenario")
    common(sp)
    sp.add_argument("--reps", type=_positive, default=500)
    sp.add_argument("--mc-samples", type=_positive, default=2000, help="Monte Carlo samples R")
    sp.add_argument("--estimators", help="comma list (default: all simulation estimators)")
    sp.add_argument("--n", type=_positive, help="participants per trial (overrides the config)")
    sp.add_argument("--dataset-only", action="store_true",
                    help="write one simulated trial as CSV instead of running replicates")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("analyze", help="estimate on one dataset")
    common(sp, data=True)
    sp.add_argument("--estimators", required=True, help="comma list")
    sp.add_argument("--mc-samples", type=_positive, help="Monte Carlo samples R")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("bootstrap", help="participant-level bootstrap")
    common(sp, data=True)
    sp.add_argument("--estimators", required=True, help="comma list")
    sp.add_argument("--reps", type=_positive, default=1000, help="bootstrap replicates B")
    sp.add_argument("--mc-samples", type=_positive, help="Monte Carlo samples R")
    sp.set_defaults(func=cmd_bootstrap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NUMERICAL_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
