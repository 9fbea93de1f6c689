"""Command-line entry points: sparsify, simulate, eval, fit-calibrator.

Exit status is 0 on success, 1 on a data or runtime error and 2 on a usage
error (argparse's own convention).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import CalibrationError, FitError, calibrate_array, fit_arrays, write_trajectory_csv
from .dataset import DatasetError, SplitMode, SplitSpec, load_dataset, save_dataset, sparsify
from .metrics import MetricsError, pseudo_pr, reliability
from .pseudo_labeling import ConfigError, PipelineConfig
from .simulator import GenerationError, SimConfig, SimConfigError, SimulationError, run_training_loop

MANIFEST = "manifest.json"
RUN_DEFAULTS = {
    "iterations": 30000,
    "checkpoint_every": 500,
    "ece_window": 10000,
    "n_bins": 15,
    "split": {"mode": "per-class", "percent": 50, "seed": 0},
}


class CliError(Exception):
    pass


def default_config_path() -> Path:
    return Path(str(resources.files("calteacher") / "data" / "default_sim.json"))


# -- config -------------------------------------------------------------------


def _read_json(path: Path) -> dict:
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise CliError(f"cannot read {path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise CliError(f"{path}: top level must be an object")
    return data


def _build(cls, section: str, values: dict):
    if not isinstance(values, dict):
        raise CliError(f"config field {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise CliError(f"unknown config field {section}.{key}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid config field in {section!r}: {e}") from e


def resolve_config(data: dict, overrides: dict) -> tuple[SimConfig, PipelineConfig, dict]:
    """Merge a config (or a previous manifest) with flag overrides; flags win."""
    if "config" in data and isinstance(data["config"], dict):
        data = data["config"]
    for key in data:
        if key not in ("sim", "pipeline", "run"):
            raise CliError(f"unknown config field {key}")
    sim_vals = dict(data.get("sim", {}))
    run = {**RUN_DEFAULTS, **data.get("run", {})}
    for key in run:
        if key not in RUN_DEFAULTS:
            raise CliError(f"unknown config field run.{key}")
    split = {**RUN_DEFAULTS["split"], **run["split"]}
    for key in split:
        if key not in ("mode", "percent", "seed"):
            raise CliError(f"unknown config field run.split.{key}")

    if overrides.get("seed") is not None:
        sim_vals["seed"] = overrides["seed"]
        split["seed"] = overrides["seed"]
    if overrides.get("drift_rate") is not None:
        sim_vals["drift_rate"] = overrides["drift_rate"]
    for key in ("iterations", "checkpoint_every"):
        if overrides.get(key) is not None:
            run[key] = overrides[key]

    sim = _build(SimConfig, "sim", sim_vals)
    pipe = _build(PipelineConfig, "pipeline", data.get("pipeline", {}))
    for key in ("iterations", "checkpoint_every", "ece_window", "n_bins"):
        v = run[key]
        if not isinstance(v, int) or isinstance(v, bool) or v < (0 if key == "iterations" else 1):
            raise CliError(f"invalid config field run.{key}: {v!r}")
    try:
        spec = SplitSpec(split["mode"], int(split["percent"]), int(split["seed"]))
    except (DatasetError, TypeError, ValueError) as e:
        raise CliError(f"invalid config field run.split: {e}") from e
    run["split"] = {"mode": spec.mode.value, "percent": spec.percent, "seed": spec.seed}
    return sim, pipe, run


def _output_listing(n_checkpoints: int) -> list[str]:
    names = [MANIFEST, "predictions.csv", "run.csv", "trajectory.csv"]
    for c in range(1, n_checkpoints + 1):
        names += [f"reliability/ckpt{c:04d}_cal.csv", f"reliability/ckpt{c:04d}_raw.csv"]
    return sorted(names)


# -- commands -----------------------------------------------------------------


def cmd_sparsify(args) -> int:
    spec = SplitSpec(args.mode, args.percent, args.seed)
    data = load_dataset(args.input)
    sparse, report = sparsify(data, spec)
    out = Path(args.output)
    save_dataset(sparse, out)
    report_path = Path(args.report) if args.report else out.with_name(out.stem + "_deletions.csv")
    report.write_csv(report_path)
    kept = len(sparse.annotations)
    print(f"kept {kept} of {len(data.annotations)} annotations -> {out}")
    return 0


def cmd_simulate(args) -> int:
    config_path = Path(args.config) if args.config else default_config_path()
    data = _read_json(config_path)
    # a manifest points back at the config it was resolved from
    source = data.get("config_path", str(config_path)) if "config" in data else str(config_path)
    sim, pipe, run = resolve_config(
        data,
        {
            "seed": args.seed,
            "iterations": args.iterations,
            "drift_rate": args.drift_rate,
            "checkpoint_every": args.checkpoint_every,
        },
    )
    out = Path(args.out)
    (out / "reliability").mkdir(parents=True, exist_ok=True)
    n_ckpt = run["iterations"] // run["checkpoint_every"]
    manifest = {
        "version": __version__,
        "config_path": source,
        "seeds": {"sim": sim.seed, "split": run["split"]["seed"]},
        "config": {"sim": asdict(sim), "pipeline": asdict(pipe), "run": run},
        "outputs": _output_listing(n_ckpt),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")

    report = run_training_loop(
        sim,
        pipe,
        run["iterations"],
        run["checkpoint_every"],
        split=SplitSpec(**run["split"]),
        ece_window=run["ece_window"],
        n_bins=run["n_bins"],
        keep_reliability=True,
    )
    report.write_csv(out / "run.csv")
    write_trajectory_csv(report.refits, out / "trajectory.csv")
    for ck, (raw, cal) in zip(report.checkpoints, report.reliability):
        raw.write_csv(out / "reliability" / f"ckpt{ck.checkpoint:04d}_raw.csv")
        cal.write_csv(out / "reliability" / f"ckpt{ck.checkpoint:04d}_cal.csv")
    p_raw, m = report.final_window
    p_cal = calibrate_array(p_raw, report.final_params)
    with open(out / "predictions.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["p_raw", "p_cal", "m"])
        for r, c, mm in zip(p_raw, p_cal, m):
            w.writerow([repr(float(r)), repr(float(c)), int(mm)])

    if report.checkpoints:
        last = report.checkpoints[-1]
        print(f"{len(report.checkpoints)} checkpoints; final ece_raw={last.ece_raw:.4f} ece_cal={last.ece_cal:.4f} "
              f"a={last.a:.4f} b={last.b:.4f}")
    else:
        print("no checkpoints")
    return 0


def _read_columns(path: Path, required: tuple[str, ...], optional: tuple[str, ...] = ()) -> dict[str, np.ndarray]:
    try:
        with path.open(newline="") as f:
            rows = list(csv.DictReader(f))
            header = rows[0].keys() if rows else []
    except OSError as e:
        raise CliError(f"cannot read {path}: {e.strerror or e}") from e
    if not rows:
        raise CliError(f"{path}: no samples")
    missing = [c for c in required if c not in header]
    if missing:
        raise CliError(f"{path}: missing column(s) {', '.join(missing)}")
    cols = {}
    try:
        for c in required + tuple(o for o in optional if o in header):
            cols[c] = np.array([float(r[c]) for r in rows])
    except (TypeError, ValueError) as e:
        raise CliError(f"{path}: non-numeric value ({e})") from e
    m = cols.get("m")
    if m is not None and not np.all((m == 0) | (m == 1)):
        raise CliError(f"{path}: column m must hold 0 or 1")
    return cols


def cmd_eval(args) -> int:
    cols = _read_columns(Path(args.predictions), ("p_raw", "m"), ("p_cal",))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = [("n", str(len(cols["m"])))]
    rel = reliability(cols["p_raw"], cols["m"], args.n_bins)
    rel.write_csv(out / "reliability_raw.csv")
    summary.append(("ece_raw", repr(rel.ece)))
    if "p_cal" in cols:
        rel = reliability(cols["p_cal"], cols["m"], args.n_bins)
        rel.write_csv(out / "reliability_cal.csv")
        summary.append(("ece_cal", repr(rel.ece)))
    # headline number: calibrated scores when present
    summary.append(("ece", repr(rel.ece)))

    if bool(args.pseudo) != bool(args.withheld):
        raise CliError("--pseudo and --withheld go together")
    if args.pseudo:
        pseudo = [a for a in load_dataset(args.pseudo).annotations if a.pseudo]
        held = list(load_dataset(args.withheld).annotations)
        precision, recall = pseudo_pr(pseudo, held, args.tau_match)
        summary += [("pseudo_precision", repr(precision)), ("pseudo_recall", repr(recall))]

    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows(summary)
    for k, v in summary:
        print(f"{k},{v}")
    return 0


def cmd_fit_calibrator(args) -> int:
    cols = _read_columns(Path(args.samples), ("p_hat", "m"))
    p = cols["p_hat"]
    if np.any((p <= 0) | (p >= 1)):
        raise CliError(f"{args.samples}: p_hat must lie in (0, 1)")
    params, mean_nll = fit_arrays(p, cols["m"])
    print("a,b,nll")
    print(f"{params.a!r},{params.b!r},{mean_nll!r}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calteacher", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sparsify", help="delete annotations to emulate a sparse dataset")
    p.add_argument("--mode", required=True, choices=[m.value for m in SplitMode])
    p.add_argument("--percent", type=int, default=0, choices=range(0, 101), metavar="{0..100}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="deletion-report CSV (default: <output>_deletions.csv)")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_sparsify)

    p = sub.add_parser("simulate", help="run the pipeline against the synthetic detector")
    p.add_argument("--config", help="JSON config or a previous manifest (default: bundled config)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--drift-rate", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="reliability and ECE of scored predictions")
    p.add_argument("predictions", help="CSV with columns p_raw,m and optionally p_cal")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-bins", type=int, default=15)
    p.add_argument("--pseudo", help="labels JSON with pseudo labels")
    p.add_argument("--withheld", help="JSON with the withheld annotations")
    p.add_argument("--tau-match", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit-calibrator", help="fit Platt parameters to a p_hat,m CSV")
    p.add_argument("samples")
    p.set_defaults(func=cmd_fit_calibrator)
    return parser


DATA_ERRORS = (
    CliError, DatasetError, CalibrationError, FitError, MetricsError, ConfigError,
    SimConfigError, SimulationError, GenerationError, OSError,
)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DATA_ERRORS as e:
        print(f"calteacher {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
