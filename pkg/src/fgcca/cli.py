"""Command-line front end: ``fgcca {fit,simulate,predict,reconstruct,summarize}``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
Every command writes ``manifest.json`` and ``run.log`` into ``--out``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .components import ScoreModel, estimate_components, predict_points, reconstruct, subject_samples
from .covariance import ProcessModel, estimate_model
from .data import LongitudinalDataset, Schema, load_csv, summarize
from .deflation import FgccaFit, fit_higher_order
from .errors import ConfigError, FgccaError, NumericalError, ValidationError
from .response import estimate_response_block, fit_higher_order_with_response, load_response_csv
from .simulation import SimSpec, run_sim1, run_sim2, run_sim3
from .solver import FgccaConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("fgcca")

MANIFEST_SCHEMA = 1
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

FIT_DEFAULTS = {
    "model": {
        "grid_size": 51,
        "mean_bandwidth": None,
        "cov_bandwidth": None,
        "normalize": True,
        "central_fraction": 0.5,
    },
    "solver": {
        "C": None,
        "tau": 1.0,
        "scheme": "identity",
        "epsilon": 1e-8,
        "max_iters": 1000,
        "n_components": 2,
        "deflation": "orthogonal",
        "init": "deterministic-svd",
        "seed": None,
        "sign_convention": True,
    },
    "scores": {"method": "blup", "max_gap_fraction": 0.2},
    "response": {"standardize": False},
}

SIM_CONFIG_VERSION = 1
SIM_DEFAULTS = {"sim": "sim1", "replicates": 20, "Ns": None, "sparsities": None}


def load_config(path) -> dict:
    """Read a TOML or JSON config file (chosen by extension)."""
    if path is None:
        return {}
    p = Path(path)
    try:
        if p.suffix.lower() == ".toml":
            with open(p, "rb") as fh:
                return tomllib.load(fh)
        with open(p, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from None


def merge_defaults(user: dict, defaults: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown config section or key {key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config section {key!r} must be a table")
            for k in val:
                if k not in defaults[key]:
                    raise ConfigError(f"unknown option {key}.{k}")
            out[key].update(val)
        else:
            out[key] = val
    return out


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialize {type(x)}")


def write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


class Run:
    """Output directory, log file and manifest bookkeeping for one command."""

    def __init__(self, command: str, out: str):
        self.command = command
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.timings: dict[str, float] = {}
        self._t = time.perf_counter()
        self.handler = logging.FileHandler(self.out / "run.log", mode="w", encoding="utf-8")
        self.handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root = logging.getLogger()
        root.addHandler(self.handler)
        root.setLevel(logging.INFO)
        logging.captureWarnings(True)

    def input(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"input file not found: {p}")
        self.inputs[str(p)] = file_hash(p)
        return p

    def output(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def lap(self, name: str) -> None:
        now = time.perf_counter()
        self.timings[name] = now - self._t
        self._t = now

    def finish(self, config: dict, seed, threads: int, status: str = "ok") -> None:
        write_json(
            self.out / "manifest.json",
            {
                "schema_version": MANIFEST_SCHEMA,
                "command": self.command,
                "status": status,
                "config": config,
                "inputs": self.inputs,
                "outputs": sorted(self.outputs),
                "seed": seed,
                "threads": threads,
                "versions": {
                    "fgcca": __version__,
                    "numpy": np.__version__,
                    "scipy": scipy.__version__,
                    "python": platform.python_version(),
                },
                "timings": self.timings,
            },
        )

    def close(self) -> None:
        logging.getLogger().removeHandler(self.handler)
        self.handler.close()
        logging.captureWarnings(False)


# ---------------------------------------------------------------- commands


def _schema(path, run: Run) -> Schema | None:
    return None if path is None else Schema.from_json(run.input(path))


def _fit_config(cfg: dict, J: int, seed) -> FgccaConfig:
    solver = dict(cfg["solver"])
    if solver["C"] is None:
        solver["C"] = (np.ones((J, J)) - np.eye(J)).tolist()
    if seed is not None:
        solver["seed"] = seed
    cfg["solver"] = solver
    fc = FgccaConfig.from_dict(solver)
    if fc.J != J:
        raise ConfigError(f"design matrix C is {fc.J}x{fc.J} but the data have {J} processes")
    return fc


def cmd_fit(args, run: Run) -> dict:
    cfg = merge_defaults(load_config(args.config and run.input(args.config)), FIT_DEFAULTS)
    ds = load_csv(run.input(args.data), _schema(args.schema, run))
    fc = _fit_config(cfg, ds.J, args.seed)
    run.lap("load")
    mcfg = cfg["model"]
    model = estimate_model(
        ds,
        grid_size=int(mcfg["grid_size"]),
        mean_bandwidth=mcfg["mean_bandwidth"],
        cov_bandwidth=mcfg["cov_bandwidth"],
        normalize=bool(mcfg["normalize"]),
        central_fraction=float(mcfg["central_fraction"]),
        threads=args.threads,
    )
    run.lap("estimate")
    if args.response:
        Y, names = load_response_csv(run.input(args.response), ds.subjects)
        block = estimate_response_block(ds, Y, model, cfg["response"]["standardize"], names)
        fit = fit_higher_order_with_response(model, block, fc)
    else:
        fit = fit_higher_order(model, fc)
    run.lap("fit")
    sm = ScoreModel.from_fit(model, fit)
    comps = estimate_components(ds, sm, cfg["scores"]["method"], float(cfg["scores"]["max_gap_fraction"]))
    run.lap("scores")

    write_json(run.output("model.json"), model.to_dict())
    write_json(run.output("fit.json"), fit.to_dict())
    comps.to_csv(run.output("components.csv"))
    with open(run.output("trace.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("order", "sweep", "criterion"))
        for m, st in enumerate(fit.states, start=1):
            for s, v in enumerate(st.criterion_trace):
                w.writerow((m, s, repr(float(v))))
    for m, st in enumerate(fit.states, start=1):
        if not st.converged:
            log.warning("order %d stopped after %d sweeps without meeting epsilon", m, st.iterations)
    return cfg


def _sim_spec(cfg: dict, seed) -> tuple[SimSpec, dict]:
    version = cfg.pop("config_version", SIM_CONFIG_VERSION)
    if version != SIM_CONFIG_VERSION:
        raise ConfigError(f"unsupported simulation config version {version}")
    bench = {k: cfg.pop(k, v) for k, v in SIM_DEFAULTS.items()}
    if seed is not None:
        cfg["seed"] = seed
    spec = SimSpec.from_dict(cfg)
    if bench["sim"] not in ("sim1", "sim2", "sim3"):
        raise ConfigError(f"unknown simulation {bench['sim']!r}; choose sim1, sim2 or sim3")
    if int(bench["replicates"]) < 1:
        raise ConfigError("replicates must be at least 1")
    return spec, bench


def cmd_simulate(args, run: Run) -> dict:
    cfg = load_config(run.input(args.spec))
    if args.replicates is not None:
        cfg["replicates"] = args.replicates
    spec, bench = _sim_spec(dict(cfg), args.seed)
    reps = int(bench["replicates"])
    if bench["sim"] == "sim1":
        report = run_sim1(spec, reps, args.threads)
    elif bench["sim"] == "sim2":
        report = run_sim2(spec, reps, args.threads)
    else:
        report = run_sim3(spec, reps, args.threads, bench["Ns"], bench["sparsities"])
    run.lap("simulate")
    stem = report.file_stem()
    run.outputs += [f"{stem}.csv", f"{stem}.json"]
    report.write(run.out, include_runtime=False)
    if report.failures:
        log.warning("%d of %d replicates failed", report.failures, reps)
    return {**bench, **spec.to_dict()}


def _load_bundle(model_dir, run: Run, n_components=None) -> tuple[ProcessModel, FgccaFit, ScoreModel]:
    d = Path(model_dir)
    with open(run.input(d / "model.json"), encoding="utf-8") as fh:
        model = ProcessModel.from_dict(json.load(fh))
    with open(run.input(d / "fit.json"), encoding="utf-8") as fh:
        fit = FgccaFit.from_dict(json.load(fh))
    return model, fit, ScoreModel.from_fit(model, fit, n_components)


def _read_targets(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = ("subject_id", "process_id", "time")
        missing = [c for c in need if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"targets file is missing column(s): {', '.join(missing)}")
        has_value = "value" in (reader.fieldnames or [])
        for line, row in enumerate(reader, start=2):
            try:
                v = float(row["value"]) if has_value and row["value"] not in ("", None) else None
                rows.append((row["subject_id"].strip(), int(row["process_id"]), float(row["time"]), v))
            except (TypeError, ValueError):
                raise ValidationError(f"targets line {line}: malformed row") from None
    return rows, has_value


def cmd_predict(args, run: Run) -> dict:
    model, fit, sm = _load_bundle(args.model, run, args.n_components)
    partial = load_csv(run.input(args.partial), Schema(n_processes=model.J), require_all_processes=False)
    targets, has_value = _read_targets(run.input(args.targets))
    by_subject: dict[str, list] = {}
    for r in targets:
        if not 1 <= r[1] <= model.J:
            raise ValidationError(f"target process {r[1]} outside 1..{model.J}")
        by_subject.setdefault(r[0], []).append(r)
    known = set(partial.subjects)
    cols = ["subject_id", "process_id", "time", "prediction"] + (["observed", "squared_error"] if has_value else [])
    with open(run.output("predictions.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for sid, rows in by_subject.items():
            if sid in known:
                samples = subject_samples(partial, sid)
            else:
                log.warning("subject %s has no partial data; predicting the mean function", sid)
                samples = [None] * model.J
            times = [[r[2] for r in rows if r[1] == j + 1] for j in range(model.J)]
            preds = predict_points(samples, sm, times)
            cursor = [0] * model.J
            for _, pid, t, v in rows:
                p = float(preds[pid - 1][cursor[pid - 1]])
                cursor[pid - 1] += 1
                out = [sid, pid, repr(t), repr(p)]
                if has_value:
                    out += ["", ""] if v is None else [repr(v), repr((p - v) ** 2)]
                w.writerow(out)
    run.lap("predict")
    return {"n_components": sm.M}


def cmd_reconstruct(args, run: Run) -> dict:
    model, fit, sm = _load_bundle(args.model, run, args.n_components)
    ds = load_csv(run.input(args.data), Schema(n_processes=model.J), require_all_processes=False)
    comps = estimate_components(ds, sm, "blup")
    with open(run.output("reconstructions.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("subject_id", "process_id", "time", "value"))
        for i, sid in enumerate(ds.subjects):
            for j, traj in enumerate(reconstruct(comps.xi[i], sm), start=1):
                for t, v in zip(traj.grid.points, traj.values):
                    w.writerow((sid, j, repr(float(t)), repr(float(v))))
    comps.to_csv(run.output("components.csv"))
    run.lap("reconstruct")
    return {"n_components": sm.M}


def cmd_summarize(args, run: Run) -> dict:
    ds = load_csv(run.input(args.data), _schema(args.schema, run), require_all_processes=False)
    rows = summarize(ds)
    with open(run.output("summary.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(
            f"process {r['process_id']} ({r['label']}): {r['n_subjects']} subjects, {r['n_obs']} obs, "
            f"per-subject {r['min_n']}..{r['max_n']} (median {r['median_n']:g}), "
            f"time [{r['time_min']:g}, {r['time_max']:g}]"
        )
    run.lap("summarize")
    return {"N": ds.N, "J": ds.J}


COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "predict": cmd_predict,
    "reconstruct": cmd_reconstruct,
    "summarize": cmd_summarize,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="fgcca-out", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--threads", type=int, default=1, help="maximum worker count")

    p = argparse.ArgumentParser(prog="fgcca", description="Functional generalized canonical correlation analysis")
    p.add_argument("--version", action="version", version=f"fgcca {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", parents=[common], help="estimate the model and canonical functions")
    f.add_argument("data", help="long-format CSV (subject_id, process_id, time, value)")
    f.add_argument("--config", help="TOML or JSON config")
    f.add_argument("--schema", help="JSON sidecar with intervals and labels")
    f.add_argument("--response", help="CSV with subject_id and response columns")

    s = sub.add_parser("simulate", parents=[common], help="run a simulation benchmark")
    s.add_argument("spec", help="JSON or TOML simulation spec")
    s.add_argument("--replicates", type=int, default=None)

    pr = sub.add_parser("predict", parents=[common], help="predict values at target times")
    pr.add_argument("model", help="directory written by 'fgcca fit'")
    pr.add_argument("partial", help="observed data CSV")
    pr.add_argument("targets", help="CSV with subject_id, process_id, time and optional value")
    pr.add_argument("--n-components", type=int, default=None)

    r = sub.add_parser("reconstruct", parents=[common], help="reconstruct trajectories on the model grids")
    r.add_argument("model", help="directory written by 'fgcca fit'")
    r.add_argument("data", help="observed data CSV")
    r.add_argument("--n-components", type=int, default=None)

    su = sub.add_parser("summarize", parents=[common], help="per-process observation summary")
    su.add_argument("data")
    su.add_argument("--schema")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        run = Run(args.command, args.out)
    except OSError as exc:
        print(f"error: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_INVALID
    code = EXIT_OK
    config: dict = {}
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            config = COMMANDS[args.command](args, run)
    except (ValidationError, ValueError, OSError) as exc:
        code = EXIT_INVALID
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
    except (NumericalError, FgccaError, ArithmeticError, np.linalg.LinAlgError) as exc:
        code = EXIT_NUMERICAL
        log.error("%s", exc)
        print(f"numerical failure: {exc}", file=sys.stderr)
    finally:
        run.finish(config, args.seed, args.threads, "ok" if code == EXIT_OK else "failed")
        run.close()
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
