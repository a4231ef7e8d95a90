"""Command-line front end: ``paleosmc <command> [--config FILE] [--set key=value ...]``.

Commands: ``simulate``, ``infer``, ``compare``, ``filter``, ``postprocess``
and ``validate``. Every command writes ``manifest.json`` into its output
directory before doing any work.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import io
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import RunConfig, load_config_file, parse_set, resolve_threads
from .data import DatasetError, ProxyDataset, dumps_json, fmt, load_dataset, write_json
from .distributions import CONVENTIONS
from .filter import ParticleFilter
from .models import ConfigurationError, get_model
from .orbital import OrbitalError, load_orbital_table, synthetic_orbital_table
from .simulate import PRESETS, generate_synthetic
from .smc2 import (EvidenceReport, SMC2Collapse, compare_reports, posterior_summary, read_theta_csv,
                   smc2_run, write_theta_csv)
from .streams import stream

log = logging.getLogger("paleosmc")

EXIT_FAILURE = 1
EXIT_USAGE = 2


class CommandError(RuntimeError):
    pass


# -- shared helpers -------------------------------------------------------------

def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def resolve_orbital(config: RunConfig):
    """Return ``(solution, description)`` for the configured orbital table."""
    if config.orbital is None:
        return None, None
    if config.orbital == "builtin":
        text = synthetic_orbital_table()
        return load_orbital_table(io.StringIO(text)), {
            "source": "builtin approximate table (leading quasi-periodic terms only)",
            "sha256": hashlib.sha256(text.encode()).hexdigest(),
        }
    path = Path(config.orbital)
    if not path.exists():
        raise ConfigurationError(f"orbital table {path} does not exist")
    return load_orbital_table(path), {"source": str(path), "sha256": _file_hash(path)}


def build_model(config: RunConfig, orbital):
    if config.forced and config.model.lower() in ("sm91", "t06", "pp12") and orbital is None:
        raise ConfigurationError(
            f"forced {config.model} needs an orbital table: set orbital=<path> (or orbital=builtin)")
    return get_model(config.model, config.forced, orbital, config.prior_overrides(), **config.model_options())


def write_manifest(out: Path, command: str, config: RunConfig, threads: int, argv, extra=None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "threads": threads,
        "prior_conventions": CONVENTIONS,
        "config": config.flat(),
        "status": "started",
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    write_json(path, manifest)
    return path


def update_manifest(path: Path, **fields) -> None:
    import json

    data = json.loads(path.read_text())
    data.update(fields)
    write_json(path, data)


def _dataset_info(config: RunConfig):
    if not config.dataset:
        raise ConfigurationError("no dataset given (use --dataset or --set dataset=<path>)")
    path = Path(config.dataset)
    if not path.exists():
        raise ConfigurationError(f"dataset {path} does not exist")
    ds = load_dataset(path)
    return ds, {"path": str(path), "sha256": _file_hash(path), "content_hash": ds.content_hash,
                "n_observations": len(ds)}


# -- commands -------------------------------------------------------------------

def cmd_simulate(config: RunConfig, threads: int, argv, out: Path) -> int:
    preset = config.preset or ("sm91-f" if not config.theta else None)
    truth = {}
    model_name, forced = config.model, config.forced
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        p = PRESETS[preset]
        model_name, forced = p["model"], p["forced"]
        truth.update(p["theta"])
    truth.update({k: float(v) for k, v in config.theta.items()})
    config.model, config.forced = model_name, forced
    orbital, orbital_info = resolve_orbital(config)
    manifest = write_manifest(out, "simulate", config, threads, argv, {"orbital": orbital_info})
    model = build_model(config, orbital)
    theta = model.theta_from_dict(truth)
    rng = stream(config.seed, "simulate")
    ds, traj = generate_synthetic(theta, model, config.start_kyr, config.end_kyr, config.spacing_kyr, rng,
                                  substeps=config.substeps, max_dt=config.max_dt)
    ds = ProxyDataset(ds.ages, ds.values, f"synthetic {model.label} seed={config.seed}")
    ds.write(out / "dataset.csv")
    with open(out / "latent.csv", "w") as fh:
        fh.write("age_kyr," + ",".join(f"x{i + 1}" for i in range(model.dim)) + ",regime\n")
        for t, x, r in zip(traj.times, traj.x, traj.regime):
            fh.write(f"{fmt(t)}," + ",".join(fmt(v) for v in x) + f",{int(r)}\n")
    write_json(out / "dataset.truth.json", {
        "model": model.label, "preset": preset, "theta": dict(zip(model.param_names, theta.tolist())),
        "seed": config.seed, "start_kyr": config.start_kyr, "end_kyr": config.end_kyr,
        "spacing_kyr": config.spacing_kyr, "substeps": config.substeps, "max_dt": config.max_dt,
        "n_observations": len(ds), "dataset_content_hash": ds.content_hash, "orbital": orbital_info,
        "latent_file": "latent.csv",
    })
    update_manifest(manifest, status="complete", dataset_content_hash=ds.content_hash)
    print(f"wrote {len(ds)} observations to {out / 'dataset.csv'}")
    return 0


def cmd_infer(config: RunConfig, threads: int, argv, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_manifest(out, "infer", config, threads, argv)
    try:
        ds, ds_info = _dataset_info(config)
        orbital, orbital_info = resolve_orbital(config)
        update_manifest(manifest, dataset=ds_info, orbital=orbital_info)
        model = build_model(config, orbital)
        update_manifest(manifest, model=model.describe(), priors=model.registry.describe())
        result = smc2_run(model, ds, config.smc2_config(threads),
                          progress=lambda m, info: log.info("obs %d: log evidence %.4f ess %.1f n_x %d", m,
                                                            info["log_evidence"], info["ess"], info["n_x"]))
    except SMC2Collapse as exc:
        if exc.report is not None:
            exc.report.write(out / "evidence.json")
        update_manifest(manifest, status="failed", error=str(exc))
        raise
    except Exception as exc:
        update_manifest(manifest, status="failed", error=f"{type(exc).__name__}: {exc}")
        raise
    result.report.write(out / "evidence.json")
    write_theta_csv(out / "theta.csv", result.theta, result.weights, result.param_names)
    _write_smc2_diagnostics(out / "diagnostics.csv", result.report, ds)
    update_manifest(manifest, status="complete", log_evidence=result.log_evidence)
    print(f"{model.label}: log evidence {result.log_evidence:.6f} (log10 {result.report.log10_evidence:.6f})")
    return 0


def _write_smc2_diagnostics(path, report: EvidenceReport, ds: ProxyDataset) -> None:
    diag = report.diagnostics
    at = {m: a for m, a in zip(diag.get("resample_at", []), diag.get("acceptance", []))}
    nx_changes = dict((m, n) for m, n in diag.get("n_x", []))
    n_x = nx_changes.get(0)
    cum = 0.0
    lines = ["index,age_kyr,increment,cumulative,ess,resampled,acceptance,n_x"]
    for m, inc in enumerate(report.increments):
        cum = math.fsum([cum, inc])
        n_x = nx_changes.get(m, n_x) if m in nx_changes and m > 0 else n_x
        acc = at.get(m)
        lines.append(",".join([
            str(m), fmt(ds.ages[m]), fmt(inc), fmt(cum), fmt(diag["ess"][m]), str(int(m in at)),
            "" if acc is None else fmt(acc), str(n_x),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_compare(config: RunConfig, threads: int, argv, out: Path, reports, labels=None) -> int:
    write_manifest(out, "compare", config, threads, argv, {"reports": [str(r) for r in reports]})
    loaded = [EvidenceReport.read(p) for p in reports]
    labels = labels or [r.model for r in loaded]
    if len(labels) != len(loaded):
        raise ConfigurationError("need one label per report")
    table = compare_reports(loaded, labels)
    lines = ["model,log10_evidence,log10_bayes_factor"]
    lines += [f"{lab},{fmt(ev)},{fmt(bf)}" for lab, ev, bf in table]
    text = "\n".join(lines) + "\n"
    (out / "comparison.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def _run_dir(config: RunConfig) -> Path:
    if not config.run:
        raise ConfigurationError("no fitted run given (use --run or --set run=<dir>)")
    path = Path(config.run)
    if not (path / "theta.csv").exists():
        raise ConfigurationError(f"{path} does not contain theta.csv")
    return path


def cmd_postprocess(config: RunConfig, threads: int, argv, out: Path) -> int:
    run = _run_dir(config)
    write_manifest(out, "postprocess", config, threads, argv, {"theta_sha256": _file_hash(run / "theta.csv")})
    theta, weights, names = read_theta_csv(run / "theta.csv")
    summary = posterior_summary(theta, weights, names, config.model)
    with open(out / "marginals.csv", "w") as fh:
        fh.write("parameter,value,weight\n")
        for j, name in enumerate(names):
            for v, w in zip(theta[:, j], weights):
                fh.write(f"{name},{fmt(v)},{fmt(w)}\n")
    compact = {"parameters": summary["parameters"], "derived": {}}
    for key, d in summary["derived"].items():
        with open(out / f"{key}.csv", "w") as fh:
            fh.write("value,weight\n")
            for v, w in zip(d["values"], d["weights"]):
                fh.write(f"{fmt(v)},{fmt(w)}\n")
        compact["derived"][key] = {k: v for k, v in d.items() if k not in ("values", "weights")}
    write_json(out / "summary.json", compact)
    for name, s in summary["parameters"].items():
        q = s["quantiles"]
        print(f"{name:>10s}  mean {s['mean']:.4g}  95% [{q['0.025']:.4g}, {q['0.975']:.4g}]")
    return 0


def cmd_filter(config: RunConfig, threads: int, argv, out: Path) -> int:
    run = _run_dir(config)
    ds, ds_info = _dataset_info(config)
    orbital, orbital_info = resolve_orbital(config)
    write_manifest(out, "filter", config, threads, argv, {"dataset": ds_info, "orbital": orbital_info,
                                                           "theta_sha256": _file_hash(run / "theta.csv")})
    model = build_model(config, orbital)
    theta, weights, names = read_theta_csv(run / "theta.csv")
    if names != model.param_names:
        raise ConfigurationError(f"theta.csv columns {names} do not match {model.label} {model.param_names}")
    g = stream(config.seed, "hindcast")
    draws = theta[g.choice(theta.shape[0], size=config.draws, p=weights / weights.sum())]
    pf = ParticleFilter(model, config.n_x, config.proposal, config.resampling, config.substeps, config.max_dt,
                        config.seed, "hindcast", (), threads, keep_history=True)
    system = pf.run(draws, ds)
    means, variances = system.filtering_moments(0)
    _, obs = model.unpack(draws)
    pred = obs.d_offset + obs.c_scale * means
    mix_mean = means.mean(axis=0)
    mix_sd = np.sqrt(variances.mean(axis=0) + means.var(axis=0))
    lo, hi = np.quantile(means, [0.025, 0.975], axis=0)
    with open(out / "hindcast.csv", "w") as fh:
        fh.write("age_kyr,x1_mean,x1_sd,x1_mean_q025,x1_mean_q975,d18O_fitted,d18O_observed\n")
        for k in range(len(ds)):
            fh.write(",".join(fmt(v) for v in (ds.ages[k], mix_mean[k], mix_sd[k], lo[k], hi[k],
                                                pred[:, k].mean(), ds.values[k])) + "\n")
    print(f"wrote hindcast of {len(ds)} ages to {out / 'hindcast.csv'}")
    return 0


def cmd_validate(config: RunConfig, threads: int, argv, out: Path, tolerances=None, quick=False) -> int:
    from .validation import run_checks

    write_manifest(out, "validate", config, threads, argv, {"tolerances": tolerances or {}})
    results = run_checks(tolerances, quick=quick)
    for r in results:
        print(r.line())
    write_json(out / "validation.json", [
        {"name": r.name, "passed": r.passed, "statistic": r.statistic, "tolerance": r.tolerance,
         "details": r.details} for r in results
    ])
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed checks: " + ", ".join(failed))
        return EXIT_FAILURE
    return 0


# -- argument parsing -----------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML file of flat configuration keys")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key (repeatable)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $PALEO_THREADS or 1); never changes results")
    common.add_argument("--output", "-o", help="output directory (key 'output')")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="paleosmc", description="Model comparison for glacial-cycle models "
                                "with nested sequential Monte Carlo.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic record")
    s.add_argument("--preset", choices=sorted(PRESETS))
    i = sub.add_parser("infer", parents=[common], help="run the nested sampler on a record")
    i.add_argument("--dataset")
    c = sub.add_parser("compare", parents=[common], help="Bayes-factor table from evidence reports")
    c.add_argument("reports", nargs="+")
    c.add_argument("--labels", nargs="+")
    f = sub.add_parser("filter", parents=[common], help="state hindcast from a fitted run")
    f.add_argument("--run")
    f.add_argument("--dataset")
    pp = sub.add_parser("postprocess", parents=[common], help="posterior summaries and derived densities")
    pp.add_argument("--run")
    v = sub.add_parser("validate", parents=[common], help="check the samplers against exact references")
    v.add_argument("--tolerance", action="append", default=[], metavar="CHECK=VALUE",
                   help="override a check tolerance (e.g. to confirm failures are reported)")
    v.add_argument("--quick", action="store_true", help="fewer replicates")
    return p


def build_config(args) -> RunConfig:
    flat = {}
    if args.config:
        flat.update(load_config_file(args.config))
    flat.update(parse_set(args.set))
    for key in ("output", "dataset", "run", "preset"):
        value = getattr(args, key, None)
        if value is not None:
            flat[key] = value
    return RunConfig.from_flat(flat)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = build_config(args)
        threads = resolve_threads(args.threads)
        out = Path(config.output)
        if args.command == "simulate":
            return cmd_simulate(config, threads, argv, out)
        if args.command == "infer":
            return cmd_infer(config, threads, argv, out)
        if args.command == "compare":
            return cmd_compare(config, threads, argv, out, args.reports, args.labels)
        if args.command == "filter":
            return cmd_filter(config, threads, argv, out)
        if args.command == "postprocess":
            return cmd_postprocess(config, threads, argv, out)
        tol = {}
        for item in args.tolerance:
            k, sep, val = item.partition("=")
            if not sep:
                raise ConfigurationError(f"--tolerance expects CHECK=VALUE, got {item!r}")
            tol[k.strip()] = float(val)
        return cmd_validate(config, threads, argv, out, tol, args.quick)
    except (ConfigurationError, DatasetError, OrbitalError, KeyError, ValueError, SMC2Collapse) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
