"""Command line driver: ``simulate``, ``filter``, ``compare``, ``diagnose``.

Each subcommand reads one TOML config (a path or a bundled name such as
``desk_a``) and writes plot-ready CSVs under the output directory.  All
outputs are deterministic functions of the effective config.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .measure import density_processes, martingale_check, protter_shimbo_report
from .model import FiniteStateSignalModel, validate_assumptions
from .oracle import grid_bayes_filter, particle_filter
from .sim import (ObservationFormatError, extract_observation, load_observation, save_joint_path, save_observation,
                  simulate_path)
from .zakai import FilterError, run_ks, run_zakai

NORM_TOL = 1e-12
MASS_TOL = 1e-6


class CommandError(RuntimeError):
    pass


def manifest_line(cfg: ExperimentConfig, **extra) -> str:
    parts = [f"config={cfg.name}", f"hash={cfg.digest}", f"version={__version__}"]
    parts += [f"{k}={v}" for k, v in extra.items()]
    return " ".join(parts)


def _out_dir(cfg: ExperimentConfig, override) -> Path:
    d = Path(override if override is not None else cfg.output.directory)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_manifest(out: Path, cfg: ExperimentConfig, command: str, files: list[str]):
    manifest = {
        "command": command,
        "config": cfg.name,
        "config_hash": cfg.digest,
        "version": __version__,
        "seeds": list(cfg.run.seeds),
        "dt": cfg.run.dt,
        "T": cfg.run.T,
        "resampling": "multinomial",
        "files": sorted(files),
    }
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: ExperimentConfig, out=None) -> list[Path]:
    out = _out_dir(cfg, out)
    files = []
    for seed in cfg.run.seeds:
        tag = manifest_line(cfg, seed=seed)
        path = simulate_path(cfg.model, cfg.run.dt, seed)
        files.append(save_joint_path(path, out / f"joint_{seed}.csv", tag))
        files.extend(save_observation(extract_observation(path, cfg.model), out / f"obs_{seed}.csv", tag))
    files.append(_write_manifest(out, cfg, "simulate", [f.name for f in files]))
    return files


# ---------------------------------------------------------------------------
# filter


def _load_obs(cfg, out: Path, seed: int):
    f = out / f"obs_{seed}.csv"
    if not f.exists():
        raise CommandError(f"missing {f}; run 'simulate' first")
    return load_observation(f, cfg.model, dt=cfg.run.dt)


def _run_solver(cfg: ExperimentConfig, solver: str, obs, seed: int):
    model = cfg.model
    if solver == "zakai":
        return run_zakai(model, obs)[0]
    if solver == "ks":
        return run_ks(model, obs)
    if solver == "grid_bayes":
        return grid_bayes_filter(model, obs)
    if solver == "particle":
        return particle_filter(model, obs, cfg.run.n_particles, seed, cfg.run.resample_threshold)
    raise CommandError(f"unknown solver {solver!r}")


def _pair_names(solvers):
    return [f"L1_{a}_{b}" for a, b in itertools.combinations(solvers, 2)]


def _sup_l1(a, b) -> float:
    if not len(a.states) or not len(b.states):
        return float("nan")
    d = np.abs(a.probs - b.probs).sum(axis=1).max()
    if len(a.pre_jump_probs):
        d = max(d, np.abs(a.pre_jump_probs - b.pre_jump_probs).sum(axis=1).max())
    return float(d)


def cmd_filter(cfg: ExperimentConfig, out=None) -> list[Path]:
    out = _out_dir(cfg, out)
    solvers = list(cfg.output.solvers)
    files, rows = [], []
    for seed in cfg.run.seeds:
        obs = _load_obs(cfg, out, seed)
        results = {}
        for solver in dict.fromkeys(solvers):
            try:
                results[solver] = _run_solver(cfg, solver, obs, seed)
            except (FilterError, ValueError) as exc:
                raise CommandError(f"seed {seed}, solver {solver}: {exc}") from exc
            f = out / f"filter_{solver}_{seed}.csv"
            files.append(results[solver].to_csv(f, manifest_line(cfg, seed=seed, solver=solver)))
        rows.append([seed] + [_sup_l1(results[a], results[b]) for a, b in itertools.combinations(solvers, 2)])
    summary = out / "summary.csv"
    with open(summary, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {manifest_line(cfg)}\n")
        fh.write(",".join(["seed"] + _pair_names(solvers)) + "\n")
        for r in rows:
            fh.write(",".join([str(r[0])] + [format(v, ".17g") for v in r[1:]]) + "\n")
    files.append(summary)
    files.append(_write_manifest(out, cfg, "filter", [f.name for f in files]))
    return files


# ---------------------------------------------------------------------------
# compare


def read_filter_csv(path) -> tuple[list[str], np.ndarray]:
    """Header and numeric rows of a filter CSV (comment lines skipped)."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    header = lines[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return header, data


def cmd_compare(cfg: ExperimentConfig, out=None) -> list[Path]:
    """Per-seed metrics from the filter CSVs written by ``filter``."""
    out = _out_dir(cfg, out)
    solvers = list(dict.fromkeys(cfg.output.solvers))
    files = []
    cols = ["seed"]
    for s in solvers:
        cols += [f"norm_err_{s}", f"min_pi_{s}"]
    cols += [f"final_L1_{a}_{b}" for a, b in itertools.combinations(solvers, 2)]
    want_density = "density" in cfg.output.metrics and "zakai" in solvers and isinstance(cfg.model, FiniteStateSignalModel)
    if want_density:
        cols += ["density_rel_err", "z_rho_log_err"]
    rows = []
    for seed in cfg.run.seeds:
        data = {}
        for s in solvers:
            f = out / f"filter_{s}_{seed}.csv"
            if not f.exists():
                raise CommandError(f"missing {f}; run 'filter' first")
            data[s] = read_filter_csv(f)[1]
        row = [seed]
        for s in solvers:
            p = data[s][:, 2:]
            if p.shape[1]:
                row += [float(np.abs(p.sum(axis=1) - 1).max()), float(p.min())]
            else:
                row += [float("nan"), float("nan")]
        for a, b in itertools.combinations(solvers, 2):
            pa, pb = data[a][-1, 2:], data[b][-1, 2:]
            row.append(float(np.abs(pa - pb).sum()) if len(pa) and len(pb) else float("nan"))
        if want_density:
            obs = _load_obs(cfg, out, seed)
            un, _ = run_zakai(cfg.model, obs)
            dens = density_processes(cfg.model, obs, un)
            files.append(dens.to_csv(out / f"density_{seed}.csv", manifest_line(cfg, seed=seed)))
            row.append(float(np.max(np.abs(np.expm1(dens.log_theta - un.log_mass)))))
            row.append(float(np.max(np.abs(dens.log_z + un.log_mass))))
        rows.append(row)
    path = out / "comparison.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {manifest_line(cfg)}\n")
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join([str(r[0])] + [format(v, ".17g") for v in r[1:]]) + "\n")
    files.append(path)
    files.append(_write_manifest(out, cfg, "compare", [f.name for f in files]))
    return files


# ---------------------------------------------------------------------------
# diagnose


def _sample_box(cfg):
    m = cfg.model
    sysm = m.as_system()
    if sysm.states is not None:
        xs = (min(sysm.states), max(sysm.states))
    else:
        xs = (float(sysm.x0) - 10.0, float(sysm.x0) + 10.0)
    return ((0.0, cfg.run.T), xs, (sysm.y0 - 10.0, sysm.y0 + 10.0))


def diagnose(cfg: ExperimentConfig) -> tuple[str, bool]:
    """Consolidated report and whether every hard invariant held."""
    model = cfg.model
    lines = [f"diagnose {manifest_line(cfg)}", ""]
    hard_ok = True

    lint = validate_assumptions(model, _sample_box(cfg), seed=cfg.run.seeds[0])
    lines.append("assumption lint (soft):")
    lines += ["  " + ln for ln in str(lint).splitlines()]
    lines.append("")

    lines.append("hard invariants:")
    finite = isinstance(model, FiniteStateSignalModel)
    worst_norm, worst_neg, worst_mass = 0.0, np.inf, 0.0
    failures = []
    for seed in cfg.run.seeds:
        obs = extract_observation(simulate_path(model, cfg.run.dt, seed), model)
        try:
            if finite:
                un, _ = run_zakai(model, obs)
                probs = un.all_probs()
                lm = np.concatenate([un.log_mass, un.pre_jump_log_mass])
                if not np.all(np.isfinite(lm)):
                    failures.append(f"seed {seed}: log mass not finite")
                dens = density_processes(model, obs, un)
                worst_mass = max(worst_mass, float(np.max(np.abs(np.expm1(dens.log_theta - un.log_mass)))))
            else:
                pf = particle_filter(model, obs, cfg.run.n_particles, seed, cfg.run.resample_threshold)
                probs = pf.all_probs() if len(pf.states) else np.ones((1, 1))
        except (FilterError, ValueError) as exc:
            failures.append(f"seed {seed}: {exc}")
            continue
        worst_norm = max(worst_norm, float(np.abs(probs.sum(axis=1) - 1).max()))
        worst_neg = min(worst_neg, float(probs.min()))
    checks = [
        ("normalization", worst_norm <= NORM_TOL, f"max |sum pi - 1| = {worst_norm:.3g}"),
        ("positivity", worst_neg >= 0.0 and not failures, f"min pi = {worst_neg:.3g}"),
    ]
    if finite:
        checks.append(("mass consistency", worst_mass <= MASS_TOL, f"max rel |theta - V(S)| = {worst_mass:.3g}"))
    for name, ok, msg in checks:
        lines.append(f"  {'pass' if ok else 'FAIL'} {name}: {msg} over {len(cfg.run.seeds)} seeds")
        hard_ok &= ok
    lines += [f"  FAIL {f}" for f in failures]
    lines.append("")

    if finite and "martingale" in cfg.output.metrics:
        lines.append("measure change (soft):")
        rep = martingale_check(model, max(cfg.run.n_paths, 100), cfg.run.dt, cfg.run.seeds[0])
        lines += ["  " + ln for ln in str(rep).splitlines()]
        lines.append(f"  Z_T == 1 on every path: {bool(np.all(np.abs(rep.z_values - 1) <= 1e-12))}")
    if finite and "protter_shimbo" in cfg.output.metrics:
        ps = protter_shimbo_report(model, min(cfg.run.n_paths, 1000), cfg.run.dt, cfg.run.seeds[0])
        lines += ["  " + ln for ln in str(ps).splitlines()]
    lines.append("")
    lines.append(f"hard invariants: {'PASS' if hard_ok else 'FAIL'}")
    return "\n".join(lines) + "\n", hard_ok


def cmd_diagnose(cfg: ExperimentConfig, out=None) -> tuple[Path, bool]:
    out = _out_dir(cfg, out)
    text, ok = diagnose(cfg)
    path = out / "diagnose.txt"
    path.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return path, ok


# ---------------------------------------------------------------------------


def _seed_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jumpfilter", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("simulate", "simulate joint paths and write observation CSVs"),
                           ("filter", "run the configured solvers on saved observations"),
                           ("compare", "per-seed metrics from saved filter outputs"),
                           ("diagnose", "invariants, measure-change checks and assumption lint")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="TOML file or bundled config name")
        p.add_argument("--out", help="output directory (default: output.directory)")
        p.add_argument("--seeds", type=_seed_list, help="override run.seeds, e.g. 1,2,5-9")
        p.add_argument("--dt", type=float, help="override run.dt")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config).with_overrides(dt=args.dt, seeds=args.seeds)
        if args.command == "simulate":
            files = cmd_simulate(cfg, args.out)
            print(f"wrote {len(files)} files")
        elif args.command == "filter":
            files = cmd_filter(cfg, args.out)
            print(f"wrote {len(files)} files")
        elif args.command == "compare":
            files = cmd_compare(cfg, args.out)
            print(f"wrote {len(files)} files")
        else:
            _, ok = cmd_diagnose(cfg, args.out)
            return 0 if ok else 1
    except (ConfigError, CommandError, ObservationFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
