"""wcl-lab: experiment runner.

Every subcommand reads an optional YAML config (defaults are bundled under
wcl_lab/configs), writes one CSV per experiment plus manifest.json into the
output directory, and exits 0 when all acceptance checks pass, 1 when one
fails and 2 on usage, parse or budget errors.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import click
import numpy as np
import scipy.linalg as sla
import yaml

from . import __version__
from .modelfile import ModelFileError, load_model, model_text

EXPERIMENTS = ("davies", "lindblad-evolve", "full-evolve", "wcl-sweep", "correlations",
               "resummation-check", "dilation-check", "extended-wcl", "theta-check",
               "pairings")
LIST_KEYS = ("lambdas", "times", "dts", "modes")
OUT_ENV = "WCL_LAB_OUT"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def default_config(experiment: str) -> dict:
    res = resources.files("wcl_lab") / "configs" / f"{experiment}.yaml"
    return yaml.safe_load(res.read_text()) or {}


def load_config(experiment: str, path: str | None) -> dict:
    cfg = default_config(experiment)
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"{path}: config file not found") from None
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"{path}:{mark.line + 1}" if mark else path
            raise ConfigError(f"{where}: YAML error: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg.update(user)
    cfg["experiment"] = experiment
    return cfg


def validate(cfg: dict) -> list:
    """Diagnostics for a config; an empty list means it can run."""
    diags = []
    exp = cfg.get("experiment")
    if exp not in EXPERIMENTS:
        diags.append(f"experiment: unknown {exp!r}")
    model = None
    if exp != "pairings":
        try:
            model = load_model(str(cfg.get("model", ""))).model
        except ModelFileError as exc:
            diags.append(f"model: {exc}")
    for key in LIST_KEYS:
        if key in cfg:
            val = cfg[key]
            if not isinstance(val, list) or not val:
                diags.append(f"{key}: sweep list must be non-empty")
    for lam in cfg.get("lambdas") or []:
        if not isinstance(lam, (int, float)) or lam <= 0:
            diags.append(f"lambdas: {lam!r} must be a positive number")
    for dt in cfg.get("dts") or []:
        if not isinstance(dt, (int, float)) or dt <= 0:
            diags.append(f"dts: {dt!r} must be positive")
    for n in cfg.get("modes") or []:
        if not isinstance(n, int) or n < 2:
            diags.append(f"modes: {n!r} must be an integer >= 2")
    for name, tol in (cfg.get("tolerances") or {}).items():
        if not isinstance(tol, (int, float)) or tol <= 0:
            diags.append(f"tolerances.{name}: must be positive")
    if diags or model is None:
        return diags
    # recurrence guard: horizon lam^-2 (t - t0) must stay below pi / spacing
    lams = [x for x in cfg.get("lambdas") or [] if isinstance(x, (int, float)) and x > 0]
    times = cfg.get("times") or []
    if lams and times and cfg.get("modes") and exp in ("full-evolve", "wcl-sweep",
                                                       "correlations"):
        t0 = float(cfg.get("t0", 0.0))
        horizon = (max(times) - t0) / min(lams) ** 2
        width = max(p.width for p in model.pieces)
        for n in cfg["modes"]:
            limit = np.pi / (width / n)
            if horizon >= limit:
                need = int(np.ceil(width * horizon / np.pi)) + 1
                diags.append(f"modes: N = {n} gives recurrence guard {limit:.3g} <= "
                             f"horizon {horizon:.3g}; use N >= {need}")
    return diags


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, columns: list, rows: list):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _map(fn, items, jobs: int):
    """Ordered map; results are merged in input order whatever the pool does."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def strictly_decreasing(vals) -> bool:
    return all(b < a for a, b in zip(vals, vals[1:]))


def _matrix(spec, d: int) -> np.ndarray:
    named = {"sigma_z": np.diag([1.0, -1.0]), "sigma_x": np.array([[0, 1], [1, 0]]),
             "identity": np.eye(d)}
    if isinstance(spec, str):
        if spec not in named:
            raise ConfigError(f"unknown operator name {spec!r}")
        return np.asarray(named[spec], dtype=complex)
    return np.asarray(spec, dtype=complex).reshape(d, d)


# ---------------------------------------------------------------------------
# experiments: each returns (columns, rows, criteria)
# ---------------------------------------------------------------------------

def _spec(cfg):
    return load_model(str(cfg["model"]))


def exp_davies(cfg, jobs):
    from .davies import compute_upsilon
    model = _spec(cfg).model
    tol = cfg.get("tolerances", {}).get("residual", 1e-8)
    rel = cfg.get("tolerances", {}).get("agreement", 1e-4)
    rows, ups = [], {}
    for method in cfg.get("methods", ["plemelj"]):
        dd = compute_upsilon(model, method=method, warn=False)
        ups[method] = dd.upsilon
        for a in range(dd.dim):
            for b in range(dd.dim):
                rows.append(dict(method=method, row=a, col=b, re=dd.upsilon[a, b].real,
                                 im=dd.upsilon[a, b].imag,
                                 residual=dd.dissipativity_residual))
    crit = {"dissipativity": all(r["residual"] <= tol for r in rows)}
    if len(ups) > 1:
        vals = list(ups.values())
        scale = max(np.linalg.norm(vals[0]), 1e-300)
        crit["method_agreement"] = bool(np.linalg.norm(vals[0] - vals[1]) <= rel * scale) \
            if np.linalg.norm(vals[0]) > 0 else bool(np.linalg.norm(vals[1]) <= rel)
    return ["method", "row", "col", "re", "im", "residual"], rows, crit


def exp_lindblad(cfg, jobs):
    from .davies import build_lindblad, choi_min_eigenvalue, compute_upsilon, semigroup
    model = _spec(cfg).model
    L = build_lindblad(compute_upsilon(model, warn=False))
    tol = cfg.get("tolerances", {}).get("choi", 1e-10)
    d = model.system.dim
    rows = []
    for t in cfg["times"]:
        E = semigroup(L, t)
        one = (E @ np.eye(d).reshape(-1, order="F")).reshape(d, d, order="F")
        rows.append(dict(t=t, choi_min_eig=choi_min_eigenvalue(E, d),
                         unitality_error=float(np.abs(one - np.eye(d)).max())))
    return ["t", "choi_min_eig", "unitality_error"], rows, \
        {"complete_positivity": all(r["choi_min_eig"] >= -tol for r in rows)}


def _full_point(args):
    from .davies import compute_upsilon
    from .fock_sim import FullFockSimulator, friedrichs_reduced, reduced_dynamics
    from .system_model import discretize_reservoir
    model_name, lam, N, n_max, times, t0 = args
    spec = load_model(model_name)
    model = spec.model
    disc = discretize_reservoir(model, N, spec.rule, N)
    Y = compute_upsilon(model, warn=False).upsilon
    sim = FullFockSimulator(model.system, disc, lam, n_max)
    out = []
    for t in times:
        R = reduced_dynamics(model.system, disc, lam, t, t0, sim=sim)
        G = friedrichs_reduced(model.system, disc, lam, t, t0)
        out.append(dict(**{"lambda": lam}, N=N, t=t,
                        error_norm=float(np.linalg.norm(R - sla.expm(-1j * (t - t0) * Y), 2)),
                        bound=float(np.linalg.norm(R - G, 2))))
    return out


def exp_full_evolve(cfg, jobs):
    items = [(str(cfg["model"]), lam, N, cfg.get("n_max", 2), cfg["times"], cfg.get("t0", 0.0))
             for N in cfg["modes"] for lam in cfg["lambdas"]]
    rows = [r for chunk in _map(_full_point, items, jobs) for r in chunk]
    tol = cfg.get("tolerances", {}).get("truncation", 1e-2)
    return ["lambda", "N", "t", "error_norm", "bound"], rows, \
        {"friedrichs_consistency": all(r["bound"] <= tol for r in rows)}


def _wcl_point(args):
    from .davies import compute_upsilon
    from .fock_sim import friedrichs_reduced, semigroup_gap
    from .system_model import discretize_reservoir
    model_name, lam, N, times, t0 = args
    spec = load_model(model_name)
    disc = discretize_reservoir(spec.model, N, spec.rule, N)
    Y = compute_upsilon(spec.model, warn=False).upsilon
    G = friedrichs_reduced(spec.model.system, disc, lam, np.array(times), t0)
    gaps = semigroup_gap(G, Y, np.array(times) - t0)
    return [dict(**{"lambda": lam}, N=N, t=t, error_norm=float(e)) for t, e in zip(times, gaps)]


def exp_wcl_sweep(cfg, jobs):
    lams = sorted(cfg["lambdas"], reverse=True)
    items = [(str(cfg["model"]), lam, N, cfg["times"], cfg.get("t0", 0.0))
             for N in cfg["modes"] for lam in lams]
    rows = [r for chunk in _map(_wcl_point, items, jobs) for r in chunk]
    crit = {}
    for N in cfg["modes"]:
        sup = [max(r["error_norm"] for r in rows if r["N"] == N and r["lambda"] == lam)
               for lam in lams]
        for r in rows:
            if r["N"] == N:
                r["bound"] = sup[lams.index(r["lambda"])]
        crit[f"reduced_wcl_N{N}"] = strictly_decreasing(sup)
    return ["lambda", "N", "t", "error_norm", "bound"], rows, crit


def _corr_point(args):
    from .davies import compute_upsilon
    from .fock_sim import (FullFockSimulator, correlation_chain, correlation_limit,
                           factorization_defect)
    from .system_model import discretize_reservoir
    model_name, lam, N, n_max, S, times = args
    spec = load_model(model_name)
    model = spec.model
    disc = discretize_reservoir(model, N, spec.rule, N)
    Y = compute_upsilon(model, warn=False).upsilon
    S = np.asarray(S)
    sim = FullFockSimulator(model.system, disc, lam, n_max)
    C = correlation_chain(model.system, disc, lam, [S], times, sim=sim)
    err = float(np.linalg.norm(C - correlation_limit(Y, [S], times), 2))
    fd = factorization_defect(model.system, disc, lam, S, *times, n_max=n_max)
    return dict(**{"lambda": lam}, N=N, error_norm=err, factorization_defect=fd)


def exp_correlations(cfg, jobs):
    d = load_model(str(cfg["model"])).model.system.dim
    S = _matrix(cfg.get("S", "sigma_z"), d)
    lams = sorted(cfg["lambdas"], reverse=True)
    times = [cfg.get("t0", 0.0)] + list(cfg["times"])
    items = [(str(cfg["model"]), lam, N, cfg.get("n_max", 2), S, times)
             for N in cfg["modes"] for lam in lams]
    rows = _map(_corr_point, items, jobs)
    crit = {f"correlation_wcl_N{N}": strictly_decreasing(
        [r["error_norm"] for r in rows if r["N"] == N]) for N in cfg["modes"]}
    return ["lambda", "N", "error_norm", "factorization_defect"], rows, crit


def exp_resummation(cfg, jobs):
    from .fock_sim import resummation_check
    from .system_model import decompose_coupling, discretize_reservoir
    spec = _spec(cfg)
    rows = []
    for N in cfg["modes"]:
        disc = discretize_reservoir(spec.model, N, spec.rule, N)
        dec = decompose_coupling(spec.model, disc)
        for lam in cfg["lambdas"]:
            for t in cfg["times"]:
                for mm in cfg.get("max_m", [2]):
                    r = resummation_check(spec.model.system, dec, lam, t, cfg.get("t0", 0.0),
                                          max_m=mm, n_max=cfg.get("n_max", 2))
                    rows.append(dict(**{"lambda": lam}, N=N, t=t, max_m=mm,
                                     residual=r.residual, bound=r.tail_bound))
    return ["lambda", "N", "t", "max_m", "residual", "bound"], rows, \
        {"resummation": all(r["residual"] <= r["bound"] for r in rows)}


def exp_dilation(cfg, jobs):
    from .davies import build_lindblad, compute_upsilon, evolve_semigroup
    from .langevin import build_dilation, collision_map, dilation_contraction, dilation_markov
    model = _spec(cfg).model
    dd = compute_upsilon(model, warn=False)
    L = build_lindblad(dd)
    d = dd.dim
    S = _matrix(cfg.get("S", "sigma_z"), d)
    tol = cfg.get("tolerances", {})
    rows = []
    for t in cfg["times"]:
        for dt in sorted(cfg["dts"], reverse=True):
            dp = build_dilation(dd, dt, t)
            rows.append(dict(t=t, dt=dt,
                             contraction_error=float(np.linalg.norm(
                                 dilation_contraction(dp, t) - sla.expm(-1j * t * dd.upsilon), 2)),
                             markov_error=float(np.linalg.norm(
                                 dilation_markov(dp, t, S) - evolve_semigroup(L, t, S), 2)),
                             unitality_error=float(np.abs(
                                 collision_map(dp, np.eye(d)) - np.eye(d)).max())))
    crit = {"dilation_accuracy": all(r["contraction_error"] <= tol.get("dilation", 5e-3) and
                                     r["markov_error"] <= tol.get("dilation", 5e-3) for r in rows),
            "unitality": all(r["unitality_error"] <= tol.get("unitality", 1e-12) for r in rows)}
    for t in cfg["times"]:
        sub = [r for r in rows if r["t"] == t]
        for a, b in zip(sub, sub[1:]):
            if abs(a["dt"] / b["dt"] - 2) < 1e-9:
                for key in ("contraction_error", "markov_error"):
                    ratio = a[key] / b[key] if b[key] > 0 else float("inf")
                    crit[f"first_order_{key}_t{t}_dt{b['dt']}"] = bool(1.7 <= ratio <= 2.3)
    return ["t", "dt", "contraction_error", "markov_error", "unitality_error"], rows, crit


def _gaussian(center, width, phase=0.0):
    return lambda u: np.exp(-((u - center) / width) ** 2 / 2 + 1j * phase * u) / \
        (np.pi * width**2) ** 0.25


def _ext_point(args):
    from .davies import compute_upsilon
    from .fock_sim import FullFockSimulator
    from .langevin import build_dilation, extended_wcl_matrix_element, scaling_isometry
    from .system_model import aligned_reservoir
    model_name, lam, du, tail, n_max, dt, t, t0, comp, center, width = args
    model = load_model(model_name).model
    dd = compute_upsilon(model, warn=False)
    dp = build_dilation(dd, dt, t - t0)
    disc = aligned_reservoir(model, lam, du, tail)
    iso = scaling_isometry(model, disc, lam, du, list(dd.noise_layout))
    sim = FullFockSimulator(model.system, disc, lam, n_max)
    g = iso.grid.sample(_gaussian(center, width), comp)
    out = []
    for sector, gi, go in (("vacuum", [], []), ("one_particle", [g], [g]),
                           ("emission", [], [g]), ("absorption", [g], [])):
        r = extended_wcl_matrix_element(sim, iso, dp, t, t0, gi, go)
        out.append(dict(**{"lambda": lam}, sector=sector, t=t, gap=r.gap,
                        baseline=r.baseline, corrected_gap=r.corrected_gap))
    return out


def exp_extended(cfg, jobs):
    lams = sorted(cfg["lambdas"], reverse=True)
    g = cfg.get("test_state", {})
    items = [(str(cfg["model"]), lam, cfg.get("du", 0.5), cfg.get("tail_modes", 8),
              cfg.get("n_max", 2), cfg["dts"][0], t, cfg.get("t0", 0.0),
              g.get("component", 2), g.get("center", 0.0), g.get("width", 1.0))
             for t in cfg["times"] for lam in lams]
    rows = [r for chunk in _map(_ext_point, items, jobs) for r in chunk]
    crit = {}
    for t in cfg["times"]:
        for sector, key in (("vacuum", "gap"), ("one_particle", "corrected_gap")):
            vals = [r[key] for lam in lams for r in rows
                    if r["lambda"] == lam and r["sector"] == sector and r["t"] == t]
            crit[f"extended_wcl_{sector}_t{t}"] = strictly_decreasing(vals)
    return ["lambda", "sector", "t", "gap", "baseline", "corrected_gap"], rows, crit


def exp_theta(cfg, jobs):
    from .davies import compute_upsilon
    from .langevin import ThetaMap, scaling_isometry, theta_one_particle_gap
    from .system_model import aligned_reservoir
    model = _spec(cfg).model
    dd = compute_upsilon(model, warn=False)
    gcfg = cfg.get("g", {"offset": 0.5, "amplitude": 0.3, "center": 1.0})
    th = ThetaMap(np.eye(model.system.dim, dtype=complex),
                  lambda y: gcfg["offset"] + gcfg["amplitude"] *
                  np.tanh(np.asarray(y, dtype=float) - gcfg["center"]))
    ts = cfg.get("test_state", {})
    lams = sorted(cfg["lambdas"], reverse=True)
    rows = []
    for lam in lams:
        disc = aligned_reservoir(model, lam, cfg.get("du", 0.25))
        iso = scaling_isometry(model, disc, lam, cfg.get("du", 0.25), list(dd.noise_layout))
        g = iso.grid.sample(_gaussian(ts.get("center", 0.5), ts.get("width", 1.0)),
                            ts.get("component", 2))
        rows.append({"lambda": lam, "gap": theta_one_particle_gap(iso, th, g)})
    return ["lambda", "gap"], rows, {"theta_compression": strictly_decreasing(
        [r["gap"] for r in rows])}


def exp_pairings(cfg, jobs):
    from .combinatorics import (double_factorial, enumerate_pairings,
                                enumerate_partial_pairings, involution_number)
    rows = []
    for n in range(cfg.get("max_n", 5) + 1):
        P = enumerate_pairings(n)
        rows.append(dict(n=n, pairings=len(P), double_factorial=double_factorial(2 * n - 1),
                         time_consecutive=sum(p.sigma == tuple(range(1, 2 * n + 1)) for p in P),
                         partial=len(enumerate_partial_pairings(n)),
                         involution=involution_number(n)))
    ok = all(r["pairings"] == r["double_factorial"] and r["partial"] == r["involution"]
             and r["time_consecutive"] == 1 for r in rows)
    return ["n", "pairings", "double_factorial", "time_consecutive", "partial",
            "involution"], rows, {"pairing_counts": ok}


RUNNERS = {"davies": exp_davies, "lindblad-evolve": exp_lindblad,
           "full-evolve": exp_full_evolve, "wcl-sweep": exp_wcl_sweep,
           "correlations": exp_correlations, "resummation-check": exp_resummation,
           "dilation-check": exp_dilation, "extended-wcl": exp_extended,
           "theta-check": exp_theta, "pairings": exp_pairings}


def run(cfg: dict, out: Path, jobs: int = 1, deterministic: bool = False) -> dict:
    """Execute one experiment; returns the manifest dict (also written to disk)."""
    exp = cfg["experiment"]
    if deterministic:
        np.random.seed(int(cfg.get("seed", 0)))
    start = time.perf_counter()
    columns, rows, criteria = RUNNERS[exp](cfg, jobs)
    out.mkdir(parents=True, exist_ok=True)
    fname = f"{exp}.csv"
    write_csv(out / fname, columns, rows)
    model_hash = None
    if exp != "pairings":
        text, _ = model_text(str(cfg["model"]))
        model_hash = hashlib.sha256(text.encode()).hexdigest()
    manifest = {
        "experiment": exp,
        "config_hash": _hash(cfg),
        "model_hash": model_hash,
        "version": __version__,
        "files": [fname],
        "wall_clock_s": round(time.perf_counter() - start, 3),
        "seed": cfg.get("seed", 0),
        "deterministic": deterministic,
        "config": cfg,
        "criteria": {k: bool(v) for k, v in criteria.items()},
        "passed": all(criteria.values()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                  default=str) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# click front end
# ---------------------------------------------------------------------------

@click.group()
@click.version_option(__version__, prog_name="wcl-lab")
def main():
    """Weak coupling limit experiments for Pauli-Fierz models."""


def _command(exp: str):
    @click.option("--config", "config_path", type=click.Path(dir_okay=False),
                  help="YAML config; keys override the bundled defaults.")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False),
                  help=f"Output directory (default ${OUT_ENV}/<experiment> or ./wcl-out).")
    @click.option("--deterministic", is_flag=True, help="Fixed seeds and ordered reductions.")
    @click.option("--jobs", default=1, show_default=True, type=click.IntRange(1),
                  help="Worker processes for sweep points.")
    @click.option("--model", "model_override", default=None, help="Override the config model.")
    @click.option("--brackets", is_flag=True, hidden=exp != "pairings",
                  help="Print pairings as bracket sequences.")
    def cmd(config_path, out_dir, deterministic, jobs, model_override, brackets):
        try:
            cfg = load_config(exp, config_path)
        except ConfigError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        if model_override:
            cfg["model"] = model_override
        diags = validate(cfg)
        if diags:
            for dmsg in diags:
                click.echo(f"config: {dmsg}", err=True)
            sys.exit(2)
        if brackets and exp == "pairings":
            from .combinatorics import enumerate_pairings
            for n in range(1, cfg.get("max_n", 3) + 1):
                for p in enumerate_pairings(n):
                    click.echo(f"n={n} {p.brackets()}")
        root = Path(out_dir) if out_dir else \
            Path(os.environ.get(OUT_ENV, "wcl-out")) / exp
        try:
            manifest = run(cfg, root, jobs, deterministic)
        except (ValueError, RuntimeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        for name, ok in manifest["criteria"].items():
            click.echo(f"{'PASS' if ok else 'FAIL'} {name}")
        click.echo(f"wrote {root / manifest['files'][0]}")
        sys.exit(0 if manifest["passed"] else 1)

    cmd.__doc__ = f"Run the {exp} experiment."
    return main.command(exp)(cmd)


for _exp in EXPERIMENTS:
    _command(_exp)


if __name__ == "__main__":
    main()
