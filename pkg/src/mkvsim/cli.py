"""Command-line entry point: ``mkvsim <config> [--seed S] [--assert] [--out DIR] [--threads K]``."""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import ConfigError, ScenarioConfig, parse_config
from .euler import holder_slope, simulate, window_pairs, wp_holder_check
from .girsanov import (CONTRACTION_HEADER, WEIGHTS_HEADER, ContractionParams, CouplingSample, coupling_cost_estimate,
                       doleans_weight, reweighted_expectation, simulate_driftless, tv_contraction_experiment,
                       weighted_ks_distance)
from .model import build_model, dirac_initial, gaussian_initial, mollify_kernel
from .moments import fit_loglog
from .noise import make_grid, resolve_threads, sample_bundle
from .spde import RESIDUAL_HEADER, fubini_residual, spde_residual, test_function
from .tables import csv_text, moment_header, moment_rows, trajectory_header, trajectory_rows

EXIT_OK, EXIT_ERROR, EXIT_ASSERT = 0, 1, 2


@dataclass
class Outcome:
    """What a scenario produced: tables, plot series and one checked metric."""

    tables: list = field(default_factory=list)   # (filename, header, rows)
    plots: list = field(default_factory=list)
    summary: list = field(default_factory=list)  # (quantity, value)
    metric: tuple | None = None                  # (name, value, lower, upper)

    def table(self, name, header, rows):
        self.tables.append((name, tuple(header), list(rows)))

    def plot(self, name, x, y, title, series=None):
        self.plots.append({"file": name, "x": x, "y": list(y), "title": title,
                           **({"series": series} if series else {})})


def _initial(cfg: ScenarioConfig, dim: int):
    if cfg.init["law"] == "dirac":
        return dirac_initial(cfg.init["mean"], dim)
    return gaussian_initial(cfg.init["mean"], cfg.init["var"], dim)


def _model(cfg: ScenarioConfig):
    spec = build_model(cfg.model, **cfg.model_params)
    if spec.measure_dependent and cfg.N < 2:
        raise ConfigError("N must be at least 2 for a measure-dependent model")
    return spec


def _bounds(cfg, lower, upper):
    lo = cfg.assertions["lower"] if cfg.assertions["lower"] is not None else lower
    hi = cfg.assertions["upper"] if cfg.assertions["upper"] is not None else upper
    return lo, hi


# ---------------------------------------------------------------------------
# scenarios


def _simulate(cfg, spec, threads, out: Outcome):
    grid = make_grid(cfg.n, cfg.T)
    ens, _ = simulate(spec, _initial(cfg, spec.d_x), grid, cfg.N, cfg.seed, threads=threads)
    if cfg.diagnostic["dump_trajectories"]:
        out.table("trajectories.csv", trajectory_header(), trajectory_rows(ens.paths, grid.times))
    out.table("moments.csv", moment_header(spec.d_x), moment_rows(ens.paths, grid.times))
    out.plot("moments.csv", "time", moment_header(spec.d_x)[1:], "conditional moments")
    out.summary.append(("terminal_mean_1", float(ens.terminal[:, 0].mean())))
    out.metric = ("terminal_mean_1", float(ens.terminal[:, 0].mean()), *_bounds(cfg, None, None))


def _spde(cfg, spec, threads, out: Outcome):
    grid = make_grid(cfg.n, cfg.T)
    phis = [test_function(name, spec.d_x) for name in cfg.diagnostic["phi"]]
    sups = {p.name: [] for p in phis}
    rows = []
    for r, seed in enumerate(cfg.seeds):
        ens, law = simulate(spec, _initial(cfg, spec.d_x), grid, cfg.N, seed, threads=threads)
        for phi in phis:
            rep = spde_residual(ens, law, spec, phi)
            sups[phi.name].append(rep.sup)
            if r == 0:
                rows.extend(rep.rows())
    out.table("spde_residual.csv", RESIDUAL_HEADER, rows)
    out.plot("spde_residual.csv", "time", ["residual"], "SPDE residual (first seed)", series="phi_id")
    worst = 0.0
    for name, vals in sups.items():
        rms = float(np.sqrt(np.mean(np.square(vals))))
        out.summary.append((f"sup_residual_rms[{name}]", rms))
        worst = max(worst, rms)
    out.metric = ("max_sup_residual_rms", worst, *_bounds(cfg, None, None))


def _fubini(cfg, spec, threads, out: Outcome):
    grid = make_grid(cfg.n, cfg.T)
    ens, _ = simulate(spec, _initial(cfg, spec.d_x), grid, cfg.N, cfg.seed, threads=threads)

    def H(t, hist):
        return np.sin(hist[:, -1, 0])

    db = fubini_residual(ens, ens.bundle, H, "dB", bound=1.0)
    dw = fubini_residual(ens, ens.bundle, H, "dW", bound=1.0)
    out.table("fubini.csv", ("time", "residual_dB", "residual_dW"),
              ((float(t), float(a), float(b)) for t, a, b in zip(grid.times, db, dw)))
    out.plot("fubini.csv", "time", ["residual_dB", "residual_dW"], "conditional Fubini residuals")
    worst = float(np.max(np.abs(db)))
    out.summary.append(("max_abs_residual_dB", worst))
    out.summary.append(("max_abs_residual_dW", float(np.max(np.abs(dw)))))
    out.metric = ("max_abs_residual_dB", worst, *_bounds(cfg, None, 1e-10))


def _holder(cfg, spec, threads, out: Outcome):
    grid = make_grid(cfg.n, cfg.T)
    q = cfg.diagnostic["q"]
    lags = cfg.diagnostic["lags"]
    per_seed = []
    for seed in cfg.seeds:
        ens, _ = simulate(spec, _initial(cfg, spec.d_x), grid, cfg.N, seed, threads=threads)
        per_seed.append(holder_slope(ens, q, lags, horizon=cfg.diagnostic["horizon"]).estimates)
    points = [(lag, float(np.mean([ps[i][1] for ps in per_seed]))) for i, (lag, _) in enumerate(per_seed[0])]
    fit = fit_loglog(points)
    out.table("holder.csv", ("lag", "estimate", "fitted"), ((l, v, fit.predict(l)) for l, v in points))
    out.plot("holder.csv", "lag", ["estimate", "fitted"], "sup-increment moment vs lag (log-log)")
    out.summary += [("slope", fit.slope), ("slope_stderr", fit.stderr), ("target", q / 2)]
    out.metric = ("slope", fit.slope, *_bounds(cfg, q / 2 - 0.1, q / 2 + 0.1))


def _wp_holder(cfg, spec, threads, out: Outcome):
    grid = make_grid(cfg.n, cfg.T)
    p = cfg.diagnostic["p"]
    pairs = [pr for lag in cfg.diagnostic["lags"]
             for pr in window_pairs(grid, lag, horizon=cfg.diagnostic["horizon"])]
    flows = []
    for seed in cfg.seeds:
        flows.append(simulate(spec, _initial(cfg, spec.d_x), grid, cfg.N, seed, threads=threads)[1])
    rep = wp_holder_check(flows, p, pairs)
    if rep.fit is None:
        raise ValueError("W_p estimates vanish; no slope to fit")
    out.table("wp_holder.csv", ("lag", "estimate", "fitted"),
              ((l, v, rep.fit.predict(l)) for l, v in rep.estimates))
    out.plot("wp_holder.csv", "lag", ["estimate", "fitted"], "W_p^p of marginals vs lag (log-log)")
    out.summary += [("slope", rep.slope), ("slope_stderr", rep.fit.stderr), ("target", p / 2)]
    out.metric = ("slope", rep.slope, *_bounds(cfg, p / 2 - 0.15, p / 2 + 0.15))


def _girsanov(cfg, spec, threads, out: Outcome):
    grid = make_grid(cfg.n, cfg.T)
    init = _initial(cfg, spec.d_x)
    bundle = sample_bundle(cfg.seed, grid, cfg.N, spec.d_b, spec.d_w, threads=threads)
    xi = init.sample(cfg.seed, bundle.particle_ids, threads)
    drifted, law = simulate(spec, None, grid, cfg.N, cfg.seed, bundle=bundle, xi=xi, threads=threads)
    base = simulate_driftless(spec, None, grid, cfg.N, cfg.seed, bundle=bundle, xi=xi, threads=threads)
    weights = doleans_weight(base, bundle, spec, law, cfg.T)
    w = weights.weights
    x0, x1 = base.terminal[:, 0], drifted.terminal[:, 0]
    ks = weighted_ks_distance(weights, x0, x1)
    out.table("weights.csv", WEIGHTS_HEADER, weights.rows())
    out.summary += [
        ("reweighted_terminal_mean", reweighted_expectation(weights, x0)),
        ("drifted_terminal_mean", float(x1.mean())),
        ("ks_distance", ks),
        ("mean_weight", float(w.mean())),
        ("mean_weight_stderr", float(w.std(ddof=1) / np.sqrt(len(w)))),
        ("theta_sup", weights.theta_sup),
    ]
    out.metric = ("ks_distance", ks, *_bounds(cfg, None, 0.02))


def _contraction(cfg, spec, threads, out: Outcome):
    d = cfg.diagnostic
    params = ContractionParams(d["c_tv"], d["c_bdg"], cfg.T)
    rep = tv_contraction_experiment(spec, _initial(cfg, spec.d_x), make_grid(cfg.n, cfg.T), cfg.N, cfg.seeds,
                                    params, iterations=d["iterations"], perturbation=d["perturbation"],
                                    bin_width=d["bin_width"], threads=threads)
    out.table("contraction.csv", CONTRACTION_HEADER, rep.rows())
    out.table("contraction_ratios.csv", ("iteration", "ratio"),
              ((k + 1, float(r)) for k, r in enumerate(rep.ratios)))
    out.plot("contraction.csv", "time", ["tv_distance", "alpha_bound"], "TV distance per iteration",
             series="iteration")
    out.summary += [("alpha", rep.alpha), ("max_ratio", rep.max_ratio), ("bin_width", rep.bin_width),
                    ("note", rep.note)]
    out.metric = ("max_ratio", rep.max_ratio, *_bounds(cfg, None, rep.alpha + 0.1))


def _coupling(cfg, spec, threads, out: Outcome):
    M = cfg.diagnostic["M"]
    grid = make_grid(cfg.n, cfg.T)
    init = _initial(cfg, spec.d_x)
    bundle = sample_bundle(cfg.seed, grid, M, spec.d_b, spec.d_w, threads=threads)
    xi = init.sample(cfg.seed, bundle.particle_ids, threads)
    base, _ = simulate(spec, None, grid, M, cfg.seed, bundle=bundle, xi=xi, threads=threads)
    shifted, _ = simulate(spec, None, grid, M, cfg.seed, bundle=bundle, xi=xi + cfg.diagnostic["perturbation"],
                          threads=threads)
    other, _ = simulate(spec, init, grid, M, cfg.seed + 1, threads=threads)
    s0, s1, s2 = (CouplingSample.from_ensemble(e) for e in (base, shifted, other))
    costs = [("self", coupling_cost_estimate(s0, s0)),
             ("shifted_initial", coupling_cost_estimate(s0, s1)),
             ("independent_common_noise", coupling_cost_estimate(s0, s2))]
    out.table("coupling_cost.csv", ("pair", "cost"), costs)
    out.summary += costs
    out.metric = ("self_cost", costs[0][1], *_bounds(cfg, None, 0.0))


def _mollify(cfg, spec, threads, out: Outcome):
    kern = spec.params.get("kernel")
    if kern is None:
        raise ValueError(f"model {cfg.model!r} has no interaction kernel to mollify")
    z = np.linspace(-2.0, 2.0, 41)[:, None]
    exact = kern(0.0, z, z)
    rows = []
    for n in cfg.diagnostic["mollify_n"]:
        smooth = mollify_kernel(kern, n, cfg.diagnostic["quadrature_points"])(0.0, z, z)
        gap = np.abs(smooth - exact)
        rows.append((n, float(gap.max()), float(gap.mean())))
    out.table("mollify.csv", ("n", "sup_gap", "mean_gap"), rows)
    out.plot("mollify.csv", "n", ["sup_gap", "mean_gap"], "mollified kernel gap vs n")
    out.metric = ("mean_gap_last", rows[-1][2], *_bounds(cfg, None, None))


RUNNERS = {
    "simulate": _simulate, "spde_check": _spde, "fubini_check": _fubini, "holder_check": _holder,
    "wp_holder_check": _wp_holder, "girsanov_check": _girsanov, "contraction": _contraction,
    "coupling_cost": _coupling, "mollify_demo": _mollify,
}


# ---------------------------------------------------------------------------
# orchestration


def check_writable(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=path):
            pass
    except OSError as exc:
        raise PermissionError(f"output_dir not writable: {path} ({exc.strerror or exc})") from None


def header_lines(cfg: ScenarioConfig) -> list[str]:
    lines = [f"mkvsim {__version__}: scenario={cfg.scenario} model={cfg.model} seed={cfg.seed} "
             f"N={cfg.N} n={cfg.n} T={cfg.T!r} replicates={cfg.replicates}"]
    if cfg.alpha is not None:
        lines.append(f"contraction: c_tv={cfg.diagnostic['c_tv']!r} c_bdg={cfg.diagnostic['c_bdg']!r} "
                     f"alpha={cfg.alpha!r}")
    return lines


def run_scenario(cfg: ScenarioConfig, threads: int | None = None, check: bool = False,
                 log=print) -> int:
    """Run one scenario and write its files; returns the exit status."""
    check_writable(cfg.output_dir)
    for line in header_lines(cfg):
        log(line)
    if cfg.alpha is not None and cfg.alpha >= 1:
        raise ValueError(f"no contraction guarantee at this T (alpha = {cfg.alpha!r})")
    threads = resolve_threads(threads)
    spec = _model(cfg)
    start = time.perf_counter()
    out = Outcome()
    RUNNERS[cfg.scenario](cfg, spec, threads, out)
    wall = time.perf_counter() - start

    status = EXIT_OK
    verdict = "not checked"
    if out.metric is not None:
        name, value, lo, hi = out.metric
        ok = (lo is None or value >= lo) and (hi is None or value <= hi)
        verdict = f"{name}={value!r} lower={lo} upper={hi} {'PASS' if ok else 'FAIL'}"
        if check and not ok:
            status = EXIT_ASSERT
    out.summary.append(("assertion", verdict))

    files = []
    texts = [(name, csv_text(header, rows)) for name, header, rows in out.tables]
    texts.append(("summary.csv", csv_text(("quantity", "value"), out.summary)))
    for name, text in texts:
        with open(os.path.join(cfg.output_dir, name), "w", newline="") as fh:
            fh.write(text)
        files.append(name)
    with open(os.path.join(cfg.output_dir, "plots.json"), "w") as fh:
        json.dump({"scale": "loglog" if cfg.scenario.endswith("holder_check") else "linear",
                   "plots": out.plots}, fh, indent=2, sort_keys=True)
    files.append("plots.json")
    manifest = {
        "config_hash": cfg.digest(),
        "config": cfg.as_dict(),
        "seed": cfg.seed,
        "threads": threads,
        "versions": {"mkvsim": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "wall_time_s": wall,
        "files": files + ["manifest.json"],
        "assertion": verdict,
    }
    with open(os.path.join(cfg.output_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    log(verdict)
    return status


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="mkvsim", description=__doc__)
    ap.add_argument("config", help="path to a [section] key = value config file")
    ap.add_argument("--seed", type=int, help="override run.seed")
    ap.add_argument("--assert", dest="check", action="store_true",
                    help="exit 2 when the scenario metric falls outside its bounds")
    ap.add_argument("--out", help="override run.output_dir")
    ap.add_argument("--threads", type=int, help="worker threads (default: MKVSIM_THREADS or 1)")
    args = ap.parse_args(argv)
    try:
        with open(args.config) as fh:
            cfg = parse_config(fh.read())
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.out is not None:
            changes["output_dir"] = args.out
        if changes:
            cfg = cfg.replace(**changes)
        return run_scenario(cfg, threads=args.threads, check=args.check)
    except Exception as exc:  # every failure maps to exit status 1
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
