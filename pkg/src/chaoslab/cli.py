"""Command-line entry point: ``chaoslab <subcommand> --config PATH --out DIR``.

Every invocation writes its outputs plus ``manifest.json`` (config hash,
seed, timestamps, and each output with its kind and row count) into the
output directory.  Failures write ``error.json`` instead and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from . import chaos_diagnostics as cd
from . import gauss_oracle as go
from . import girsanov_lab as gl
from . import meanfield_ref as mf
from . import plotting
from .config import ExperimentConfig, parse_config
from .errors import ChaosLabError, EstimationFailure, UsageError
from .kernels import builtin, classify
from .sde_engine import run

SUBCOMMANDS = ("check-kernel", "simulate", "meanfield", "girsanov", "chaos", "bound-oracle")
THREADS_ENV = "CHAOSLAB_THREADS"


@dataclass
class RunManifest:
    subcommand: str
    config_hash: str
    tool_version: str
    seed: int
    threads: int
    started: str
    finished: str = ""
    outputs: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


class _Outputs:
    """Collects output files so each is listed once in the manifest."""

    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.items: list[dict] = []
        self.notes: list[str] = []

    def _add(self, path: Path, kind: str, rows: int | None):
        self.items.append({"path": path.name, "kind": kind, "rows": rows})
        return path

    def csv(self, name: str, header: list[str], rows: list[list]) -> Path:
        path = self.dir / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])
        return self._add(path, "csv", len(rows))

    def json(self, name: str, payload) -> Path:
        path = self.dir / name
        path.write_text(json.dumps(payload, indent=2, default=_jsonable) + "\n")
        return self._add(path, "json", None)

    def binary(self, path: Path, rows: int) -> Path:
        return self._add(path, "trajectory", rows)

    def figure(self, path: Path) -> Path:
        return self._add(path, "figure", None)

    def text(self, name: str, text: str) -> Path:
        path = self.dir / name
        path.write_text(text)
        return self._add(path, "config", text.count("\n"))


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return str(v)


def resolve_threads(arg: int | None) -> int:
    """``--threads`` wins, then ``CHAOSLAB_THREADS``, then 1; 0 means one per CPU."""
    value = arg
    if value is None:
        env = os.environ.get(THREADS_ENV, "").strip()
        if env:
            try:
                value = int(env)
            except ValueError:
                raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}", "cli_io") from None
    if value is None:
        return 1
    if value < 0:
        raise UsageError(f"threads must be >= 0, got {value}", "cli_io")
    return value if value > 0 else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# studies


def _check_kernel(cfg: ExperimentConfig, out: _Outputs, threads: int):
    spec = cfg.kernel()
    c = classify(spec)
    print(f"{spec.name}: {c.verdict}")
    record = asdict(c)
    record.update(kernel=spec.name, params=spec.params, p=spec.exponents.p, q=spec.exponents.q,
                  d=spec.exponents.d, exponent=spec.exponents.gaussian_exponent)
    out.json("kernel_check.json", record)
    keys = ["verdict", "exponent_sum", "exponent_test", "local_lp", "global_lp", "h2_tail_ok", "lp_norm",
            "best_effort"]
    out.csv("kernel_check.csv", ["field", "value"], [[k, record[k]] for k in keys])
    r = np.logspace(-4, 3, 200)
    z = np.zeros((r.size, spec.dim))
    z[:, 0] = r
    h = np.asarray(spec.dominator(0.5, z), dtype=float)
    ok = h > 0
    if ok.any():
        out.figure(plotting.loglog_series(out.dir / "kernel_check.png", {"h(|z|)": (r[ok], h[ok])},
                                          "|z|", "dominator", f"{spec.name}: {c.verdict}"))


def _simulate(cfg: ExperimentConfig, out: _Outputs, threads: int):
    sc = cfg.sim_config()
    block = run(sc, record_every=cfg.sim["record_every"], runs=cfg.sim["runs"], threads=threads)
    path = block.save(out.dir / "trajectory.bin")
    out.binary(path, int(block.snapshots.shape[0]))
    wanted = sorted({t for t in cfg.experiment["times"] if _on_grid(block.times, t)} | {float(block.times[-1])})
    rows = [list(r) for r in block.marginal_rows(times=wanted)]
    out.csv("marginals.csv", ["time", "run", "particle"] + [f"x{k}" for k in range(sc.dim)], rows)
    out.figure(plotting.trajectories(out.dir / "trajectories.png", block.times, block.snapshots,
                                     title=f"{sc.kernel.name}, N={sc.n_particles}"))


def _on_grid(times: np.ndarray, t: float) -> bool:
    return bool(np.any(np.abs(times - t) <= 1e-9 * max(1.0, t)))


def _gaussian_reference(cfg: ExperimentConfig) -> Callable | None:
    """Closed-form limit marginals for the zero and linear-OU kernels from a Gaussian or point start."""
    law = cfg.initial_law()
    if law.kind == "uniform":
        return None
    d = cfg.sim["d"]
    mean0 = law.mean_vector(d)
    var = law.variance_vector(d)
    if np.ptp(var) > 0:
        return None
    sigma = cfg.sim["sigma"]
    if cfg.kernel_name == "zero":
        return lambda t: mf.DensityEstimate(t, "exact-heat", mean=mean0, var=var + sigma**2 * t)
    if cfg.kernel_name == "linear-ou":
        kappa = cfg.kernel_params.get("kappa", 1.0)
        return lambda t: mf.exact_ou_density(t, mean0, float(var[0]), sigma, kappa)
    return None


def _meanfield(cfg: ExperimentConfig, out: _Outputs, threads: int):
    ex = cfg.experiment
    sc = cfg.sim_config()
    d = sc.dim
    grid = np.linspace(ex["grid_min"], ex["grid_max"], ex["grid_cells"])
    times = [float(t) for t in ex["times"]]
    res = mf.picard_solve(sc, iterations=ex["iterations"], n_ref=ex["n_ref"], bandwidth=ex["bandwidth"],
                          record_times=times, grid=grid if d <= 2 else None, threads=threads)
    if not res.converged:
        out.notes.append(f"Picard iteration not converged after {ex['iterations']} iterations")
    out.csv("picard_distances.csv", ["iteration"] + [f"t={t}" for t in times],
            [[k + 1, *dist] for k, dist in enumerate(res.distances)])
    methods: dict[str, list[mf.DensityEstimate]] = {"picard": res.final}
    exact = _gaussian_reference(cfg)
    if exact is not None:
        methods["exact"] = [exact(t) for t in times]
    if d == 1 and cfg.initial_law().kind != "point":
        dx = grid[1] - grid[0]
        methods["fokker-planck"] = mf.fokker_planck_1d(
            sc.kernel, grid[0] - dx / 2, grid[-1] + dx / 2, grid.size, mf.initial_density_1d(cfg.initial_law()),
            sc.diffusion, sc.horizon, record_times=times)
    for name, ests in methods.items():
        for e in ests:
            values = e.values
            if values is None and e.mean is not None and d <= 2 and e.samples is None:
                values = _gaussian_on_grid(e, grid)
            if values is None:
                continue
            stem = f"density_{name}_t{e.time:g}"
            if d == 1:
                rows = [[x, v] for x, v in zip(grid if e.axes is None else e.axes[0], values)]
                out.csv(stem + ".csv", ["x", "density"], rows)
            else:
                xs, ys = (grid, grid) if e.axes is None else e.axes
                rows = [[x, y, values[i, j]] for i, x in enumerate(xs) for j, y in enumerate(ys)]
                out.csv(stem + ".csv", ["x", "y", "density"], rows)
            out.json(stem + ".json", {"time": e.time, "method": e.method, "bandwidth": e.bandwidth})
    pair_rows = []
    names = list(methods)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            for ea, eb in zip(methods[a], methods[b]):
                pair_rows.append([ea.time, a, b, _law_distance(ea, eb, ex["n_slices"])])
    if pair_rows:
        out.csv("meanfield_agreement.csv", ["time", "method_a", "method_b", "sliced_w1"], pair_rows)
    decay_rows = []
    ts = np.array(times)
    if len(ts) >= 4 and ts.max() / ts.min() >= 10:
        for r in ex["decay_r"]:
            for t, v in mf.density_decay_check(res.final, r, grid if d <= 2 else None):
                decay_rows.append([r, t, v])
        out.csv("density_decay.csv", ["r", "time", "normalized_norm"], decay_rows)
    else:
        out.notes.append("density decay check skipped: needs >= 4 times spanning a decade")
    if d == 1:
        curves = {}
        for name, ests in methods.items():
            e = ests[-1]
            vals = e.values if e.values is not None else _gaussian_on_grid(e, grid)
            if vals is not None:
                curves[f"{name}, t={e.time:g}"] = (grid if e.axes is None else e.axes[0], vals)
        out.figure(plotting.densities(out.dir / "meanfield.png", curves, f"{sc.kernel.name} limit density"))


def _gaussian_on_grid(e: mf.DensityEstimate, grid: np.ndarray):
    if e.mean is None or e.var is None or e.dim > 2:
        return None
    mesh = np.meshgrid(*[grid] * e.dim, indexing="ij")
    vals = np.ones_like(mesh[0])
    for k, xk in enumerate(mesh):
        vals = vals * np.exp(-0.5 * (xk - e.mean[k]) ** 2 / e.var[k]) / math.sqrt(2 * math.pi * e.var[k])
    return vals


def _law_distance(a: mf.DensityEstimate, b: mf.DensityEstimate, n_slices: int) -> float:
    if a.dim == 1:
        return cd.w1_1d(a, b)
    sa = a.samples if a.samples is not None else a.sample(20000)
    sb = b.samples if b.samples is not None else b.sample(20000)
    return cd.sliced_w1(sa, sb, n_slices)


def _girsanov(cfg: ExperimentConfig, out: _Outputs, threads: int):
    ex = cfg.experiment
    base = cfg.sim_config()
    free = builtin("zero", {"d": base.dim})
    rows, wrows = [], []
    for n in ex["n_list"]:
        sc = base.with_(n_particles=int(n), partial_r=0)
        for r in ex["r_list"]:
            if not 0 <= r < n:
                raise UsageError(f"r={r} must satisfy 0 <= r < N={n}", "girsanov_lab")
            ref_cfg = sc.with_(kernel=free) if r == 0 else sc.with_(partial_r=int(r))
            traj = run(ref_cfg, runs=ex["n_paths"], keep_increments=True, threads=threads)
            acc = gl.drift_energy(traj, sc, int(r), threads)
            energy_mean = float(np.mean(acc.drift_energy))
            for a in ex["alpha"]:
                try:
                    e = gl.exp_moment(acc, a, seed=cfg.sim["seed"])
                    rows.append([n, r, a, energy_mean, e.log_mean_exp, e.ci_low, e.ci_high, e.diverged_fraction])
                except EstimationFailure as exc:
                    out.notes.append(f"N={n}, r={r}, alpha={a}: {exc}")
                    rows.append([n, r, a, energy_mean, math.nan, math.nan, math.nan, 1.0])
            w = gl.weight_moment(acc, 1.0, seed=cfg.sim["seed"])
            wrows.append([n, r, w.log_mean_exp, w.ci_low, w.ci_high])
    out.csv("girsanov.csv", ["N", "r", "alpha", "energy_mean", "log_mean_exp", "ci_low", "ci_high",
                             "diverged_fraction"], rows)
    out.csv("girsanov_weights.csv", ["N", "r", "log_mean_weight", "ci_low", "ci_high"], wrows)
    series = {}
    for r in ex["r_list"]:
        pts = sorted({(row[0], row[3]) for row in rows if row[1] == r})
        if any(v > 0 for _, v in pts):
            series[f"r={r}"] = ([p[0] for p in pts], [max(p[1], 1e-300) for p in pts])
    if series:
        out.figure(plotting.loglog_series(out.dir / "girsanov.png", series, "N", "mean drift energy",
                                          f"{base.kernel.name}: full (r=0) vs partial drift energy"))


def _chaos(cfg: ExperimentConfig, out: _Outputs, threads: int):
    ex = cfg.experiment
    base = cfg.sim_config()
    runs = ex["n_paths"]
    ensembles = {int(n): run(base.with_(n_particles=int(n)), runs=runs, threads=threads) for n in ex["n_list"]}
    times = [t for t in ex["times"] if 0 < t <= base.horizon + 1e-12]
    reference = _gaussian_reference(cfg)
    if reference is None:
        pic = mf.picard_solve(base, iterations=ex["iterations"], n_ref=ex["n_ref"], record_times=times,
                              threads=threads)
        by_time = {e.time: e for e in pic.final}
        reference = lambda t: by_time.get(round(t / base.dt) * base.dt)  # noqa: E731
    method = ex["method"]
    if base.dim > 1 and method == "exact-w1-1d":
        method = "sliced-w1"
        out.notes.append("d > 1: marginal distance uses sliced-w1")
    mrows, series, bands = [], {}, {}
    for t in times:
        rep = cd.marginal_distance(ensembles, reference, t, method, ex["n_slices"], seed=cfg.sim["seed"])
        for x, v, lo, hi in rep.series:
            mrows.append([t, int(x), v, lo, hi, rep.fitted_slope])
        series[f"t={t:g}"] = (rep.abscissae, rep.values)
        bands[f"t={t:g}"] = ([s[2] for s in rep.series], [s[3] for s in rep.series])
    out.csv("chaos_marginal.csv", ["time", "N", "distance", "ci_low", "ci_high", "slope"], mrows)
    out.figure(plotting.loglog_series(out.dir / "chaos_marginal.png", series, "N", f"{method} distance",
                                      "empirical marginal vs limit", bands))

    big = ensembles[max(ensembles)]
    t_end = float(big.times[-1])
    pairs = [(t_end - g, t_end) for g in ex["gaps"] if g < t_end + 1e-12 and _on_grid(big.times, t_end - g)]
    skipped = [g for g in ex["gaps"] if (t_end - g, t_end) not in pairs]
    if skipped:
        out.notes.append(f"tightness gaps not on the recorded grid were skipped: {skipped}")
    tight = cd.tightness_moment(big, pairs)
    out.csv("chaos_tightness.csv", ["gap", "ratio", "ci_low", "ci_high"], [list(s) for s in tight.series])

    s, t = ex["g_window"]
    f = cd.test_function(ex["test_function"])
    g = cd.g_functional(ensembles, base.kernel, f, ex["phi"], [s], s, t, threads)
    out.csv("chaos_g.csv", ["N", "mean_g_squared", "ci_low", "ci_high", "slope"],
            [[int(x), v, lo, hi, g.fitted_slope] for x, v, lo, hi in g.series])
    ind = cd.independence_test(ensembles, ex["covariance_function"], ex["covariance_function"], t_end)
    out.csv("chaos_independence.csv", ["N", "abs_covariance", "ci_low", "ci_high", "slope"],
            [[int(x), v, lo, hi, ind.fitted_slope] for x, v, lo, hi in ind.series])
    out.figure(plotting.loglog_series(
        out.dir / "chaos_decay.png",
        {"E[G^2]": (g.abscissae, g.values), "|Cov|": (ind.abscissae, ind.values)}, "N", "value",
        "martingale residual and pair covariance"))


def _bound_oracle(cfg: ExperimentConfig, out: _Outputs, threads: int):
    ex = cfg.experiment
    spec = cfg.kernel()
    t1 = ex["t1"]
    windows = [(t1, t1 + w) for w in ex["windows"]]
    shifts = []
    for s in ex["shifts"]:
        v = np.zeros(spec.dim)
        v[0] = s
        shifts.append(v)
    rep = go.window_sweep(spec, windows, shifts)
    rows = [[r["window_width"], r["shift"], r["integral"], r["bound"], r["slope"]] for r in rep.rows()]
    out.csv("bound_oracle.csv", ["window_width", "shift", "integral", "bound", "slope"], rows)
    if rep.exponent > 0 and math.isfinite(rep.c0_estimate) and rep.c0_estimate > 0:
        w3, delta, n = go.conditioning_windows(rep.c0_estimate, ex["conditioning_kappa"], cfg.sim["t"],
                                               spec.exponents, ex["conditioning_alpha"])
        out.csv("conditioning_windows.csv", ["c0", "exponent", "growth_window", "moment_delta", "n_windows"],
                [[rep.c0_estimate, rep.exponent, w3, delta, n]])
    else:
        out.notes.append(f"conditioning windows skipped: exponent {rep.exponent:.4g} is not positive")
    print(f"fitted slope {rep.fitted_slope:.4f}, exponent {rep.exponent:.4f}, c0 {rep.c0_estimate:.4g}")
    w = rep.widths
    out.figure(plotting.loglog_series(out.dir / "bound_oracle.png", {"integral (worst shift)": (w, rep.integral_value)},
                                      "window width", "integral",
                                      f"{spec.name}: slope {rep.fitted_slope:.3f}",
                                      reference=(w, rep.bound(), f"c0 w^{rep.exponent:.3f}")))


STUDIES: dict[str, Callable] = {
    "check-kernel": _check_kernel,
    "simulate": _simulate,
    "meanfield": _meanfield,
    "girsanov": _girsanov,
    "chaos": _chaos,
    "bound-oracle": _bound_oracle,
}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def dispatch(subcommand: str, cfg: ExperimentConfig, out_dir: Path, threads: int = 1) -> RunManifest:
    """Run one study end to end, writing its outputs and manifest into ``out_dir``."""
    if subcommand not in STUDIES:
        raise UsageError(f"unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}", "cli_io")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(subcommand, cfg.config_hash, __version__, cfg.sim["seed"], threads, _now())
    out = _Outputs(out_dir)
    out.text("config.resolved", cfg.render())
    STUDIES[subcommand](cfg, out, threads)
    manifest.finished = _now()
    manifest.outputs = out.items
    manifest.notes = out.notes
    manifest.write(out_dir)
    return manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chaoslab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"chaoslab {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=STUDIES[name].__name__.strip("_").replace("_", " "))
        p.add_argument("--config", required=True, type=Path, help="experiment config file")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (0 = one per CPU; default ${THREADS_ENV} or 1)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = None
    try:
        threads = resolve_threads(args.threads)
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}", "cli_io") from None
        cfg = parse_config(text, seed_override=args.seed)
        manifest = dispatch(args.subcommand, cfg, args.out, threads)
    except ChaosLabError as exc:
        record = exc.to_record()
        record["config_hash"] = None if cfg is None else cfg.config_hash
        record["subcommand"] = args.subcommand
        try:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / "manifest.json").unlink(missing_ok=True)  # never leave a stale success marker
            (args.out / "error.json").write_text(json.dumps(record, indent=2, default=_jsonable) + "\n")
        except OSError:
            pass
        print(f"error [{record['module']}]: {exc}", file=sys.stderr)
        return 1
    (args.out / "error.json").unlink(missing_ok=True)
    print(f"{args.subcommand}: wrote {len(manifest.outputs)} outputs to {args.out} (config {manifest.config_hash})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
