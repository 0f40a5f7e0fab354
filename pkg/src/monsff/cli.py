"""Command-line runner.

    monsff run --config cfg.json [--seed U64] [--workers K] [--out DIR]
    monsff validate --config cfg.json

Exit codes: 0 success, 2 config error, 3 resource error, 4 feature not found.
The default output root is ``$MONSFF_OUTPUT_ROOT`` (else ``./runs``).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .analysis import (SweepProtocol, decompose_sff, ramp_features, sweep, write_feature_table)
from .config import dump_config, load_config
from .errors import ConfigError, FeatureNotFound, MonsffError, ResourceError
from .noise import TimeGrid, derive_stream, refine_path, sample_wiener_path
from .sff import (AveragingSpec, FixedSpectra, GueEnsemble, SffParams, SykEnsemble,
                  annealed_relative_error, ensemble_average, sff_monitored, sff_efficiency,
                  write_curve_csv)
from .spectrum import load_spectrum
from .trajectory import (coherent_gibbs, collapse_statistics, em_batch, energy_moments,
                         max_stable_dt, purity, sample_physical_record)

log = logging.getLogger("monsff")
OUTPUT_ENV = "MONSFF_OUTPUT_ROOT"
ENSEMBLE_EXPERIMENTS = ("sff-run", "sweep-gamma", "sweep-eta", "annealed-diag")


# --- building blocks from a config -----------------------------------------

def make_source(cfg):
    sp, seed = cfg["spectrum"], int(cfg["master_seed"])
    if sp["kind"] == "syk":
        return SykEnsemble(int(sp["n_majorana"]), seed, float(sp["coupling_scale"]), sp["parity"],
                           float(sp["anticommutator"]), bool(sp["allow_large"]))
    if sp["kind"] == "gue":
        return GueEnsemble(int(sp["dim"]), float(sp["width"]), seed)
    return FixedSpectra((load_spectrum(sp["path"]),))


def spectrum_dim(cfg) -> int:
    sp = cfg["spectrum"]
    if sp["kind"] == "syk":
        n = 2 ** (int(sp["n_majorana"]) // 2)
        return n // 2 if sp["parity"] is not None else n
    if sp["kind"] == "gue":
        return int(sp["dim"])
    return load_spectrum(sp["path"]).dim


def make_grid(cfg) -> TimeGrid:
    g = cfg["grid"]
    if g["spacing"] == "log":
        return TimeGrid.log(g["t_min"], g["t_max"], int(g["points"]))
    return TimeGrid.uniform(g["t_max"], int(g["points"]) - 1, g["t_min"])


def make_avg(cfg, **over) -> AveragingSpec:
    a = dict(cfg["averaging"], **over)
    return AveragingSpec(int(a["n_disorder"]), int(a["n_trajectories"]), a["mode"], a["measure"],
                         a["noise_average"], a["noise_sharing"], int(a["keep_trajectories"]))


def _first(x):
    return x[0] if isinstance(x, list) else x


def _as_list(x):
    return [float(v) for v in x] if isinstance(x, list) else [float(x)]


def make_params(cfg, **over) -> SffParams:
    kw = dict(variant=cfg["variant"], beta=float(cfg["beta"]), gamma=float(_first(cfg["gamma"])),
              eta=float(_first(cfg["eta"])), method=cfg["method"])
    kw.update(over)
    return SffParams(**kw)


# --- cost model --------------------------------------------------------------

# measured peak of rendering the SVGs, independent of problem size
PLOT_BYTES = 4_500_000


def estimate_cost(cfg) -> dict:
    """Rough peak bytes and seconds for a run (per worker for memory)."""
    d = spectrum_dim(cfg)
    exp = cfg["experiment"]
    pts = int(cfg["grid"]["points"])
    a = cfg["averaging"]
    n_samples = int(a["n_disorder"]) * int(a["n_trajectories"])
    build = 4 * 16 * d * d if cfg["spectrum"]["kind"] == "syk" else 3 * 16 * d * d
    eta = float(_first(cfg["eta"]))
    variant = cfg["variant"]
    # ensemble runs always evaluate the O(d^2) dephasing curve for the annealed comparison
    dense = exp in ENSEMBLE_EXPERIMENTS or (variant in ("efficiency", "dephasing") and eta < 1)
    if exp in ENSEMBLE_EXPERIMENTS:
        per_curve = 6 * 8 * pts * d + 16 * pts * d
        pair = 8 * 8 * d * d if dense else 0
        mem = build + per_curve + pair + 8 * pts * (8 + int(a["keep_trajectories"]))
        n_vals = len(_as_list(cfg["gamma"] if exp != "sweep-eta" else cfg["eta"]))
        secs = n_vals * (int(a["n_disorder"]) * 2e-9 * d**3 + n_samples * pts * d * 6e-8
                         + (int(a["n_disorder"]) * pts * d * d * 3e-8 if dense else 0))
    elif exp in ("observables", "purity"):
        mem = build + 8 * pts * d * 6 + (8 * d * d * 6 if exp == "purity" else 0)
        n = int(a["n_trajectories"]) * max(len(_as_list(cfg["gamma"])), len(_as_list(cfg["eta"])))
        secs = n * pts * d * (d if exp == "purity" else 1) * 5e-8
    elif exp == "benchmark-sme":
        dense_sme = eta < 1
        n_steps = _sme_steps(cfg, d)
        mem = build + (4 * 16 * d * d if dense_sme else 6 * 16 * d) + 8 * n_steps * 3
        secs = len(_as_list(cfg["gamma"])) * n_steps * (d * d if dense_sme else d) * 4e-8
    elif exp == "collapse-stats":
        n_steps = _sme_steps(cfg, d)
        chunk = min(int(cfg["n_paths"]), 10000)
        mem = build + chunk * (min(1000, n_steps) * 8 + 6 * 16 * d)
        secs = int(cfg["n_paths"]) * n_steps * d * 3e-8
    else:  # decompose
        mem = build + 8 * pts * 8 + 16 * d * 8
        secs = pts * d * 1e-6
    mem += PLOT_BYTES
    return {"dim": d, "bytes_per_worker": int(mem), "workers": int(cfg["workers"]),
            "bytes_total": int(mem) * int(cfg["workers"]), "seconds": float(secs)}


def _sme_steps(cfg, d) -> int:
    g = cfg["grid"]
    return int(cfg["sme"]["save_points"]) * 2 ** int(cfg["sme"]["refinements"]) if cfg["sme"]["dt"] is None \
        else int(math.ceil(g["t_max"] / cfg["sme"]["dt"]))


def check_resources(cfg, cost) -> None:
    if cost["bytes_total"] > cfg["memory_limit_bytes"]:
        raise ResourceError(f"estimated memory {cost['bytes_total']} B exceeds memory_limit_bytes="
                            f"{cfg['memory_limit_bytes']}")


# --- output helpers ---------------------------------------------------------

class RunOutput:
    def __init__(self, root: Path, seed: int):
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        base = root / f"{stamp}-seed{seed}"
        path, k = base, 0
        while path.exists():
            k += 1
            path = Path(f"{base}-{k}")
        path.mkdir(parents=True)
        self.dir = path
        self.files: list[str] = []
        self.stream_keys: list[dict] = []
        self.notes: list[str] = []

    def path(self, name) -> Path:
        p = self.dir / name
        if p.exists():
            raise FileExistsError(f"refusing to overwrite {p}")
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(name)
        return p

    def table(self, name, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])

    def checksums(self) -> dict:
        out = {}
        for name in sorted(self.files):
            out[name] = hashlib.sha256((self.dir / name).read_bytes()).hexdigest()
        return out


def _disorder_keys(cfg, n):
    return [{"master_seed": int(cfg["master_seed"]), "role": "disorder", "indices": [i]} for i in range(n)]


# --- experiments ------------------------------------------------------------

def _features_or_note(out, curve, cfg, parameter="", value=math.nan):
    an = cfg["analysis"]
    try:
        return ramp_features(curve, int(an["window"]), None, float(an["tol"]), int(an["sustain"]),
                             parameter, value)
    except FeatureNotFound as exc:
        out.notes.append(f"feature extraction failed: {exc}")
        raise


def exp_sff_run(cfg, out: RunOutput):
    src, grid, avg = make_source(cfg), make_grid(cfg), make_avg(cfg)
    params = make_params(cfg)
    res = ensemble_average(src, params, grid, avg, int(cfg["master_seed"]), int(cfg["workers"]))
    out.stream_keys += _disorder_keys(cfg, avg.n_disorder) + res.stream_keys()
    curve = res.curve(avg.mode)
    write_curve_csv(curve, out.path("sff.csv"))
    kept = res.quenched().trajectories
    traj = (grid.points, kept) if kept is not None and len(kept) else None
    plotting.plot_curves([curve], out.path("sff.svg"), [f"{params.variant}, {avg.mode}"],
                         title=f"gamma={params.gamma:g}, eta={params.effective_eta:g}, beta={params.beta:g}",
                         trajectories=traj)
    f = _features_or_note(out, curve, cfg, "gamma", params.gamma)
    write_feature_table([f], out.path("features.csv"))


def exp_sweep(cfg, out: RunOutput, parameter):
    src, grid, avg = make_source(cfg), make_grid(cfg), make_avg(cfg)
    values = _as_list(cfg[parameter])
    an = cfg["analysis"]
    proto = SweepProtocol(src, make_params(cfg), grid, avg, int(cfg["master_seed"]), int(an["window"]),
                          float(an["tol"]), int(an["sustain"]), int(cfg["workers"]))
    curves = []
    rows = sweep(parameter, values, proto, curves)
    out.stream_keys += _disorder_keys(cfg, avg.n_disorder)
    for i, c in enumerate(curves):
        write_curve_csv(c, out.path(f"curves/{parameter}_{i:03d}.csv"))
    write_feature_table(rows, out.path("features.csv"))
    plotting.plot_curves(curves, out.path("curves.svg"), [f"{parameter}={v:g}" for v in values], bands=False)
    plotting.plot_sweep(rows, out.path("sweep.svg"))
    for r in rows:
        if r.note:
            out.notes.append(f"{parameter}={r.value:g}: {r.note}")


def _records(cfg, out, rho0, gamma, eta, grid, j, role):
    stream = derive_stream(int(cfg["master_seed"]), role, j)
    out.stream_keys.append(stream.key.to_json())
    if cfg["averaging"]["measure"] == "physical":
        return sample_physical_record(rho0, gamma, eta, grid, stream).values
    return sample_wiener_path(grid, stream).values


def exp_observables(cfg, out: RunOutput):
    src, grid = make_source(cfg), make_grid(cfg)
    spec = src.realization(0)
    out.stream_keys += _disorder_keys(cfg, 1)
    rho0 = coherent_gibbs(spec, float(cfg["beta"]))
    n = int(cfg["averaging"]["n_trajectories"])
    rows, series, labels = [], [], []
    for gi, g in enumerate(_as_list(cfg["gamma"])):
        mus, vs = [], []
        for j in range(n):
            w = _records(cfg, out, rho0, g, 1.0, grid, j, f"observables/{gi}")
            mu, v, _ = energy_moments(rho0, g, 1.0, grid.points, w)
            mus.append(mu)
            vs.append(np.maximum(v, 0.0))
        mus, vs = np.array(mus), np.array(vs)
        for k, t in enumerate(grid.points):
            rows.append([g, t, mus[:, k].mean(), vs[:, k].mean(), vs[:, k].std() / math.sqrt(n)])
        series.append(vs.mean(axis=0) / vs[0, 0] if vs[0, 0] > 0 else vs.mean(axis=0))
        labels.append(f"gamma={g:g}")
    out.table("observables.csv", ["gamma", "t", "mean_energy", "energy_variance", "variance_stderr"], rows)
    plotting.plot_series(grid.points, [np.maximum(s, 1e-300) for s in series], out.path("variance.svg"),
                         labels, ylabel="<V_t> / V_0")


def exp_purity(cfg, out: RunOutput):
    src, grid = make_source(cfg), make_grid(cfg)
    spec = src.realization(0)
    out.stream_keys += _disorder_keys(cfg, 1)
    rho0 = coherent_gibbs(spec, float(cfg["beta"]))
    g = float(_first(cfg["gamma"]))
    n = int(cfg["averaging"]["n_trajectories"])
    rows, series, labels = [], [], []
    for ei, eta in enumerate(_as_list(cfg["eta"])):
        ps = np.array([purity(rho0, g, eta, grid.points,
                              _records(cfg, out, rho0, g, eta, grid, j, f"purity/{ei}")) for j in range(n)])
        for k, t in enumerate(grid.points):
            rows.append([eta, t, ps[:, k].mean(), ps[:, k].std() / math.sqrt(n)])
        series.append(ps.mean(axis=0))
        labels.append(f"eta={eta:g}")
    out.table("purity.csv", ["eta", "t", "purity", "stderr"], rows)
    plotting.plot_series(grid.points, series, out.path("purity.svg"), labels, ylabel="purity", logy=False)


def exp_annealed(cfg, out: RunOutput):
    src, grid, avg = make_source(cfg), make_grid(cfg), make_avg(cfg)
    params = make_params(cfg)
    res = ensemble_average(src, params, grid, avg, int(cfg["master_seed"]), int(cfg["workers"]))
    out.stream_keys += _disorder_keys(cfg, avg.n_disorder) + res.stream_keys()
    q = res.quenched()
    modes = ("annealed_noise_fixed_H", "annealed_noise_then_disorder", "annealed_both")
    ann = [res.curve(m) for m in modes]
    win = min(int(cfg["analysis"]["error_window"]), len(grid))
    errs = [annealed_relative_error(q, a, win) for a in ann]
    rows = zip(grid.points, q.values, *(a.values for a in ann), *(e.values for e in errs))
    out.table("annealed.csv", ["t", "quenched", *modes, *(f"error_{m}" for m in modes)], rows)
    write_curve_csv(q, out.path("quenched.csv"))
    plotting.plot_curves([q, *ann], out.path("annealed.svg"), ["quenched", *modes], bands=False)
    plotting.plot_series(grid.points, [np.maximum(e.values, 1e-300) for e in errs],
                         out.path("annealed_error.svg"), list(modes), ylabel="relative error")


def _sme_grids(cfg, spec, gamma):
    t_max = float(cfg["grid"]["t_max"])
    save = int(cfg["sme"]["save_points"])
    guard = max_stable_dt(spec.energies, gamma)
    cap = min(guard, cfg["sme"]["dt"] or math.inf)
    k = int(cfg["sme"]["refinements"])
    while t_max / (save * 2**k) > cap:
        k += 1
    return TimeGrid.uniform(t_max, save), k


def exp_benchmark(cfg, out: RunOutput):
    src = make_source(cfg)
    spec = src.realization(0)
    out.stream_keys += _disorder_keys(cfg, 1)
    beta, eta = float(cfg["beta"]), float(_first(cfg["eta"]))
    rho0 = coherent_gibbs(spec, beta)
    rows, curves_t, series, labels = [], None, [], []
    for gi, g in enumerate(_as_list(cfg["gamma"])):
        coarse, k = _sme_grids(cfg, spec, g)
        stream = derive_stream(int(cfg["master_seed"]), "benchmark/path", gi)
        out.stream_keys.append(stream.key.to_json())
        path = sample_wiener_path(coarse, stream)
        fine = path
        for level in range(k):
            rs = derive_stream(int(cfg["master_seed"]), "benchmark/refine", gi, level)
            out.stream_keys.append(rs.key.to_json())
            fine = refine_path(fine, fine.grid.bisect(), rs)
        dt = fine.grid.dt
        closed = np.atleast_1d(sff_efficiency(spec, beta, g, eta, coarse.points, path.values)) if eta < 1 \
            else np.atleast_1d(sff_monitored(spec, beta, g, coarse.points, path.values))
        sde = {}
        for form in ("linear_normalized", "nonlinear"):
            vals = []
            for _, st in em_batch(rho0, g, eta, dt, fine.increments[None, :], form, "record",
                                  save_every=2**k):
                if st.ndim == 2:
                    vals.append(abs(st[0] @ rho0.amplitudes) ** 2)
                else:
                    vals.append(float(np.real(rho0.amplitudes @ st[0] @ rho0.amplitudes)))
            sde[form] = np.array(vals)
        for i, t in enumerate(coarse.points):
            rows.append([g, t, path.values[i], dt, closed[i], sde["linear_normalized"][i], sde["nonlinear"][i]])
        curves_t = coarse.points[1:]
        series += [closed[1:], sde["linear_normalized"][1:], sde["nonlinear"][1:]]
        labels += [f"closed form g={g:g}", f"linear g={g:g}", f"nonlinear g={g:g}"]
    out.table("benchmark.csv", ["gamma", "t", "W", "dt", "closed_form", "linear_normalized", "nonlinear"], rows)
    plotting.plot_series(curves_t, [np.maximum(s, 1e-300) for s in series], out.path("benchmark.svg"),
                         labels, ylabel="SFF")


def exp_collapse(cfg, out: RunOutput):
    src = make_source(cfg)
    spec = src.realization(0)
    out.stream_keys += _disorder_keys(cfg, 1)
    rho0 = coherent_gibbs(spec, float(cfg["beta"]))
    g = float(_first(cfg["gamma"]))
    coarse, k = _sme_grids(cfg, spec, g)
    grid = TimeGrid.uniform(coarse.points[-1], (len(coarse) - 1) * 2**k)
    stream = derive_stream(int(cfg["master_seed"]), "collapse")
    out.stream_keys.append(stream.key.to_json())
    res = collapse_statistics(rho0, g, grid, int(cfg["n_paths"]), stream)
    rows = [[i, e, int(c), f, b] for i, (e, c, f, b) in
            enumerate(zip(spec.energies, res.counts, res.frequencies, res.born_weights))]
    out.table("collapse.csv", ["index", "energy", "count", "frequency", "born_weight"], rows)
    if res.unconverged:
        out.notes.append(f"{res.unconverged} of {cfg['n_paths']} paths not localized by t={res.t_final:g}")
    plotting.plot_bars(res.frequencies, out.path("collapse.svg"), res.born_weights)


def exp_decompose(cfg, out: RunOutput):
    src, grid = make_source(cfg), make_grid(cfg)
    spec = src.realization(0)
    out.stream_keys += _disorder_keys(cfg, 1)
    g = float(_first(cfg["gamma"]))
    dec = decompose_sff(spec, float(cfg["beta"]), g, grid.points, np.zeros(len(grid)))
    rows = zip(grid.points, dec.full, dec.diag, dec.disc, dec.conn, dec.residual)
    out.table("decompose.csv", ["t", "full", "diag", "disc", "conn", "residual"], rows)
    out.notes.append(f"smoothed DOS: gaussian kernel, bandwidth {dec.bandwidth!r}")
    plotting.plot_series(grid.points, [np.maximum(np.abs(x), 1e-300) for x in (dec.full, dec.diag, dec.disc, dec.conn)],
                         out.path("decompose.svg"), ["full", "diag", "disc", "|conn|"], ylabel="SFF part")


EXPERIMENT_RUNNERS = {
    "sff-run": exp_sff_run,
    "sweep-gamma": lambda c, o: exp_sweep(c, o, "gamma"),
    "sweep-eta": lambda c, o: exp_sweep(c, o, "eta"),
    "observables": exp_observables,
    "purity": exp_purity,
    "annealed-diag": exp_annealed,
    "benchmark-sme": exp_benchmark,
    "collapse-stats": exp_collapse,
    "decompose": exp_decompose,
}


# --- commands ---------------------------------------------------------------

def run(cfg: dict, out_root=None) -> tuple[int, Path]:
    """Execute a validated config; returns (exit status, run directory)."""
    cost = estimate_cost(cfg)
    check_resources(cfg, cost)
    root = Path(out_root or cfg["output_dir"] or os.environ.get(OUTPUT_ENV) or "runs")
    out = RunOutput(root, int(cfg["master_seed"]))
    (out.dir / "config.json").write_text(dump_config(cfg) + "\n")
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    status = 0
    try:
        EXPERIMENT_RUNNERS[cfg["experiment"]](cfg, out)
    except FeatureNotFound:
        status = FeatureNotFound.exit_code
    manifest = {
        "config": cfg,
        "version": __version__,
        "started_utc": started,
        "wall_clock_s": time.perf_counter() - t0,
        "exit_status": status,
        "cost_estimate": cost,
        "files": out.checksums(),
        "notes": out.notes,
        "stream_keys": out.stream_keys,
    }
    (out.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return status, out.dir


def validate(cfg: dict) -> dict:
    cost = estimate_cost(cfg)
    check_resources(cfg, cost)
    return {"ok": True, "experiment": cfg["experiment"], "cost": cost}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="monsff", description="Spectral form factors of continuously monitored systems")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment and write CSV, SVG and a manifest")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    r.add_argument("--workers", type=int)
    r.add_argument("--out", help=f"output root (default ${OUTPUT_ENV} or ./runs)")
    v = sub.add_parser("validate", help="check a config and print a cost estimate")
    v.add_argument("--config", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "validate":
            cfg = load_config(args.config)
            print(json.dumps(validate(cfg), indent=2))
            return 0
        overrides = {"master_seed": args.seed, "workers": args.workers, "output_dir": args.out}
        cfg = load_config(args.config, overrides)
        status, path = run(cfg)
        print(path)
        if status:
            print(f"error: feature not found; partial results in {path}", file=sys.stderr)
        return status
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ResourceError as exc:
        print(f"resource error: {exc}", file=sys.stderr)
        return exc.exit_code
    except MonsffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
