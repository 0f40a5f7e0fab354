"""Spectral form factor variants and ensemble averaging.

All variants are fidelities <psi_beta|rho(t)|psi_beta> of a coherent Gibbs
state and equal 1 at t = 0.  Sums of exponentials are evaluated with a shared
max shift so numerator and denominator can under/overflow separately without
affecting their ratio.  ``np.sum`` reduces contiguous arrays pairwise, which is
the summation order for every O(d^2) sum here.

The efficiency-generalized SFF has the non-factorizable coupling
exp(+c E_n E_m), c = 2 gamma t (1 - eta).  Writing it as a Gaussian average,

    exp(c a b) = exp(-c (a^2 + b^2) / 2) E_x[exp(sqrt(c) x (a + b))],

turns the numerator into E_x |U(x)|^2 with an O(d) sum U, evaluated by
Gauss-Hermite quadrature.  Dephasing is the eta = 0 case.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from ._numerics import log_abs_sum, logsumexp, moving_average
from .errors import ValidationError
from .noise import TimeGrid, derive_stream, sample_wiener_path
from .spectrum import SpectrumRealization, SykParameters, sample_gue_spectrum, syk_spectrum
from .trajectory import _energies, coherent_gibbs, sample_physical_record

log = logging.getLogger(__name__)

VARIANTS = ("monitored", "efficiency", "nojump", "dephasing", "unitary")
MODES = ("quenched", "annealed_noise_fixed_H", "annealed_noise_then_disorder", "annealed_both")
GH_START, GH_MAX, GH_RTOL = 32, 512, 1e-8


class QuadratureWarning(RuntimeWarning):
    pass


def _bcast(*arrays):
    return np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in arrays))


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


# --- numerators and denominators (log scale) ------------------------------

def _log_numerator_monitored(e, beta, gamma, t, w):
    """log |sum_n exp(-(beta + i t - sqrt(2g) w) E_n - 2 g t E_n^2)|^2."""
    t, w = _bcast(t, w)
    re = -(beta - math.sqrt(2.0 * gamma) * w)[..., None] * e - 2.0 * gamma * t[..., None] * e**2
    la, _ = log_abs_sum(re, -t[..., None] * e)
    return 2.0 * la


def _log_denominator(e, beta, gamma, eta, t, w):
    """log [Z(beta) sum_n e^{-beta E_n} K_t(E_n, E_n)]."""
    t, w = _bcast(t, w)
    expo = (-beta * e - 4.0 * gamma * eta * t[..., None] * e**2
            + 2.0 * math.sqrt(2.0 * gamma * eta) * w[..., None] * e)
    return logsumexp(-beta * e) + logsumexp(expo, axis=-1)


def _log_numerator_double_sum(e, beta, gamma, eta, t, w):
    """log of sum_nm e^{-beta E_+} K_t(E_n, E_m) (a real, positive number)."""
    ep = (e[:, None] + e[None, :]).ravel()
    em = (e[:, None] - e[None, :]).ravel()
    s = math.sqrt(2.0 * gamma * eta)
    t_arr, w_arr = _bcast(t, w)
    out = np.empty(t_arr.shape)
    for idx in np.ndindex(t_arr.shape):
        tt, ww = float(t_arr[idx]), float(w_arr[idx])
        re = -beta * ep - gamma * tt * em**2 - gamma * eta * tt * ep**2 + s * ep * ww
        shift = np.max(re)
        val = np.sum(np.exp(re - shift) * np.cos(em * tt))
        out[idx] = math.log(val) + shift if val > 0 else -math.inf
    return out


@lru_cache(maxsize=None)
def _gh_rule(order):
    x, wts = hermegauss(order)
    return x, np.log(wts) - 0.5 * math.log(2.0 * math.pi)


def _log_numerator_quadrature(e, beta, gamma, eta, t, w, order):
    """Gauss-Hermite estimate of the same numerator with ``order`` nodes."""
    x, log_wts = _gh_rule(order)
    t_arr, w_arr = _bcast(t, w)
    out = np.empty(t_arr.shape)
    s = math.sqrt(2.0 * gamma * eta)
    for idx in np.ndindex(t_arr.shape):
        tt, ww = float(t_arr[idx]), float(w_arr[idx])
        c = 2.0 * gamma * tt * (1.0 - eta)
        shift = s * ww + math.sqrt(c) * x
        re = (-beta * e - 2.0 * gamma * tt * e**2) + shift[:, None] * e
        m = np.max(re, axis=1)
        # the phase is node independent: one real (G, d) exp times a phase vector
        u = np.exp(re - m[:, None]) @ np.exp(-1j * tt * e)
        with np.errstate(divide="ignore"):
            la = np.log(np.abs(u)) + m
        out[idx] = logsumexp(log_wts + 2.0 * la)
    return out


def _efficiency_log_numerator(e, beta, gamma, eta, t, w, method):
    if method == "direct":
        return _log_numerator_double_sum(e, beta, gamma, eta, t, w)
    if method != "quadrature":
        raise ValidationError(f"unknown method {method!r}")
    t_arr, w_arr = _bcast(t, w)
    out = np.empty(t_arr.shape)
    for idx in np.ndindex(t_arr.shape):
        tt, ww = t_arr[idx], w_arr[idx]
        order = GH_START
        prev = _log_numerator_quadrature(e, beta, gamma, eta, tt, ww, order)
        while True:
            order *= 2
            if order > GH_MAX:
                warnings.warn(f"Gauss-Hermite did not converge by {GH_MAX} nodes at t={tt:.4g}; "
                              "using the direct double sum", QuadratureWarning, stacklevel=3)
                out[idx] = _log_numerator_double_sum(e, beta, gamma, eta, tt, ww)
                break
            cur = _log_numerator_quadrature(e, beta, gamma, eta, tt, ww, order)
            if abs(math.expm1(cur - prev)) < GH_RTOL:
                out[idx] = cur
                break
            prev = cur
    return out


# --- public variants --------------------------------------------------------

def sff_monitored(spectrum, beta, gamma, t, w):
    """Monitored SFF of one trajectory with record value ``w = W_t``."""
    e = _energies(spectrum)
    if gamma < 0:
        raise ValidationError("gamma must be non-negative")
    ln = _log_numerator_monitored(e, beta, gamma, t, w)
    ld = _log_denominator(e, beta, gamma, 1.0, t, w)
    return _scalar_or_array(np.exp(ln - ld))


def sff_efficiency(spectrum, beta, gamma, eta, t, w, method="direct"):
    e = _energies(spectrum)
    if gamma < 0:
        raise ValidationError("gamma must be non-negative")
    if not 0.0 <= eta <= 1.0:
        raise ValidationError("eta must lie in [0, 1]")
    ln = _efficiency_log_numerator(e, beta, gamma, eta, t, w, method)
    ld = _log_denominator(e, beta, gamma, eta, t, w)
    return _scalar_or_array(np.exp(ln - ld))


def sff_nojump(spectrum, beta, gamma, t):
    """Null-measurement (W_t = 0) SFF, i.e. evolution under H - i gamma H^2."""
    return sff_monitored(spectrum, beta, gamma, t, np.zeros_like(np.asarray(t, dtype=float)))


def sff_dephasing(spectrum, beta, gamma, t, method="direct"):
    """Lindblad energy-dephasing SFF; the eta = 0 member of the efficiency family."""
    return sff_efficiency(spectrum, beta, gamma, 0.0, t, np.zeros_like(np.asarray(t, dtype=float)), method)


def sff_unitary(spectrum, beta, t):
    e = _energies(spectrum)
    t = np.asarray(t, dtype=float)
    la, _ = log_abs_sum(-beta * e + 0.0 * t[..., None], -t[..., None] * e)
    return _scalar_or_array(np.exp(2.0 * la - 2.0 * logsumexp(-beta * e)))


def sff_value(variant, spectrum, beta, gamma, eta, t, w, method="direct"):
    if variant == "monitored":
        return sff_monitored(spectrum, beta, gamma, t, w)
    if variant == "efficiency":
        return sff_efficiency(spectrum, beta, gamma, eta, t, w, method)
    if variant == "nojump":
        return sff_nojump(spectrum, beta, gamma, t)
    if variant == "dephasing":
        return sff_dephasing(spectrum, beta, gamma, t, method)
    if variant == "unitary":
        return sff_unitary(spectrum, beta, t)
    raise ValidationError(f"unknown SFF variant {variant!r}")


def diagonal_plateau(spectrum, beta, degeneracy_tol=1e-9):
    """Infinite-time average of the unitary SFF: sum over distinct levels of
    (g_k e^{-beta E_k})^2 / Z^2.  Reduces to sum_n e^{-2 beta E_n} / Z^2 for a
    nondegenerate spectrum."""
    from .spectrum import distinct_levels

    e = _energies(spectrum)
    _, _, labels = distinct_levels(e, degeneracy_tol)
    w = np.exp(-beta * e - logsumexp(-beta * e))
    return float(np.sum(np.bincount(labels, weights=w) ** 2))


# --- ensembles --------------------------------------------------------------

@dataclass(frozen=True)
class SykEnsemble:
    n_majorana: int
    master_seed: int
    coupling_scale: float = 1.0
    parity: int | None = None
    anticommutator: float = 1.0
    allow_large: bool = False

    def realization(self, i: int) -> SpectrumRealization:
        stream = derive_stream(self.master_seed, "disorder", i)
        params = SykParameters(self.n_majorana, self.coupling_scale, self.master_seed, self.anticommutator)
        spec = syk_spectrum(params, stream, parity=self.parity, allow_large=self.allow_large)
        return spec


@dataclass(frozen=True)
class GueEnsemble:
    dim: int
    width: float
    master_seed: int

    def realization(self, i: int) -> SpectrumRealization:
        return sample_gue_spectrum(self.dim, self.width, derive_stream(self.master_seed, "disorder", i))


@dataclass(frozen=True)
class FixedSpectra:
    spectra: tuple

    def realization(self, i: int) -> SpectrumRealization:
        return self.spectra[i % len(self.spectra)]


@dataclass(frozen=True)
class SffParams:
    variant: str = "monitored"
    beta: float = 0.0
    gamma: float = 1.0
    eta: float = 1.0
    method: str = "direct"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown SFF variant {self.variant!r}")
        if self.gamma < 0 or self.beta < 0 or not 0 <= self.eta <= 1:
            raise ValidationError("need gamma >= 0, beta >= 0, 0 <= eta <= 1")

    @property
    def effective_eta(self):
        return {"monitored": 1.0, "nojump": 1.0, "dephasing": 0.0, "unitary": 0.0}.get(self.variant, self.eta)

    @property
    def stochastic(self):
        return self.variant in ("monitored", "efficiency") and self.gamma > 0 and self.effective_eta > 0


@dataclass(frozen=True)
class AveragingSpec:
    n_disorder: int = 1
    n_trajectories: int = 1
    mode: str = "quenched"
    measure: str = "ostensible"
    noise_average: str = "analytic"
    noise_sharing: str = "independent"
    keep_trajectories: int = 0

    def __post_init__(self):
        if self.n_disorder < 1 or self.n_trajectories < 1:
            raise ValidationError("ensemble counts must be >= 1")
        if self.mode not in MODES:
            raise ValidationError(f"unknown averaging mode {self.mode!r}")
        if self.measure not in ("ostensible", "physical"):
            raise ValidationError(f"unknown noise measure {self.measure!r}")
        if self.noise_average not in ("analytic", "sampled"):
            raise ValidationError(f"unknown noise average {self.noise_average!r}")
        if self.noise_sharing not in ("independent", "crossed"):
            raise ValidationError(f"unknown noise sharing {self.noise_sharing!r}")


@dataclass
class SffCurve:
    grid: TimeGrid
    values: np.ndarray
    stderr: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)
    trajectories: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.points.shape:
            raise ValidationError("curve values must align with the grid")
        if self.stderr is None:
            self.stderr = np.zeros_like(self.values)

    @property
    def t(self):
        return self.grid.points


def trajectory_record(spectrum, params: SffParams, grid: TimeGrid, stream, measure="ostensible"):
    """One record path W_t on ``grid`` under the requested measure."""
    if measure == "physical":
        rho0 = coherent_gibbs(spectrum, params.beta)
        return sample_physical_record(rho0, params.gamma, params.effective_eta, grid, stream).values
    return sample_wiener_path(grid, stream).values


def _trajectory_arrays(e, params: SffParams, t, w):
    """(F, log N, log D) along one trajectory."""
    eta = params.effective_eta
    if params.variant == "unitary" or params.gamma == 0:
        f = np.atleast_1d(sff_unitary(e, params.beta, t))
        lz = logsumexp(-params.beta * e)
        return f, np.log(f) + 2 * lz, np.full(t.shape, 2 * lz)
    if params.variant == "nojump":
        w = np.zeros_like(t)
    if eta == 1.0:
        ln = _log_numerator_monitored(e, params.beta, params.gamma, t, w)
    else:
        ln = _efficiency_log_numerator(e, params.beta, params.gamma, eta, t, w, params.method)
    ld = _log_denominator(e, params.beta, params.gamma, eta, t, w)
    return np.exp(ln - ld), ln, ld


@dataclass
class _Item:
    """Per-disorder accumulators; merged in index order."""

    index: int
    sum_f: np.ndarray
    sum_f2: np.ndarray
    log_sum_n: np.ndarray
    log_sum_d: np.ndarray
    log_z2: float
    dephasing: np.ndarray
    count: int
    kept: np.ndarray
    stream_keys: list


def _disorder_item(args):
    source, params, grid_points, avg, master_seed, i = args
    grid = TimeGrid(grid_points)
    spec = source.realization(i)
    e = spec.energies
    t = grid.points
    n_traj = avg.n_trajectories if params.stochastic else 1
    sum_f = np.zeros(t.size)
    sum_f2 = np.zeros(t.size)
    lns, lds, kept, keys = [], [], [], []
    for j in range(n_traj):
        if params.stochastic:
            idx = (j,) if avg.noise_sharing == "crossed" else (i, j)
            stream = derive_stream(master_seed, "trajectory", *idx)
            keys.append(stream.key.to_json())
            w = trajectory_record(e, params, grid, stream, avg.measure)
        else:
            w = np.zeros(t.size)
        f, ln, ld = _trajectory_arrays(e, params, t, w)
        sum_f += f
        sum_f2 += f * f
        lns.append(ln)
        lds.append(ld)
        if j < avg.keep_trajectories:
            kept.append(f)
    scale = avg.n_trajectories / n_traj
    lz = logsumexp(-params.beta * e)
    if params.variant == "unitary" or params.gamma == 0:
        deph = np.atleast_1d(sff_unitary(e, params.beta, t))
    else:
        deph = np.atleast_1d(sff_dephasing(e, params.beta, params.gamma, t, params.method))
    return _Item(i, sum_f, sum_f2, logsumexp(np.array(lns), axis=0) + math.log(scale),
                 logsumexp(np.array(lds), axis=0) + math.log(scale), 2 * lz, deph, n_traj,
                 np.array(kept).reshape(-1, t.size), keys)


@dataclass
class EnsembleResult:
    grid: TimeGrid
    params: SffParams
    avg: AveragingSpec
    items: list
    master_seed: int
    source: object = None

    @property
    def n_samples(self):
        return self.avg.n_disorder * self.avg.n_trajectories

    def provenance(self, mode):
        p = {"variant": self.params.variant, "beta": self.params.beta, "gamma": self.params.gamma,
             "eta": self.params.effective_eta, "mode": mode, "measure": self.avg.measure,
             "noise_average": self.avg.noise_average, "n_disorder": self.avg.n_disorder,
             "n_trajectories": self.avg.n_trajectories, "master_seed": self.master_seed}
        if self.source is not None:
            p["source"] = {"type": type(self.source).__name__,
                           **{k: v for k, v in asdict(self.source).items() if k != "spectra"}}
        return p

    def quenched(self) -> SffCurve:
        # per-disorder means first; deterministic items carry a single copy
        n = self.n_samples
        s1 = np.zeros(len(self.grid))
        s2 = np.zeros(len(self.grid))
        for it in self.items:
            s1 += it.sum_f / it.count
            s2 += it.sum_f2 / it.count
        mean = s1 / len(self.items)
        var = np.maximum(s2 / len(self.items) - mean**2, 0.0) * n / max(n - 1, 1)
        kept = [it.kept for it in self.items if it.kept.size]
        traj = np.concatenate(kept) if kept else None
        return SffCurve(self.grid, mean, np.sqrt(var / n), self.provenance("quenched"), traj)

    def _per_h_annealed(self, it):
        if self.avg.noise_average == "analytic":
            return it.dephasing
        return np.exp(it.log_sum_n - it.log_sum_d)

    def curve(self, mode="quenched") -> SffCurve:
        if mode == "quenched":
            return self.quenched()
        if mode == "annealed_noise_fixed_H":
            return SffCurve(self.grid, self._per_h_annealed(self.items[0]), None, self.provenance(mode))
        if mode == "annealed_noise_then_disorder":
            vals = np.array([self._per_h_annealed(it) for it in self.items])
            n = len(self.items)
            err = vals.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else None
            acc = np.zeros(len(self.grid))
            for v in vals:
                acc += v
            return SffCurve(self.grid, acc / n, err, self.provenance(mode))
        if mode == "annealed_both":
            if self.avg.noise_average == "analytic":
                ln = logsumexp(np.array([it.log_z2 + np.log(it.dephasing) for it in self.items]), axis=0)
                ld = logsumexp(np.array([it.log_z2 for it in self.items]))
            else:
                ln = logsumexp(np.array([it.log_sum_n for it in self.items]), axis=0)
                ld = logsumexp(np.array([it.log_sum_d for it in self.items]), axis=0)
            return SffCurve(self.grid, np.exp(ln - ld), None, self.provenance(mode))
        raise ValidationError(f"unknown averaging mode {mode!r}")

    def stream_keys(self):
        return [k for it in self.items for k in it.stream_keys]


def ensemble_average(source, params: SffParams, grid: TimeGrid, avg: AveragingSpec,
                     master_seed: int = 0, workers: int = 1) -> EnsembleResult:
    """Run every (disorder, trajectory) work item and keep mergeable accumulators.

    Work items are independent and keyed by index; results are merged in index
    order, so the output does not depend on ``workers``.
    """
    jobs = [(source, params, np.asarray(grid.points), avg, master_seed, i) for i in range(avg.n_disorder)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            items = list(pool.map(_disorder_item, jobs))
    else:
        items = [_disorder_item(j) for j in jobs]
    items.sort(key=lambda it: it.index)
    return EnsembleResult(grid, params, avg, items, master_seed, source)


def average_sff(source, params: SffParams, grid: TimeGrid, avg: AveragingSpec,
                master_seed: int = 0, workers: int = 1) -> SffCurve:
    return ensemble_average(source, params, grid, avg, master_seed, workers).curve(avg.mode)


def annealed_relative_error(quenched: SffCurve, annealed: SffCurve, window: int | None = 100) -> SffCurve:
    """|annealed - quenched| / quenched, optionally moving-averaged."""
    if not np.array_equal(quenched.grid.points, annealed.grid.points):
        raise ValidationError("curves must share a grid")
    err = np.abs(annealed.values - quenched.values) / quenched.values
    if window:
        err = moving_average(err, min(window, err.size))
    prov = {"kind": "annealed_relative_error", "window": window,
            "quenched": quenched.provenance, "annealed": annealed.provenance}
    return SffCurve(quenched.grid, err, None, prov)


# --- curve files ------------------------------------------------------------

def write_curve_csv(curve: SffCurve, path) -> None:
    """CSV with ``# key: json`` metadata comments, then columns t, value, stderr."""
    with open(path, "w", newline="") as fh:
        for k in sorted(curve.provenance):
            fh.write(f"# {k}: {json.dumps(curve.provenance[k], sort_keys=True)}\n")
        fh.write("t,value,stderr\n")
        for t, v, s in zip(curve.t, curve.values, curve.stderr):
            fh.write(f"{float(t)!r},{float(v)!r},{float(s)!r}\n")


def read_curve_csv(path) -> SffCurve:
    prov, rows = {}, []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                try:
                    prov[key.strip()] = json.loads(val)
                except json.JSONDecodeError as exc:
                    raise ValidationError(f"{path}:{lineno}: bad metadata value: {exc.msg}") from None
                continue
            if line.startswith("t,"):
                continue
            try:
                rows.append([float(x) for x in line.split(",")])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: expected three numbers") from None
            if len(rows[-1]) != 3:
                raise ValidationError(f"{path}:{lineno}: expected three columns")
    arr = np.array(rows)
    return SffCurve(TimeGrid(arr[:, 0]), arr[:, 1], arr[:, 2], prov)


def curve_manifest(curve: SffCurve) -> dict:
    return {"provenance": curve.provenance, "points": len(curve.t),
            "t_min": float(curve.t[0]), "t_max": float(curve.t[-1])}
