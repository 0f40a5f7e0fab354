"""Ramp features, large-N predictions and the diagonal/disconnected/connected split."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ._numerics import logsumexp, moving_average
from .errors import FeatureNotFound, ValidationError
from .sff import AveragingSpec, SffCurve, SffParams, average_sff
from .trajectory import _energies

TIE_RTOL = 1e-12


# --- curve features ---------------------------------------------------------

def smooth_curve(curve: SffCurve, window: int) -> SffCurve:
    """Centered moving average in index space (log time on a log grid)."""
    if window < 1 or window > len(curve.values):
        raise ValidationError(f"window must be in [1, {len(curve.values)}], got {window}")
    prov = dict(curve.provenance, smoothing_window=window)
    err = moving_average(curve.stderr, window) if curve.stderr is not None else None
    return SffCurve(curve.grid, moving_average(curve.values, window), err, prov)


def _dip_index(v: np.ndarray) -> int:
    below = np.flatnonzero(v[1:] < 0.5) + 1
    if below.size == 0:
        raise FeatureNotFound("curve never decays below 0.5")
    start = below[0]
    tail = v[start:]
    vmin = np.min(tail)
    # earliest point within rounding of the global minimum
    k = start + int(np.flatnonzero(tail <= vmin + TIE_RTOL * max(abs(vmin), np.max(np.abs(v))))[0])
    if k == v.size - 1:
        raise FeatureNotFound("no interior minimum: curve is still decaying at the last grid point")
    return k


def extract_dip_time(curve: SffCurve, window: int = 1) -> tuple[float, float]:
    v = smooth_curve(curve, window).values
    k = _dip_index(v)
    return float(curve.t[k]), float(v[k])


def extract_plateau_time(curve: SffCurve, plateau_value: float | None = None, tol: float = 0.2,
                         sustain: int = 10, window: int = 1) -> float:
    """First time after the dip from which the smoothed curve stays within
    ``tol * plateau_value`` of ``plateau_value`` for ``sustain`` points."""
    v = smooth_curve(curve, window).values
    if plateau_value is None:
        plateau_value = final_decade_mean(curve, window)
    if not plateau_value > 0:
        raise ValidationError("plateau_value must be positive")
    if sustain < 1:
        raise ValidationError("sustain must be >= 1")
    k_dip = _dip_index(v)
    inside = np.abs(v - plateau_value) <= tol * plateau_value
    run = 0
    for k in range(k_dip + 1, v.size):
        run = run + 1 if inside[k] else 0
        if run == sustain:
            return float(curve.t[k - sustain + 1])
    raise FeatureNotFound(f"curve never stays within {tol:g} of the plateau for {sustain} points")


def final_decade_mean(curve: SffCurve, window: int = 1) -> float:
    """Mean of the smoothed curve over its last decade of time (or the last
    tenth of the points on a non-log grid spanning less than a decade)."""
    v = smooth_curve(curve, window).values
    t = curve.t
    sel = t >= t[-1] / 10.0
    if t[0] > 0 and t[-1] / t[0] < 10 or np.count_nonzero(sel) < 2:
        sel = np.arange(v.size) >= int(0.9 * v.size)
    return float(np.mean(v[sel]))


@dataclass
class RampFeatures:
    parameter: str
    value: float
    t_dip: float
    t_plateau: float
    ratio: float
    plateau_value: float
    dip_value: float = math.nan
    n_traj: int = 0
    n_disorder: int = 0
    seed: int = 0
    note: str = ""


def ramp_features(curve: SffCurve, window: int = 1, plateau_value: float | None = None,
                  tol: float = 0.2, sustain: int = 10, parameter: str = "", value: float = math.nan,
                  ) -> RampFeatures:
    p = plateau_value if plateau_value is not None else final_decade_mean(curve, window)
    t_dip, v_dip = extract_dip_time(curve, window)
    t_p = extract_plateau_time(curve, p, tol, sustain, window)
    prov = curve.provenance
    return RampFeatures(parameter, value, t_dip, t_p, t_dip / t_p, p, v_dip,
                        int(prov.get("n_trajectories", 0)), int(prov.get("n_disorder", 0)),
                        int(prov.get("master_seed", 0)))


FEATURE_COLUMNS = ("parameter", "value", "t_dip", "t_plateau", "ratio", "plateau_value",
                   "n_traj", "n_disorder", "seed", "note")


def write_feature_table(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FEATURE_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in FEATURE_COLUMNS])


# --- large-N predictions ----------------------------------------------------

def plateau_prediction(beta: float, n_majorana: int, dim: int) -> float:
    return 2.0 / dim * math.exp(-n_majorana * beta**2 / 8.0)


def ensemble_partition_prediction(x, gamma, t, n_majorana, dim, dephased=True):
    """Disorder-averaged Z(x) (``dephased=False``) or Z(x, gamma) for the
    Gaussian large-N density of states."""
    x = np.asarray(x, dtype=float)
    n = n_majorana
    if not dephased:
        out = dim * np.exp(n * x**2 / 8.0)
    else:
        gt = np.asarray(gamma * t, dtype=float)
        out = dim / np.sqrt(1.0 + 2.0 * n * gt) * np.exp(n * x**2 / (8.0 + 16.0 * n * gt))
    return float(out) if out.ndim == 0 else out


def sff_disconnected_prediction(t, w, beta, gamma, n_majorana):
    """Ratio of Gaussian integrals for the factorized part, evaluated in logs."""
    t, w = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(w, dtype=float))
    n = n_majorana
    a = beta + 1j * t - math.sqrt(2.0 * gamma) * w
    # |exp(z)|^2 = exp(2 Re z)
    log_num = 2.0 * np.real(n * a**2 / (8.0 + 8.0 * gamma * n * t)) - np.log1p(gamma * n * t)
    log_den = (-0.5 * np.log1p(2.0 * gamma * n * t) + n * beta**2 / 8.0
               + n * (beta - math.sqrt(8.0 * gamma) * w) ** 2 / (8.0 + 16.0 * n * gamma * t))
    out = np.exp(log_num - log_den)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Prediction:
    value: float
    valid: bool


def sff_connected_prediction(t, w, beta, gamma, n_majorana, dim) -> Prediction:
    """Linear-ramp estimate; ``valid`` is False outside strong dissipation and
    late times (gamma > 1 and t > d / sqrt(N))."""
    n = n_majorana
    if t <= 0 or gamma <= 0:
        raise ValidationError("need t > 0 and gamma > 0")
    expo = (beta**2 / (4.0 * t * gamma) - beta * w / math.sqrt(2.0 * t * gamma)
            + w**2 / (4.0 * n * gamma * t**2) - n * beta**2 / 8.0)
    val = math.sqrt(n / (8.0 * math.pi)) * t / (2.0 * dim**2) * math.exp(expo)
    return Prediction(val, gamma > 1.0 and t > dim / math.sqrt(n))


def lambert_w(x: float, tol: float = 1e-15, max_iter: int = 100) -> float:
    """Principal branch W0 on [-1/e, inf) by Halley iteration."""
    x = float(x)
    branch = -1.0 / math.e
    if not x >= branch - 1e-15:
        raise ValidationError("lambert_w needs x >= -1/e")
    if x == 0.0:
        return 0.0
    if x <= branch:
        return -1.0
    # starting points: branch-point series, then log asymptotics
    if x < -0.25:
        p = math.sqrt(2.0 * (math.e * x + 1.0))
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p**3
    elif x < 3.0:
        w = math.log1p(x) * 0.8
    else:
        lx = math.log(x)
        w = lx - math.log(lx)
    for _ in range(max_iter):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        if wp1 == 0.0:
            break
        step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w -= step
        if abs(step) <= tol * (1.0 + abs(w)):
            break
    return w


def dip_time_lambert(gamma: float, dim: int, n_majorana: int, n: float | None = None) -> float:
    """Strong-measurement dip time 6g W(u / (6g)), u = (8 d^2 sqrt(2 pi) / (n sqrt g))^(2/3).

    ``n`` defaults to the Majorana number.
    """
    if gamma <= 0:
        raise ValidationError("gamma must be positive")
    n = n_majorana if n is None else n
    u = (8.0 * dim**2 * math.sqrt(2.0 * math.pi) / (n * math.sqrt(gamma))) ** (2.0 / 3.0)
    return 6.0 * gamma * lambert_w(u / (6.0 * gamma))


# --- decomposition ----------------------------------------------------------

@dataclass
class SffDecomposition:
    t: np.ndarray
    full: np.ndarray
    diag: np.ndarray
    disc: np.ndarray
    conn: np.ndarray
    bandwidth: float
    accounting: dict = field(default_factory=dict)

    @property
    def residual(self):
        return self.full - (self.diag + self.disc + self.conn)


def silverman_bandwidth(e: np.ndarray) -> float:
    iqr = np.subtract(*np.percentile(e, [75, 25]))
    spread = min(np.std(e, ddof=1), iqr / 1.34) if iqr > 0 else np.std(e, ddof=1)
    return 0.9 * spread * e.size ** (-0.2)


def _log_smoothed_amplitude(e, h, a, b):
    """log of sum_k int N(E; E_k, h^2) exp(a E + b E^2) dE for complex a, real b < 1/(2h^2)."""
    q = 1.0 / (2 * h * h) - b
    terms = (-0.5 * np.log(2 * math.pi * h * h) + 0.5 * np.log(math.pi / q)
             - e**2 / (2 * h * h) + (e / (h * h) + a) ** 2 / (4 * q))
    m = np.max(terms.real)
    return m + np.log(np.sum(np.exp(terms - m)))


def decompose_sff(spectrum, beta, gamma, t, w, bandwidth: float | None = None) -> SffDecomposition:
    """Split the monitored SFF into n = m terms, the factorized part built from a
    Gaussian-smoothed density of the given levels, and the remainder."""
    e = _energies(spectrum)
    t, w = np.broadcast_arrays(np.atleast_1d(np.asarray(t, dtype=float)),
                               np.atleast_1d(np.asarray(w, dtype=float)))
    h = silverman_bandwidth(e) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValidationError("bandwidth must be positive")
    s = math.sqrt(2.0 * gamma)
    lz = logsumexp(-beta * e)
    full = np.empty(t.shape)
    diag = np.empty(t.shape)
    disc = np.empty(t.shape)
    for i, (tt, ww) in enumerate(zip(t, w)):
        la_re = -(beta - s * ww) * e - 2 * gamma * tt * e**2
        log_d = lz + logsumexp(-beta * e - 4 * gamma * tt * e**2 + 2 * s * ww * e)
        amp = np.sum(np.exp(la_re - np.max(la_re)) * np.exp(-1j * tt * e))
        full[i] = abs(amp) ** 2 * math.exp(2 * np.max(la_re) - log_d)
        diag[i] = math.exp(logsumexp(2 * la_re) - log_d)
        ls = _log_smoothed_amplitude(e, h, -(beta + 1j * tt) + s * ww, -2 * gamma * tt)
        disc[i] = math.exp(2 * ls.real - log_d)
    conn = full - diag - disc
    acc = {"bandwidth": h, "kernel": "gaussian", "dos_norm": e.size,
           "max_abs_residual": float(np.max(np.abs(full - (diag + disc + conn))))}
    return SffDecomposition(t, full, diag, disc, conn, h, acc)


# --- sweeps -----------------------------------------------------------------

@dataclass
class SweepProtocol:
    source: object
    params: SffParams
    grid: object
    avg: AveragingSpec
    master_seed: int = 0
    window: int = 1
    tol: float = 0.2
    sustain: int = 10
    workers: int = 1
    plateau_value: float | None = None


def sweep(parameter: str, values, protocol: SweepProtocol, curves: list | None = None) -> list[RampFeatures]:
    """Average and extract features for each value of gamma or eta.

    Values whose curve has no dip or plateau get NaN features and a note
    rather than aborting the sweep.  If ``curves`` is a list, the averaged
    curves are appended to it.
    """
    if parameter not in ("gamma", "eta"):
        raise ValidationError(f"can only sweep gamma or eta, not {parameter!r}")
    rows = []
    for v in values:
        params = replace(protocol.params, **{parameter: float(v)})
        curve = average_sff(protocol.source, params, protocol.grid, protocol.avg,
                            protocol.master_seed, protocol.workers)
        if curves is not None:
            curves.append(curve)
        try:
            rows.append(ramp_features(curve, protocol.window, protocol.plateau_value, protocol.tol,
                                      protocol.sustain, parameter, float(v)))
        except FeatureNotFound as exc:
            rows.append(RampFeatures(parameter, float(v), math.nan, math.nan, math.nan,
                                     math.nan, math.nan, protocol.avg.n_trajectories,
                                     protocol.avg.n_disorder, protocol.master_seed, str(exc)))
    return rows
