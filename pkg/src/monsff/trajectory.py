"""Monitored-state evolution in the energy eigenbasis.

Everything is expressed through the spectrum {E_n}; the Hamiltonian matrix is
never needed after diagonalization.  A trajectory is labelled by the
measurement record ``w = W_t``.  The closed form

    rho_nm(t) ~ rho_nm(0) exp[-i E_- t - g t E_-^2 - g eta t E_+^2 + sqrt(2 g eta) E_+ w]

(E_+- = E_n +- E_m) is the trace-normalized solution of the *linear* SME driven
by that record.  The nonlinear SME is driven by the innovation
``dW~ = dW - sqrt(8 g eta) <H> dt``; :func:`integrate_sme` can consume a path in
either role.

Two noise measures appear downstream:

* ``ostensible``: the record is a standard Wiener process.  Inserting
  W_t ~ N(0, t) into the closed form is this measure.
* ``physical``: the record law of the actual monitored system, whose density
  with respect to Wiener measure is Tr rho_hat(t).  It is a mixture over
  eigenstates n (Born weight rho_nn(0)) of Brownian motion with drift
  ``sqrt(8 g eta) E_n`` -- see :func:`sample_physical_record`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._numerics import log_abs_sum, logsumexp, softmax
from .errors import StepSizeError, ValidationError
from .noise import NoiseStream, TimeGrid, WienerPath, sample_wiener_path
from .spectrum import SpectrumRealization

log = logging.getLogger(__name__)

STABILITY_GUARD = 0.1


def _energies(spectrum) -> np.ndarray:
    if isinstance(spectrum, SpectrumRealization):
        return spectrum.energies
    return np.asarray(spectrum, dtype=float)


def _check_rates(gamma, eta=1.0):
    if not np.all(np.asarray(gamma) >= 0):
        raise ValidationError("gamma must be non-negative")
    if not np.all((np.asarray(eta) >= 0) & (np.asarray(eta) <= 1)):
        raise ValidationError("eta must lie in [0, 1]")


@dataclass(frozen=True)
class ScaledValue:
    """``mantissa * exp(exponent)``, for quantities that overflow binary64."""

    mantissa: np.ndarray
    exponent: np.ndarray

    @property
    def log(self):
        return np.log(self.mantissa) + self.exponent

    @property
    def value(self):
        with np.errstate(over="ignore"):
            return self.mantissa * np.exp(self.exponent)


def dephased_partition_function(spectrum, x, gamma, t) -> ScaledValue:
    """sum_n exp(-x E_n - 4 gamma t E_n^2), broadcast over x, gamma, t."""
    e = _energies(spectrum)
    x, gamma, t = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, gamma, t)))
    _check_rates(gamma)
    if np.any(t < 0):
        raise ValidationError("t must be non-negative")
    expo = -x[..., None] * e - 4.0 * (gamma * t)[..., None] * e**2
    shift = np.max(expo, axis=-1)
    return ScaledValue(np.sum(np.exp(expo - shift[..., None]), axis=-1), shift)


def log_partition(spectrum, beta) -> float:
    return float(logsumexp(-beta * _energies(spectrum)))


@dataclass(frozen=True)
class CoherentGibbsState:
    """|psi_beta> = sum_n e^{-beta E_n / 2} / sqrt(Z) |n>."""

    energies: np.ndarray
    beta: float

    def __post_init__(self):
        if self.beta < 0:
            raise ValidationError("beta must be non-negative")
        e = np.asarray(_energies(self.energies), dtype=float)
        object.__setattr__(self, "energies", e)

    @property
    def log_z(self) -> float:
        return float(logsumexp(-self.beta * self.energies))

    @property
    def log_amplitudes(self) -> np.ndarray:
        return -0.5 * self.beta * self.energies - 0.5 * self.log_z

    @property
    def amplitudes(self) -> np.ndarray:
        return np.exp(self.log_amplitudes)

    @property
    def populations(self) -> np.ndarray:
        return softmax(-self.beta * self.energies)

    def density(self) -> np.ndarray:
        c = self.amplitudes
        return np.outer(c, c).astype(complex)

    @property
    def dim(self) -> int:
        return self.energies.size


def coherent_gibbs(spectrum, beta: float) -> CoherentGibbsState:
    return CoherentGibbsState(_energies(spectrum), float(beta))


@dataclass
class MonitoredState:
    energies: np.ndarray
    t: float
    gamma: float
    eta: float
    w: float | None
    rho: np.ndarray | None = None
    amplitudes: np.ndarray | None = field(default=None, repr=False)

    def density(self) -> np.ndarray:
        if self.rho is not None:
            return self.rho
        a = self.amplitudes
        return np.outer(a, a.conj())

    @property
    def populations(self) -> np.ndarray:
        if self.rho is not None:
            return np.real(np.diagonal(self.rho))
        return np.abs(self.amplitudes) ** 2

    @property
    def trace(self) -> float:
        return float(np.sum(self.populations))

    @property
    def purity(self) -> float:
        if self.rho is None:
            return float(np.sum(np.abs(self.amplitudes) ** 2) ** 2)
        return float(np.real(np.vdot(self.rho, self.rho)))

    def fidelity(self, psi0: CoherentGibbsState) -> float:
        """<psi_0|rho|psi_0>, the spectral form factor of this state."""
        c = psi0.amplitudes
        if self.rho is None:
            return float(abs(np.dot(c, self.amplitudes)) ** 2)
        return float(np.real(c @ self.rho @ c))

    def check(self, tol_trace=1e-10, tol_psd=1e-8) -> None:
        if abs(self.trace - 1.0) > tol_trace:
            raise ValidationError(f"trace {self.trace!r} deviates from 1")
        rho = self.density()
        if np.max(np.abs(rho - rho.conj().T)) > 1e-12:
            raise ValidationError("state is not Hermitian")
        if rho.shape[0] <= 256 and np.linalg.eigvalsh(rho)[0] < -tol_psd:
            raise ValidationError("state is not positive semidefinite")


def _record_exponents(e, log_c, gamma, eta, t, w):
    """Log-weights of the diagonal: 2 log c_n - 4 g eta t E^2 + 2 sqrt(2 g eta) E w."""
    t = np.asarray(t, dtype=float)[..., None]
    w = np.asarray(w, dtype=float)[..., None]
    return 2 * log_c - 4.0 * gamma * eta * t * e**2 + 2.0 * math.sqrt(2.0 * gamma * eta) * e * w


def evolve_closed_form(rho0: CoherentGibbsState, gamma: float, eta: float, t: float, w: float,
                       dense: bool | None = None) -> MonitoredState:
    _check_rates(gamma, eta)
    if t < 0:
        raise ValidationError("t must be non-negative")
    e, log_c = rho0.energies, rho0.log_amplitudes
    if dense is None:
        dense = eta != 1.0
    if not dense:
        if eta != 1.0:
            raise ValidationError("amplitude representation needs eta = 1")
        la = log_c - 2.0 * gamma * t * e**2 + math.sqrt(2.0 * gamma) * e * w
        la = la - 0.5 * logsumexp(2 * la)
        amps = np.exp(la) * np.exp(-1j * e * t)
        return MonitoredState(e, t, gamma, eta, w, amplitudes=amps)
    ep = e[:, None] + e[None, :]
    em = e[:, None] - e[None, :]
    log_mag = (log_c[:, None] + log_c[None, :] - gamma * t * em**2 - gamma * eta * t * ep**2
               + math.sqrt(2.0 * gamma * eta) * ep * w)
    log_norm = logsumexp(_record_exponents(e, log_c, gamma, eta, t, w))
    rho = np.exp(log_mag - log_norm) * np.exp(-1j * em * t)
    return MonitoredState(e, t, gamma, eta, w, rho=rho)


def populations(rho0: CoherentGibbsState, gamma, eta, t, w) -> np.ndarray:
    """rho_nn(t) for broadcastable arrays t, w; trailing axis indexes levels."""
    _check_rates(gamma, eta)
    return softmax(_record_exponents(rho0.energies, rho0.log_amplitudes, gamma, eta, t, w))


def energy_moments(rho0: CoherentGibbsState, gamma, eta, t, w):
    """(mu, V, kappa3) of the conditional energy distribution."""
    p = populations(rho0, gamma, eta, t, w)
    e = rho0.energies
    mu = p @ e
    d = e - mu[..., None]
    var = np.sum(p * d**2, axis=-1)
    k3 = np.sum(p * d**3, axis=-1)
    return mu, var, k3


def mean_energy(rho0, gamma, eta, t, w):
    p = populations(rho0, gamma, eta, t, w)
    return p @ rho0.energies


def energy_variance(rho0, gamma, eta, t, w):
    p = populations(rho0, gamma, eta, t, w)
    e = rho0.energies
    var = p @ e**2 - (p @ e) ** 2
    worst = np.min(var)
    if worst < -1e-10:
        log.warning("energy variance rounding error %.3g clamped to 0", worst)
    return np.maximum(var, 0.0)


def purity(rho0: CoherentGibbsState, gamma, eta, t, w):
    """Tr rho(t)^2 from the closed-form double sum, O(d^2) per point."""
    _check_rates(gamma, eta)
    e, log_c = rho0.energies, rho0.log_amplitudes
    t_arr, w_arr = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(w, dtype=float))
    ep = (e[:, None] + e[None, :]).ravel()
    em2 = ((e[:, None] - e[None, :]) ** 2).ravel()
    lc2 = (2 * (log_c[:, None] + log_c[None, :])).ravel()
    s = math.sqrt(2.0 * gamma * eta)
    out = np.empty(t_arr.shape)
    for idx in np.ndindex(t_arr.shape):
        tt, ww = t_arr[idx], w_arr[idx]
        num = logsumexp(lc2 - 2 * gamma * tt * em2 - 2 * gamma * eta * tt * ep**2 + 2 * s * ep * ww)
        den = logsumexp(_record_exponents(e, log_c, gamma, eta, tt, ww))
        out[idx] = math.exp(num - 2 * den)
    return out if out.ndim else float(out)


# --- stochastic integration -----------------------------------------------

def max_stable_dt(energies, gamma, guard=STABILITY_GUARD) -> float:
    return guard / (np.max(np.abs(energies)) ** 2 * max(1.0, gamma))


def check_step(energies, gamma, dt, guard=STABILITY_GUARD):
    need = max_stable_dt(energies, gamma, guard)
    if dt > need * (1 + 1e-12):
        raise StepSizeError(dt, need)


def em_batch(rho0: CoherentGibbsState, gamma: float, eta: float, dt: float, dw: np.ndarray,
             form: str = "nonlinear", noise: str | None = None, representation: str | None = None,
             save_every: int = 1, guard: float = STABILITY_GUARD, state0: np.ndarray | None = None):
    """Euler-Maruyama over a batch of paths.

    ``dw`` has shape ``(batch, n_steps)``.  ``noise`` says whether the
    increments are the measurement record (``"record"``) or the innovation
    (``"innovation"``); the linear form only accepts records.  Yields
    ``(step_index, state)`` every ``save_every`` steps (and at step 0), where
    ``state`` is ``(batch, d)`` amplitudes or ``(batch, d, d)`` densities.
    ``state0`` continues from such a batch instead of ``rho0``.
    """
    _check_rates(gamma, eta)
    if form not in ("nonlinear", "linear_normalized"):
        raise ValidationError(f"unknown SME form {form!r}")
    if noise is None:
        noise = "record" if form == "linear_normalized" else "innovation"
    if noise not in ("record", "innovation"):
        raise ValidationError(f"unknown noise role {noise!r}")
    if form == "linear_normalized" and noise != "record":
        raise ValidationError("the linear SME is driven by the measurement record")
    if representation is None:
        representation = "amplitudes" if eta == 1.0 else "dense"
    if representation == "amplitudes" and eta != 1.0:
        raise ValidationError("amplitude representation needs eta = 1")
    check_step(rho0.energies, gamma, dt, guard)

    e = rho0.energies
    dw = np.atleast_2d(np.asarray(dw, dtype=float))
    batch, n_steps = dw.shape
    s = math.sqrt(2.0 * gamma * eta)
    drift_shift = math.sqrt(8.0 * gamma * eta) * dt

    if representation == "amplitudes":
        psi = np.tile(rho0.amplitudes.astype(complex), (batch, 1)) if state0 is None else state0
        p = np.abs(psi) ** 2
        # every step multiplies psi_n by a factor r_n - i E_n dt with real r_n;
        # populations are updated in real arithmetic from |factor|^2
        edt = e * dt
        edt2 = edt**2
        yield 0, psi
        for k in range(n_steps):
            inc = dw[:, k][:, None]
            if form == "linear_normalized":
                r = 1.0 - gamma * dt * e**2 + s * e * inc
            else:
                mu = (p @ e)[:, None]
                if noise == "record":
                    inc = inc - drift_shift * mu
                de = e - mu
                r = 1.0 - gamma * dt * de * de + s * de * inc
            q = p * (r * r + edt2)
            norm = np.sum(q, axis=1, keepdims=True)
            p = q / norm
            psi = psi * ((r - 1j * edt) / np.sqrt(norm))
            if (k + 1) % save_every == 0:
                yield k + 1, psi
        return

    rho = np.tile(rho0.density(), (batch, 1, 1)) if state0 is None else state0
    em = e[:, None] - e[None, :]
    ep = e[:, None] + e[None, :]
    lin = (-1j * em - gamma * em**2) * dt
    yield 0, rho
    for k in range(n_steps):
        inc = dw[:, k][:, None, None]
        if form == "linear_normalized":
            rho = rho + rho * (lin + s * ep * inc)
            tr = np.real(np.einsum("bnn->b", rho))
            rho = rho / tr[:, None, None]
        else:
            mu = np.real(np.einsum("bnn,n->b", rho, e))[:, None, None]
            if noise == "record":
                inc = inc - drift_shift * mu
            rho = rho + rho * (lin + s * (ep - 2 * mu) * inc)
        if (k + 1) % save_every == 0:
            yield k + 1, rho


def integrate_sme(rho0: CoherentGibbsState, gamma: float, eta: float, grid: TimeGrid,
                  path: WienerPath, form: str = "nonlinear", noise: str | None = None,
                  representation: str | None = None, guard: float = STABILITY_GUARD):
    """Euler-Maruyama along one path on a uniform grid; one state per grid point."""
    if grid.spacing != "uniform":
        raise ValidationError("SDE integration needs a uniform grid")
    if not np.array_equal(path.grid.points, grid.points):
        raise ValidationError("path must be defined on the integration grid")
    dt = grid.dt
    states = []
    for k, st in em_batch(rho0, gamma, eta, dt, path.increments[None, :], form, noise,
                          representation, 1, guard):
        t = float(grid.points[k])
        w = float(path.values[k])
        if st.ndim == 2:
            states.append(MonitoredState(rho0.energies, t, gamma, eta, w, amplitudes=st[0].copy()))
        else:
            states.append(MonitoredState(rho0.energies, t, gamma, eta, w, rho=st[0].copy()))
    return states


def sample_physical_record(rho0: CoherentGibbsState, gamma: float, eta: float, grid: TimeGrid,
                           stream: NoiseStream, size: int | None = None):
    """Measurement records drawn from the law of the monitored system.

    The record density relative to Wiener measure is
    sum_n p_n exp(2 sqrt(2 g eta) E_n W - 4 g eta E_n^2 t): a Born-weighted
    mixture of Brownian motions with drift sqrt(8 g eta) E_n.
    """
    n = 1 if size is None else size
    labels = stream.choice(rho0.dim, p=rho0.populations, size=n)
    bm = sample_wiener_path(grid, stream, size=n)
    rec = bm + math.sqrt(8.0 * gamma * eta) * rho0.energies[labels][:, None] * grid.points[None, :]
    if size is None:
        return WienerPath(grid, rec[0], stream.key)
    return rec


@dataclass
class CollapseResult:
    counts: np.ndarray
    frequencies: np.ndarray
    born_weights: np.ndarray
    t_final: float
    unconverged: int


def collapse_statistics(rho0: CoherentGibbsState, gamma: float, grid: TimeGrid, n_paths: int,
                        stream: NoiseStream, threshold: float = 1e-6, chunk: int = 10000,
                        block: int = 1000):
    """Run eta=1 nonlinear trajectories (innovation noise) and tally the
    eigenstate each one localizes on, argmax_n rho_nn at the final time."""
    if grid.spacing != "uniform":
        raise ValidationError("collapse statistics need a uniform grid")
    e = rho0.energies
    var0 = float(rho0.populations @ e**2 - (rho0.populations @ e) ** 2)
    counts = np.zeros(rho0.dim, dtype=np.int64)
    unconverged = 0
    done = 0
    while done < n_paths:
        b = min(chunk, n_paths - done)
        psi = None
        left = len(grid) - 1
        while left > 0:
            k = min(block, left)
            dw = stream.normal((b, k)) * math.sqrt(grid.dt)
            for _, psi in em_batch(rho0, gamma, 1.0, grid.dt, dw, "nonlinear", "innovation",
                                   "amplitudes", save_every=k, state0=psi):
                pass
            left -= k
        p = np.abs(psi) ** 2
        v = p @ e**2 - (p @ e) ** 2
        unconverged += int(np.sum(v > threshold * max(var0, 1e-300)))
        counts += np.bincount(np.argmax(p, axis=1), minlength=rho0.dim)
        done += b
    return CollapseResult(counts, counts / n_paths, rho0.populations, float(grid.points[-1]), unconverged)
