import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

import oracles
from monsff.errors import StepSizeError, ValidationError
from monsff.noise import TimeGrid, derive_stream, refine_path, sample_wiener_path
from monsff.sff import GueEnsemble
from monsff.spectrum import SpectrumRealization
from monsff.trajectory import (coherent_gibbs, collapse_statistics, dephased_partition_function, em_batch,
                               energy_moments, energy_variance, evolve_closed_form, integrate_sme,
                               max_stable_dt, mean_energy, populations, purity, sample_physical_record)

TWO = SpectrumRealization.from_energies([-1.0, 1.0])


def _random_spectrum(rng, d):
    return SpectrumRealization.from_energies(rng.normal(size=d))


def test_coherent_gibbs_normalized(rng):
    s = _random_spectrum(rng, 16)
    psi = coherent_gibbs(s, 0.7)
    assert abs(np.sum(np.abs(psi.amplitudes) ** 2) - 1) < 1e-12
    e = s.energies
    z = np.sum(np.exp(-0.7 * e))
    np.testing.assert_allclose(psi.density(), np.outer(np.exp(-0.35 * e), np.exp(-0.35 * e)) / z, rtol=1e-12)


def test_dephased_partition_two_level():
    for g, t in [(0.3, 1.0), (2.0, 0.25)]:
        z = dephased_partition_function(TWO, 0.0, g, t)
        assert z.value == pytest.approx(2 * math.exp(-4 * g * t), rel=1e-13)


def test_two_level_populations():
    g, t = 0.8, 1.3
    for w in (-1.2, 0.0, 0.7):
        rho = evolve_closed_form(coherent_gibbs(TWO, 0.0), g, 1.0, t, w, dense=True).density()
        a = 2 * math.sqrt(2 * g) * w
        # the E = -1 level is index 0
        assert rho[0, 0].real == pytest.approx(math.exp(-a) / (2 * math.cosh(a)), rel=1e-13)
        assert rho[1, 1].real == pytest.approx(math.exp(a) / (2 * math.cosh(a)), rel=1e-13)


def test_two_level_sign_agrees_with_sde():
    # a strongly positive record must favour the E = +1 level in both routes
    rho0 = coherent_gibbs(TWO, 0.0)
    g, dt, n = 0.5, 1e-3, 1000
    dw = np.full((1, n), 2e-3)
    for _, st_ in em_batch(rho0, g, 1.0, dt, dw, "linear_normalized", save_every=n):
        pass
    p_sde = np.abs(st_[0]) ** 2
    p_cf = populations(rho0, g, 1.0, n * dt, 2.0)
    assert p_sde[1] > 0.5 and p_cf[1] > 0.5
    np.testing.assert_allclose(p_sde, p_cf, atol=5e-3)


def test_two_level_dephasing_purity():
    rho0 = coherent_gibbs(TWO, 0.0)
    for g, t in [(0.1, 0.5), (1.0, 2.0), (3.0, 0.01)]:
        assert abs(purity(rho0, g, 0.0, t, 0.0) - (2 + 2 * math.exp(-8 * g * t)) / 4) < 1e-12


@given(st.integers(2, 24), st.floats(0, 2), st.floats(0, 5), st.floats(0, 1), st.floats(0, 20),
       st.floats(-5, 5), st.integers(0, 1000))
def test_closed_form_state_properties(d, beta, gamma, eta, t, w, seed):
    s = _random_spectrum(np.random.default_rng(seed), d)
    st_ = evolve_closed_form(coherent_gibbs(s, beta), gamma, eta, t, w, dense=True)
    st_.check()
    rho = st_.density()
    assert abs(np.trace(rho).real - 1) < 1e-10
    assert np.max(np.abs(rho - rho.conj().T)) < 1e-12
    assert np.min(np.linalg.eigvalsh(rho)) > -1e-8
    if eta == 1.0:
        assert np.linalg.norm(rho @ rho - rho) < 1e-8


@given(st.integers(2, 24), st.floats(0, 2), st.floats(0, 5), st.floats(0, 20), st.floats(-5, 5),
       st.integers(0, 1000))
def test_amplitude_and_dense_agree(d, beta, gamma, t, w, seed):
    s = _random_spectrum(np.random.default_rng(seed), d)
    psi = coherent_gibbs(s, beta)
    a = evolve_closed_form(psi, gamma, 1.0, t, w).density()
    b = evolve_closed_form(psi, gamma, 1.0, t, w, dense=True).density()
    assert np.max(np.abs(a - b)) < 1e-12
    assert abs(purity(psi, gamma, 1.0, t, w) - 1) < 1e-10


def test_purity_oracle(rng):
    for _ in range(20):
        d = rng.integers(2, 12)
        e = rng.normal(size=d)
        args = (rng.uniform(0, 1), rng.uniform(0, 2), rng.uniform(0, 1), rng.uniform(0, 5), rng.normal())
        got = purity(coherent_gibbs(SpectrumRealization.from_energies(e), args[0]), *args[1:])
        assert got == pytest.approx(oracles.purity(np.sort(e), *args), rel=1e-10)


def test_moments_consistent(rng):
    s = _random_spectrum(rng, 10)
    psi = coherent_gibbs(s, 0.3)
    t = np.array([0.0, 1.0, 4.0])
    w = np.array([0.0, -0.5, 1.5])
    mu, var, k3 = energy_moments(psi, 1.0, 1.0, t, w)
    np.testing.assert_allclose(mu, mean_energy(psi, 1.0, 1.0, t, w), rtol=1e-13)
    np.testing.assert_allclose(var, energy_variance(psi, 1.0, 1.0, t, w), rtol=1e-9)


def test_mean_energy_martingale():
    s = GueEnsemble(8, 2.0, 1).realization(0)
    psi = coherent_gibbs(s, 0.5)
    grid = TimeGrid(np.array([0.0, 2.0]))
    rec = sample_physical_record(psi, 1.0, 1.0, grid, derive_stream(3, "record"), size=10000)
    mu = mean_energy(psi, 1.0, 1.0, 2.0, rec[:, -1])
    mu0 = psi.populations @ s.energies
    assert abs(mu.mean() - mu0) < 4 * mu.std() / 100


def test_dephasing_is_path_independent():
    psi = coherent_gibbs(GueEnsemble(6, 2.0, 2).realization(0), 0.2)
    dt = 0.01
    a = b = None
    for _, a in em_batch(psi, 1.0, 0.0, dt, derive_stream(1, "w").normal((1, 50)) * 0.1, save_every=50):
        pass
    for _, b in em_batch(psi, 1.0, 0.0, dt, derive_stream(2, "w").normal((1, 50)) * 0.1, save_every=50):
        pass
    assert a.tobytes() == b.tobytes()


def test_step_guard():
    psi = coherent_gibbs(TWO, 0.0)
    dt = max_stable_dt(TWO.energies, 2.0)
    assert dt == pytest.approx(0.05)
    with pytest.raises(StepSizeError):
        list(em_batch(psi, 2.0, 1.0, 2 * dt, np.zeros((1, 3))))


def test_linear_form_rejects_innovations():
    with pytest.raises(ValidationError):
        list(em_batch(coherent_gibbs(TWO, 0.0), 1.0, 1.0, 0.01, np.zeros((1, 2)), "linear_normalized",
                      "innovation"))


def test_integrate_sme_traces():
    s = GueEnsemble(8, 2.0, 4).realization(0)
    psi = coherent_gibbs(s, 0.0)
    grid = TimeGrid.uniform(2.0, 200)
    path = sample_wiener_path(grid, derive_stream(0, "w"))
    for form in ("nonlinear", "linear_normalized"):
        for eta in (1.0, 0.5):
            states = integrate_sme(psi, 1.0, eta, grid, path, form, "record")
            for stt in states[::50]:
                assert abs(stt.trace - 1) < 1e-10


def test_sde_converges_to_closed_form():
    s = GueEnsemble(8, 2.0, 5).realization(0)
    psi = coherent_gibbs(s, 0.0)
    g = 1.0
    coarse = TimeGrid.uniform(2.0, 50)
    path = sample_wiener_path(coarse, derive_stream(5, "w"))
    errs = []
    grid = coarse
    for k in range(6):
        grid = grid.bisect()
        path = refine_path(path, grid, derive_stream(5, "bridge", k))
        states = integrate_sme(psi, g, 1.0, grid, path, "nonlinear", "record")
        ref = populations(psi, g, 1.0, grid.points, path.values)
        errs.append(max(np.max(np.abs(stt.populations - r)) for stt, r in zip(states, ref)))
    assert errs[-1] < errs[0] / 3


def test_correct_record_pairing_equivalence():
    # linear form on physical records and nonlinear form on Wiener innovations
    # describe the same ensemble of conditional states
    s = GueEnsemble(8, 2.0, 11).realization(0)
    psi = coherent_gibbs(s, 0.0)
    g, dt, n, paths = 1.0, 1.0 / 1600, 1600, 10000
    grid = TimeGrid.uniform(dt * n, n)
    rec = sample_physical_record(psi, g, 1.0, grid, derive_stream(1, "record"), size=paths)
    for _, lin in em_batch(psi, g, 1.0, dt, np.diff(rec, axis=1), "linear_normalized", save_every=n):
        pass
    innov = derive_stream(2, "innovation").normal((paths, n)) * math.sqrt(dt)
    for _, non in em_batch(psi, g, 1.0, dt, innov, "nonlinear", "innovation", save_every=n):
        pass
    assert stats.ks_2samp(np.abs(lin[:, 0]) ** 2, np.abs(non[:, 0]) ** 2).pvalue > 0.01


def test_collapse_two_level():
    psi = coherent_gibbs(TWO, 0.0)
    res = collapse_statistics(psi, 1.0, TimeGrid.uniform(20.0, 2000), 2000, derive_stream(0, "collapse"))
    p = res.frequencies[0]
    assert abs(p - 0.5) < 4 * math.sqrt(0.25 / 2000)
    assert res.unconverged == 0
    np.testing.assert_allclose(res.born_weights, [0.5, 0.5])
