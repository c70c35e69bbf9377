import math

import numpy as np
import numpy.testing as npt
import pytest

from spinnet import protocol
from spinnet.constants import TWO_PI
from spinnet.network import NV_AXES, EnsembleSpec, Placement, Species, SpinNetwork, SpinSite
from spinnet.protocol import (
    CROSSOVER,
    CycleConfig,
    enhancement,
    estimate_p1_polarization,
    fit_crossover,
    fit_saturation,
    protocol_network,
    readout_equilibration,
    run_iterative_protocol,
    spin_temperature,
    thermal_polarization,
)


def desk_factory(r, n_p1=120):
    return protocol_network(n_p1=n_p1, seed=0, realization=r)


def pair_network(r_nm=4.0):
    # one sensor and one bath spin separated along the field axis
    axis = NV_AXES[0]
    spec = EnsembleSpec(
        box_nm=40.0,
        densities_ppm={Species.NV: 0.1, Species.P1: 0.1},
        placement=Placement.CONTINUUM,
        disorder_mhz=0.0,
    )
    center = np.full(3, 20.0)
    sites = [
        SpinSite(0, center, Species.NV, axis.copy(), 0, 0.0),
        SpinSite(1, center + r_nm * axis, Species.P1, axis.copy(), 0, 0.0),
    ]
    return SpinNetwork(spec, sites, realization=0)


def test_cycle_config_validation():
    with pytest.raises(ValueError, match="cycle count"):
        CycleConfig(omega_mhz=6.4, n_cycles=33)
    with pytest.raises(ValueError, match="positive"):
        CycleConfig(omega_mhz=-1.0)
    with pytest.raises(ValueError, match="reset polarization"):
        CycleConfig(omega_mhz=6.4, p_nv0=1.2)
    with pytest.raises(ValueError, match="durations"):
        CycleConfig(omega_mhz=6.4, t_hh_us=0.0)


def test_protocol_network_layout():
    net = protocol_network(n_p1=120, seed=0, realization=0)
    nv = net.indices_of(Species.NV)
    p1 = net.indices_of(Species.P1)
    assert p1.size == 120
    assert nv.size == round(0.6 / 1.575 * 120)
    assert all(s.subgroup == 0 for s in net.sites)
    for s in net.sites:
        npt.assert_allclose(s.axis, NV_AXES[0], atol=1e-12)
    again = protocol_network(n_p1=120, seed=0, realization=0)
    npt.assert_array_equal(net.positions, again.positions)


def test_missing_species_raises():
    spec = EnsembleSpec(
        box_nm=50.0,
        densities_ppm={Species.P1: 1.575},
        placement=Placement.CONTINUUM,
    )
    from spinnet.network import generate_network

    net = generate_network(spec, realization=0)
    with pytest.raises(ValueError, match="sensor"):
        run_iterative_protocol(net, CycleConfig(omega_mhz=6.4))


def test_isolated_pair_shares_polarization():
    # one long exchange phase with relaxation switched off splits the
    # sensor polarization evenly across the pair
    config = CycleConfig(
        omega_mhz=6.4,
        t_hh_us=1e7,
        n_cycles=1,
        t1rho_dark_us=1e15,
        t1rho_nv_us=None,
        probe_k=1,
    )
    res = run_iterative_protocol(pair_network(), config, fit=False)
    npt.assert_allclose(res.p_nv[0], 0.375, atol=1e-6)
    npt.assert_allclose(res.p_p1[0], 0.375, atol=1e-6)


def test_hh_phase_conserves_total_polarization():
    from spinnet.protocol import _hh_propagator
    from spinnet.transport import build_rates

    net = desk_factory(0, n_p1=60)
    config = CycleConfig(omega_mhz=6.4, t1rho_dark_us=1e15, t1rho_nv_us=None)
    rm = build_rates(net, 6.4)
    step = _hh_propagator(rm, net, config)
    p = np.zeros(len(net.sites))
    p[net.indices_of(Species.NV)] = 0.75
    assert abs(step(p).sum() - p.sum()) < 1e-6 * p.sum()


def test_desk_run_monotone_and_bounded():
    res = run_iterative_protocol(desk_factory, CycleConfig(omega_mhz=6.4), n_realizations=20)
    assert np.all(res.p_p1 >= -1e-12)
    assert np.all(res.p_p1 <= 1.0)
    assert np.all(res.p_nv <= 1.0)
    drops = np.diff(res.p_p1)
    assert np.all(drops > -3.0 * res.p_p1_sem[1:])
    sat = res.saturation
    assert 2.0 < sat.n_sat < 4.0
    assert 0.05 < sat.a_sat < 0.25


def test_slower_laser_relaxation_raises_both_fit_parameters():
    fast = run_iterative_protocol(
        desk_factory, CycleConfig(omega_mhz=6.4), n_realizations=10
    ).saturation
    slow = run_iterative_protocol(
        desk_factory, CycleConfig(omega_mhz=6.4, t1rho_laser_us=1e9), n_realizations=10
    ).saturation
    assert slow.a_sat > fast.a_sat
    assert slow.n_sat > fast.n_sat


def test_saturation_monotone_in_drive():
    out = []
    for omega in (0.5, 2.0, 6.4):
        res = run_iterative_protocol(desk_factory, CycleConfig(omega_mhz=omega), n_realizations=10)
        out.append(res.saturation.a_sat)
    assert out[0] < out[1] < out[2]


def test_fit_saturation_round_trip():
    n = np.arange(1.0, 33.0)
    a = 0.143 * (1.0 - np.exp(-n / 3.0))
    res = fit_saturation(n, a)
    npt.assert_allclose(res.a_sat, 0.143, rtol=1e-8)
    npt.assert_allclose(res.n_sat, 3.0, rtol=1e-8)
    # the model is pinned to zero amplitude at N = 0
    assert protocol.fitkit.EXP_SATURATION.func(0.0, 0.143, 3.0) == 0.0


def test_fit_crossover_round_trip_and_half_point():
    omega = np.array([0.5, 1.0, 2.0, 3.2, 6.4, 10.0])
    a = CROSSOVER.func(omega, 0.143, 1.36)
    res = fit_crossover(omega, a)
    npt.assert_allclose(res.a_inf, 0.143, atol=1e-6)
    npt.assert_allclose(res.w_mhz, 1.36, atol=1e-6)
    npt.assert_allclose(CROSSOVER.func(1.36, 0.143, 1.36), 0.143 / 2.0, rtol=1e-12)


def test_fit_crossover_with_noise_recovers_width():
    rng = np.random.default_rng(5)
    omega = np.array([0.5, 1.0, 2.0, 3.2, 6.4, 10.0])
    clean = CROSSOVER.func(omega, 0.143, 1.36)
    noisy = clean * (1.0 + 0.05 * rng.standard_normal(omega.size))
    res = fit_crossover(omega, noisy)
    assert abs(res.w_mhz - 1.36) < 0.2


def test_estimate_p1_polarization_examples():
    npt.assert_allclose(estimate_p1_polarization(0.143, 2.6, 0.75), 0.0742, atol=5e-4)
    assert estimate_p1_polarization(0.0, 2.6) == 0.0
    npt.assert_allclose(estimate_p1_polarization(1.0, 1.0, 0.75), 0.75, rtol=1e-12)
    with pytest.raises(ValueError, match="nonnegative"):
        estimate_p1_polarization(-0.1, 2.6)
    with pytest.raises(ValueError, match="ratio"):
        estimate_p1_polarization(0.1, 0.0)


def test_temperature_chain_values():
    t = spin_temperature(0.074, 446.0)
    npt.assert_allclose(t, 0.4045, atol=0.005)
    p_th = thermal_polarization(300.0, 446.0)
    npt.assert_allclose(p_th, 1.0e-4, rtol=2e-2)
    npt.assert_allclose(enhancement(0.074, p_th), 740.0, rtol=0.05)


def test_temperature_round_trip_and_domain():
    for p in (0.01, 0.074, 0.5):
        npt.assert_allclose(thermal_polarization(spin_temperature(p, 446.0), 446.0), p, rtol=1e-12)
    with pytest.raises(ValueError, match="below 1"):
        spin_temperature(1.0, 446.0)
    assert spin_temperature(0.0, 446.0) == math.inf
    assert spin_temperature(-0.1, 446.0) == math.inf
    with pytest.raises(ValueError, match="temperature"):
        thermal_polarization(0.0, 446.0)
    with pytest.raises(ValueError, match="field"):
        spin_temperature(0.1, 0.0)


def test_readout_zero_preparation_is_null():
    net = desk_factory(0, n_p1=60)
    eq = readout_equilibration(net, 6.40, p_p1=0.0)
    npt.assert_allclose(eq.delta_c, 0.0, atol=1e-12)


def test_readout_sign_flip_antisymmetric():
    net = desk_factory(1, n_p1=60)
    a = readout_equilibration(net, 6.40, p_p1=0.074)
    b = readout_equilibration(net, 6.40, p_p1=-0.074)
    npt.assert_allclose(a.delta_c, -b.delta_c, atol=1e-14)


def test_readout_equilibrates_fast_and_rises():
    eq = readout_equilibration(lambda r: desk_factory(r), 6.40, n_realizations=10)
    assert eq.tau_eq_us < 430.0 / 50.0
    assert eq.delta_c[0] == 0.0
    assert eq.delta_c[-1] > 0.0


def test_quasi_equilibrium_recovers_prepared_polarization():
    net = desk_factory(2, n_p1=80)
    nv = net.indices_of(Species.NV)
    p1 = net.indices_of(Species.P1)
    times = np.concatenate([[0.0], np.geomspace(1.0, 5e4, 30)])
    eq = readout_equilibration(
        net, 6.40, times_us=times, p_p1=0.074, t1rho_dark_us=1e12, t1rho_nv_us=None
    )
    est = estimate_p1_polarization(eq.delta_c[-1], p1.size / nv.size)
    npt.assert_allclose(est, 0.074, rtol=0.10)


def test_protocol_csv():
    res = run_iterative_protocol(desk_factory(3, n_p1=40), CycleConfig(omega_mhz=6.4), fit=False)
    text = res.to_csv()
    lines = text.strip().splitlines()
    assert lines[0] == "cycle,p_nv,p_p1"
    assert len(lines) == 33
    first = [float(v) for v in lines[1].split(",")]
    assert first[0] == 1.0
