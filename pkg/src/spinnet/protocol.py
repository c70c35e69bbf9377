"""Iterative two-phase polarization transfer on a driven spin network.

Each cycle alternates a Hartmann-Hahn exchange phase (master-equation
evolution with rotating-frame relaxation) and an optical phase that
repolarizes the sensors while the bath relaxes faster under
illumination.  The module also carries the closed-form chain from a
measured contrast amplitude to an absolute bath polarization, spin
temperature, and enhancement over thermal equilibrium.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import fitkit
from .constants import GAMMA_E_MHZ_PER_G, H_PLANCK_J_S, K_B_J_PER_K
from .network import (
    NV_AXES,
    EnsembleSpec,
    Placement,
    Species,
    SpinNetwork,
    generate_network,
    ppm_to_density,
)
from .transport import RateMatrix, build_rates

__all__ = [
    "CycleConfig",
    "ProtocolResult",
    "SaturationFit",
    "CrossoverFit",
    "EquilibrationResult",
    "protocol_network",
    "run_iterative_protocol",
    "saturation_sweep",
    "fit_saturation",
    "fit_crossover",
    "estimate_p1_polarization",
    "spin_temperature",
    "thermal_polarization",
    "enhancement",
    "readout_equilibration",
]


@dataclass(frozen=True)
class CycleConfig:
    """Timing, drive, and relaxation parameters of one transfer cycle."""

    omega_mhz: float
    t_hh_us: float = 5.0
    t_laser_us: float = 5.0
    n_cycles: int = 32
    p_nv0: float = 0.75
    t1rho_dark_us: float = 430.0
    t1rho_laser_us: float = 32.0
    t1rho_nv_us: Optional[float] = 1300.0
    probe_k: int = 8
    gamma_mhz: float = 0.15

    def __post_init__(self):
        if self.omega_mhz <= 0:
            raise ValueError("drive amplitude must be positive")
        if self.t_hh_us <= 0 or self.t_laser_us <= 0:
            raise ValueError("phase durations must be positive")
        if not 1 <= self.n_cycles <= 32:
            raise ValueError("cycle count must lie in [1, 32]")
        if not 0.0 <= self.p_nv0 <= 1.0:
            raise ValueError("sensor reset polarization must lie in [0, 1]")
        if self.t1rho_dark_us <= 0 or self.t1rho_laser_us <= 0:
            raise ValueError("relaxation times must be positive")
        if self.t1rho_nv_us is not None and self.t1rho_nv_us <= 0:
            raise ValueError("sensor relaxation time must be positive or None")
        if self.probe_k < 1:
            raise ValueError("probe set needs at least one bath site")


@dataclass
class SaturationFit:
    a_sat: float
    n_sat: float
    a_sat_sigma: float
    n_sat_sigma: float
    fit: fitkit.FitResult


@dataclass
class CrossoverFit:
    a_inf: float
    w_mhz: float
    a_inf_sigma: float
    w_sigma: float
    fit: fitkit.FitResult


@dataclass
class ProtocolResult:
    cycles: np.ndarray
    p_nv: np.ndarray
    p_p1: np.ndarray
    p_nv_sem: Optional[np.ndarray]
    p_p1_sem: Optional[np.ndarray]
    n_realizations: int
    saturation: Optional[SaturationFit] = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        has_sem = self.p_nv_sem is not None
        buf.write("cycle,p_nv,p_p1" + (",p_nv_sem,p_p1_sem" if has_sem else "") + "\n")
        for k in range(len(self.cycles)):
            row = [float(self.cycles[k]), float(self.p_nv[k]), float(self.p_p1[k])]
            if has_sem:
                row += [float(self.p_nv_sem[k]), float(self.p_p1_sem[k])]
            buf.write(",".join(repr(v) for v in row) + "\n")
        return buf.getvalue()


@dataclass
class EquilibrationResult:
    times_us: np.ndarray
    delta_c: np.ndarray
    amplitude: float
    tau_eq_us: float
    fit: fitkit.FitResult


def protocol_network(
    n_p1: int = 120,
    density_nv_ppm: float = 0.6,
    density_p1_ppm: float = 1.575,
    w_mhz: float = 1.36,
    seed: int = 0,
    realization: int = 0,
    exclusion_nm: float = 1.0,
) -> SpinNetwork:
    """Two-species box with every site in the driven (addressed) group.

    The box edge is set by the bath density and ``n_p1``; the sensor
    count follows from the density ratio.  All sensors share one
    crystallographic axis and all bath spins one spectral group, so
    every pair participates in the dressed exchange.
    """
    if n_p1 < 1:
        raise ValueError("need at least one bath spin")
    box = (n_p1 / ppm_to_density(density_p1_ppm)) ** (1.0 / 3.0)
    spec = EnsembleSpec(
        box_nm=box,
        densities_ppm={Species.NV: density_nv_ppm, Species.P1: density_p1_ppm},
        placement=Placement.CONTINUUM,
        exclusion_nm=exclusion_nm,
        disorder_mhz=w_mhz,
        seed=seed,
        axis_weights={Species.NV: (1.0, 0.0, 0.0, 0.0)},
    )
    net = generate_network(spec, realization=realization)
    if net.indices_of(Species.NV).size == 0 or net.indices_of(Species.P1).size == 0:
        raise ValueError("network must contain both sensor and bath spins")
    for s in net.sites:
        s.subgroup = 0
        if s.species == Species.P1:
            s.axis = NV_AXES[0].copy()
    return net


def _hh_propagator(rm: RateMatrix, net: SpinNetwork, config: CycleConfig):
    """Eigen-decomposed generator for the exchange phase, reused per cycle."""
    n = len(net.sites)
    t1 = np.full(n, config.t1rho_dark_us)
    if config.t1rho_nv_us is not None:
        t1[net.indices_of(Species.NV)] = config.t1rho_nv_us
    else:
        t1[net.indices_of(Species.NV)] = np.inf
    relax = np.where(np.isfinite(t1), 1.0 / t1, 0.0)
    m = np.diag(rm.rates.sum(axis=1) + relax) - rm.rates
    evals, evecs = np.linalg.eigh(m)
    decay = np.exp(-evals * config.t_hh_us)

    def step(p: np.ndarray) -> np.ndarray:
        return evecs @ (decay * (evecs.T @ p))

    return step


def _probe_indices(net: SpinNetwork, k: int) -> np.ndarray:
    """The k bath sites nearest to the most central sensor."""
    nv = net.indices_of(Species.NV)
    p1 = net.indices_of(Species.P1)
    center = np.full(3, net.spec.box_nm / 2.0)
    probe_nv = nv[np.argmin(np.linalg.norm(net.positions[nv] - center, axis=1))]
    dist = np.linalg.norm(net.positions[p1] - net.positions[probe_nv], axis=1)
    return p1[np.argsort(dist)[: min(k, p1.size)]]


def _single_run(net: SpinNetwork, config: CycleConfig) -> tuple:
    nv = net.indices_of(Species.NV)
    p1 = net.indices_of(Species.P1)
    if nv.size == 0 or p1.size == 0:
        raise ValueError("network must contain both sensor and bath spins")
    rm = build_rates(net, config.omega_mhz, config.gamma_mhz)
    step = _hh_propagator(rm, net, config)
    probe = _probe_indices(net, config.probe_k)
    laser_decay = math.exp(-config.t_laser_us / config.t1rho_laser_us)

    p = np.zeros(len(net.sites))
    p[nv] = config.p_nv0
    traj_nv = np.empty(config.n_cycles)
    traj_p1 = np.empty(config.n_cycles)
    for cycle in range(config.n_cycles):
        p = step(p)
        # record at the end of the exchange phase, before the reset
        traj_nv[cycle] = p[nv].mean()
        traj_p1[cycle] = p[probe].mean()
        p[p1] *= laser_decay
        p[nv] = config.p_nv0
    return traj_nv, traj_p1


NetworkFactory = Union[SpinNetwork, Callable[[int], SpinNetwork]]


def run_iterative_protocol(
    net: NetworkFactory,
    config: CycleConfig,
    n_realizations: int = 1,
    fit: bool = True,
) -> ProtocolResult:
    """Disorder-averaged per-cycle sensor and bath polarization.

    ``net`` is either a single network (one realization) or a callable
    mapping a realization index to a network.
    """
    factory = net if callable(net) else (lambda r, _n=net: _n)
    nv_runs = np.empty((n_realizations, config.n_cycles))
    p1_runs = np.empty((n_realizations, config.n_cycles))
    for r in range(n_realizations):
        nv_runs[r], p1_runs[r] = _single_run(factory(r), config)
    cycles = np.arange(1, config.n_cycles + 1, dtype=float)
    if n_realizations > 1:
        p_nv = np.empty(config.n_cycles)
        p_p1 = np.empty(config.n_cycles)
        nv_sem = np.empty(config.n_cycles)
        p1_sem = np.empty(config.n_cycles)
        for k in range(config.n_cycles):
            p_nv[k], nv_sem[k] = fitkit.reduce_mean_sem(nv_runs[:, k])
            p_p1[k], p1_sem[k] = fitkit.reduce_mean_sem(p1_runs[:, k])
    else:
        p_nv, p_p1 = nv_runs[0], p1_runs[0]
        nv_sem = p1_sem = None
    result = ProtocolResult(cycles, p_nv, p_p1, nv_sem, p1_sem, n_realizations)
    if fit:
        result.saturation = fit_saturation(cycles, p_p1, sem=p1_sem)
    return result


def saturation_sweep(
    omegas_mhz: Sequence[float],
    n_realizations: int = 100,
    n_p1: int = 120,
    seed: int = 0,
    **config_kwargs,
) -> tuple:
    """P_sat per drive amplitude plus the crossover fit against disorder."""
    omegas = np.asarray(omegas_mhz, dtype=float)
    p_sat = np.empty(omegas.size)
    p_sat_sigma = np.empty(omegas.size)
    for k, omega in enumerate(omegas):
        config = CycleConfig(omega_mhz=float(omega), **config_kwargs)
        factory = lambda r: protocol_network(n_p1=n_p1, w_mhz=1.36, seed=seed, realization=r)
        res = run_iterative_protocol(factory, config, n_realizations=n_realizations)
        p_sat[k] = res.saturation.a_sat
        p_sat_sigma[k] = res.saturation.a_sat_sigma
    cross = fit_crossover(omegas, p_sat, sigma=np.where(p_sat_sigma > 0, p_sat_sigma, None))
    return p_sat, p_sat_sigma, cross


def fit_saturation(n_values, a_values, sem=None, p0=None) -> SaturationFit:
    """Exponential-saturation fit A(N) = A_sat (1 - exp(-N/N_sat))."""
    n_values = np.asarray(n_values, dtype=float)
    a_values = np.asarray(a_values, dtype=float)
    sigma = None
    if sem is not None:
        sem = np.asarray(sem, dtype=float)
        if np.all(sem > 0):
            sigma = sem
    res = fitkit.fit(fitkit.EXP_SATURATION, n_values, a_values, sigma=sigma, p0=p0)
    return SaturationFit(
        a_sat=res["amp"],
        n_sat=res["tau"],
        a_sat_sigma=res.sigma("amp"),
        n_sat_sigma=res.sigma("tau"),
        fit=res,
    )


def _crossover_model(omega, a_inf, w):
    return a_inf * omega**2 / (omega**2 + w**2)


def _crossover_guess(x, y):
    a = float(np.max(np.abs(y))) or 1.0
    return (a, float(np.median(x)))


CROSSOVER = fitkit.ModelSpec(
    name="rabi_crossover",
    func=_crossover_model,
    param_names=("a_inf", "w"),
    lower=(0.0, 1e-6),
    upper=(np.inf, np.inf),
    guess=_crossover_guess,
)


def fit_crossover(omegas_mhz, a_sat, sigma=None, p0=None) -> CrossoverFit:
    """Disorder-crossover fit A_sat(Omega) = A_inf Omega^2/(Omega^2 + W^2)."""
    res = fitkit.fit(CROSSOVER, np.asarray(omegas_mhz, dtype=float), np.asarray(a_sat, dtype=float), sigma=sigma, p0=p0)
    return CrossoverFit(
        a_inf=res["a_inf"],
        w_mhz=res["w"],
        a_inf_sigma=res.sigma("a_inf"),
        w_sigma=res.sigma("w"),
        fit=res,
    )


def estimate_p1_polarization(a: float, p1_to_nv_ratio: float, p_nv0: float = 0.75) -> float:
    """Absolute bath polarization from the saturated contrast amplitude.

    Polarization bookkeeping between the optically reset sensors and the
    bath gives P = P0 (A/2)(1 + n_sensor/n_bath); the ratio argument is
    n_bath/n_sensor.
    """
    if a < 0:
        raise ValueError("contrast amplitude must be nonnegative")
    if p1_to_nv_ratio <= 0:
        raise ValueError("density ratio must be positive")
    return p_nv0 * (a / 2.0) * (1.0 + 1.0 / p1_to_nv_ratio)


def _zeeman_hz(b_gauss: float) -> float:
    if b_gauss <= 0:
        raise ValueError("magnetic field must be positive")
    return GAMMA_E_MHZ_PER_G * 1e6 * b_gauss


def spin_temperature(p: float, b_gauss: float) -> float:
    """Effective temperature assigning polarization p at field B (kelvin)."""
    if p >= 1.0:
        raise ValueError("polarization must be below 1")
    if p <= 0.0:
        return math.inf
    f = _zeeman_hz(b_gauss)
    return H_PLANCK_J_S * f / (2.0 * K_B_J_PER_K * math.atanh(p))


def thermal_polarization(t_kelvin: float, b_gauss: float) -> float:
    """Equilibrium electron polarization at temperature T and field B."""
    if t_kelvin <= 0:
        raise ValueError("temperature must be positive")
    f = _zeeman_hz(b_gauss)
    return math.tanh(H_PLANCK_J_S * f / (2.0 * K_B_J_PER_K * t_kelvin))


def enhancement(p: float, p_thermal: float) -> float:
    if p_thermal <= 0:
        raise ValueError("thermal polarization must be positive")
    return p / p_thermal


def readout_equilibration(
    net: NetworkFactory,
    omega_mhz: float,
    times_us=None,
    p_p1: float = 0.074,
    p_nv0: float = 0.75,
    t1rho_dark_us: float = 430.0,
    t1rho_nv_us: Optional[float] = 1300.0,
    gamma_mhz: float = 0.15,
    n_realizations: int = 1,
) -> EquilibrationResult:
    """Sensor contrast transient while reading out a prepared bath.

    The bath starts at +-p_p1 and the sensors at p_nv0; the contrast
    difference between the two signs, normalized by p_nv0, rises as the
    sensors equilibrate with their local bath.  An exponential
    saturation fit gives the equilibration time.
    """
    if times_us is None:
        times_us = np.linspace(0.0, 10.0, 41)
    times_us = np.asarray(times_us, dtype=float)
    factory = net if callable(net) else (lambda r, _n=net: _n)

    curves = np.empty((n_realizations, times_us.size))
    for r in range(n_realizations):
        one = factory(r)
        nv = one.indices_of(Species.NV)
        p1 = one.indices_of(Species.P1)
        rm = build_rates(one, omega_mhz, gamma_mhz)
        n = len(one.sites)
        t1 = np.full(n, t1rho_dark_us)
        t1[nv] = t1rho_nv_us if t1rho_nv_us is not None else np.inf
        relax = np.where(np.isfinite(t1), 1.0 / t1, 0.0)
        m = np.diag(rm.rates.sum(axis=1) + relax) - rm.rates
        evals, evecs = np.linalg.eigh(m)

        def evolve(p0):
            coeff = evecs.T @ p0
            return np.einsum("ik,tk,k->ti", evecs, np.exp(-np.outer(times_us, evals)), coeff)

        plus = np.zeros(n)
        plus[nv] = p_nv0
        plus[p1] = p_p1
        minus = np.zeros(n)
        minus[nv] = p_nv0
        minus[p1] = -p_p1
        diff = evolve(plus)[:, nv].mean(axis=1) - evolve(minus)[:, nv].mean(axis=1)
        curves[r] = diff / p_nv0

    delta_c = curves.mean(axis=0)
    res = fitkit.fit(fitkit.EXP_SATURATION, times_us, delta_c)
    return EquilibrationResult(
        times_us=times_us,
        delta_c=delta_c,
        amplitude=res["amp"],
        tau_eq_us=res["tau"],
        fit=res,
    )
