"""Exact state-vector dynamics of small spin clusters under pulse sequences.

Clusters are lists of :class:`~spinnet.network.SpinSite` (site 0 is the
sensor by convention).  Pulses are instantaneous ideal rotations; free
evolution uses the Hermitian eigendecomposition of the cluster Hamiltonian,
so arbitrary delay grids cost one diagonalization per realization.  Echo
signals use the phase-cycled difference of the two final pi/2 phases, which
rejects common-mode offsets and lands the signal in [-1, 1].
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import fitkit
from .constants import TWO_PI
from .fitkit import FitError, reduce_mean_sem
from .network import (
    NV_AXES,
    EnsembleSpec,
    Placement,
    Species,
    SpinSite,
    generate_network,
    ppm_to_density,
)
from .spinops import ClusterHamiltonian, Frame, build_cluster_hamiltonian, operator_set

__all__ = [
    "MAX_CLUSTER_DIM",
    "PulseEvent",
    "FreeEvolution",
    "TraceResult",
    "evolve",
    "rotation_unitary",
    "sample_nv_p1_cluster",
    "sample_nv_nv_cluster",
    "default_tau_grid",
    "run_deer",
    "deer_trace",
    "run_rabi",
    "fft_peak",
    "DephasingFit",
    "extract_dephasing_rate",
    "AlphaFit",
    "calibrate_alpha",
    "group_rate_slope",
    "KEstimate",
    "compute_K",
    "ConcentrationEstimate",
    "estimate_concentration",
]

MAX_CLUSTER_DIM = 4096

_AXES_2X2 = {
    "x": np.array([[0, 0.5], [0.5, 0]], dtype=complex),
    "y": np.array([[0, -0.5j], [0.5j, 0]], dtype=complex),
}


@dataclass(frozen=True)
class PulseEvent:
    """Instantaneous rotation exp(-i angle S_axis) on the targeted sites.

    ``axis`` is one of x, y, -x, -y; a ``target_species``/``target_subgroup``
    of None matches everything.
    """

    angle_rad: float
    axis: str = "x"
    target_species: Optional[Species] = None
    target_subgroup: Optional[int] = None

    def matches(self, site: SpinSite) -> bool:
        if self.target_species is not None and site.species != Species(self.target_species):
            return False
        if self.target_subgroup is not None and site.subgroup != self.target_subgroup:
            return False
        return True


@dataclass(frozen=True)
class FreeEvolution:
    duration_us: float

    def __post_init__(self):
        if self.duration_us < 0:
            raise ValueError("free evolution duration must be nonnegative")


@dataclass
class TraceResult:
    """A disorder-averaged time trace with per-point standard errors."""

    abscissa_us: np.ndarray
    signal: np.ndarray
    sem: np.ndarray
    n_realizations: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("abscissa_us,signal,sem\n")
        for t, s, e in zip(self.abscissa_us, self.signal, self.sem):
            buf.write(f"{float(t)!r},{float(s)!r},{float(e)!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TraceResult":
        rows = [ln.split(",") for ln in text.strip().splitlines()[1:]]
        data = np.array([[float(c) for c in row] for row in rows])
        return cls(data[:, 0], data[:, 1], data[:, 2], n_realizations=0)


def rotation_unitary(n_sites: int, angle_rad: float, axis: str, site_indices) -> np.ndarray:
    """Product of single-site rotations exp(-i angle S_axis) on the given sites."""
    if not math.isfinite(angle_rad):
        raise ValueError("rotation angle must be finite")
    sign = -1.0 if axis.startswith("-") else 1.0
    key = axis.lstrip("+-")
    if key not in _AXES_2X2:
        raise ValueError(f"unknown rotation axis {axis!r}")
    s_op = sign * _AXES_2X2[key]
    r2 = math.cos(angle_rad / 2) * np.eye(2) - 2j * math.sin(angle_rad / 2) * s_op
    chosen = set(int(i) for i in site_indices)
    u = np.array([[1.0 + 0j]])
    for i in range(n_sites):
        u = np.kron(u, r2 if i in chosen else np.eye(2, dtype=complex))
    return u


def _as_matrix(hamiltonian) -> np.ndarray:
    m = hamiltonian.matrix if isinstance(hamiltonian, ClusterHamiltonian) else np.asarray(hamiltonian, dtype=complex)
    scale = max(np.abs(m).max(), 1.0)
    if np.abs(m - m.conj().T).max() > 1e-12 * scale:
        raise ValueError("free evolution requires a Hermitian Hamiltonian")
    if m.shape[0] > MAX_CLUSTER_DIM:
        raise ValueError(
            f"cluster dimension {m.shape[0]} exceeds the {MAX_CLUSTER_DIM} cap"
        )
    return m


def evolve(state, hamiltonian, events: Sequence, sites: Sequence[SpinSite]) -> np.ndarray:
    """Apply a pulse/delay sequence; returns the trajectory after each event.

    The first row is the initial state.  Norm is checked against 1e-10 drift
    at every step.
    """
    m = _as_matrix(hamiltonian)
    n = len(sites)
    if m.shape[0] != 2**n:
        raise ValueError("Hamiltonian dimension does not match the site list")
    evals, evecs = np.linalg.eigh(m)
    psi = np.asarray(state, dtype=complex)
    norm0 = np.linalg.norm(psi)
    out = [psi.copy()]
    for ev in events:
        if isinstance(ev, FreeEvolution):
            phases = np.exp(-1j * TWO_PI * evals * ev.duration_us)
            psi = evecs @ (phases * (evecs.conj().T @ psi))
        elif isinstance(ev, PulseEvent):
            idx = [i for i, s in enumerate(sites) if ev.matches(s)]
            psi = rotation_unitary(n, ev.angle_rad, ev.axis, idx) @ psi
        else:
            raise TypeError(f"unknown sequence element {ev!r}")
        if abs(np.linalg.norm(psi) - norm0) > 1e-10:
            raise RuntimeError("state norm drifted beyond 1e-10")
        out.append(psi.copy())
    return np.array(out)


def _cluster_box_nm(density_ppm: float, n_sites: int) -> float:
    n = ppm_to_density(density_ppm)
    if n <= 0:
        raise ValueError("cluster sampling needs a positive density")
    return (n_sites / n) ** (1.0 / 3.0)


def sample_nv_p1_cluster(
    density_ppm: float,
    n_bath: int = 5,
    seed: int = 0,
    realization: int = 0,
    placement: Placement = Placement.DIAMOND_LATTICE,
    exclusion_nm: float = 1.0,
) -> list:
    """One NV sensor at the box center plus ``n_bath`` addressed P1 spins.

    The box side is chosen so the bath density equals ``density_ppm`` (the
    density of the addressed spectral group).  Bath spins share the sensor's
    quantization group tag so they flip-flop among themselves and couple to
    the NV through the Ising channel.
    """
    box = _cluster_box_nm(density_ppm, n_bath)
    spec = EnsembleSpec(
        box_nm=box,
        densities_ppm={Species.P1: density_ppm},
        placement=placement,
        exclusion_nm=exclusion_nm,
        seed=seed,
    )
    center = np.full(3, box / 2)
    for attempt in range(100):
        net = generate_network(spec, realization=realization + 1000 * attempt)
        pos = net.positions
        if len(pos) and np.min(np.linalg.norm(pos - center, axis=1)) < exclusion_nm:
            continue
        sensor = SpinSite(0, center.copy(), Species.NV, NV_AXES[0].copy(), subgroup=0)
        bath = [
            SpinSite(k + 1, s.position_nm, Species.P1, NV_AXES[0].copy(), subgroup=0)
            for k, s in enumerate(net.sites)
        ]
        return [sensor] + bath
    raise RuntimeError("could not place the sensor away from the bath in 100 attempts")


def sample_nv_nv_cluster(
    density_ppm: float,
    axis_counts: Sequence[int] = (2, 2, 2, 0),
    seed: int = 0,
    realization: int = 0,
    exclusion_nm: float = 1.0,
) -> list:
    """All-NV cluster: a sensor plus NVs spread over axis groups.

    ``axis_counts`` gives the group populations including the sensor, which
    occupies group 0 at the box center.
    """
    counts = list(axis_counts)
    if len(counts) != 4 or counts[0] < 1:
        raise ValueError("axis_counts needs 4 entries with at least the sensor in group 0")
    total = sum(counts)
    box = _cluster_box_nm(density_ppm, total)
    spec = EnsembleSpec(
        box_nm=box,
        densities_ppm={Species.NV: density_ppm * (total - 1) / total},
        exclusion_nm=exclusion_nm,
        seed=seed,
    )
    axis_pool = []
    for g, c in enumerate(counts):
        axis_pool += [g] * c
    axis_pool = axis_pool[1:]  # sensor takes the first slot of group 0
    center = np.full(3, box / 2)
    rng = np.random.default_rng(np.random.SeedSequence([seed, realization, 7]))
    for attempt in range(100):
        net = generate_network(spec, realization=realization + 1000 * attempt)
        pos = net.positions
        if len(pos) != len(axis_pool):
            # adjust: force the exact partner count by resizing the draw
            if len(pos) > len(axis_pool):
                pos = pos[: len(axis_pool)]
            else:
                continue
        if len(pos) and np.min(np.linalg.norm(pos - center, axis=1)) < exclusion_nm:
            continue
        order = rng.permutation(len(axis_pool))
        sensor = SpinSite(0, center.copy(), Species.NV, NV_AXES[0].copy(), subgroup=0)
        others = [
            SpinSite(k + 1, pos[k].copy(), Species.NV, NV_AXES[axis_pool[order[k]]].copy(), subgroup=axis_pool[order[k]])
            for k in range(len(axis_pool))
        ]
        return [sensor] + others
    raise RuntimeError("could not place the sensor away from the bath in 100 attempts")


def default_tau_grid(density_ppm: float, n_points: int = 48) -> np.ndarray:
    """Echo delay grid scaled inversely with density (denser bath, faster decay)."""
    if density_ppm <= 0:
        raise ValueError("density must be positive")
    # the disorder-averaged echo decays on ~2.5/density us, so 8/density
    # reaches deep into the tail at any density
    tau_max = 8.0 / density_ppm
    return np.linspace(0.0, tau_max, n_points)


def _sensor_up_probability(states: np.ndarray, n_sites: int, sensor: int = 0) -> np.ndarray:
    dim = states.shape[0]
    idx = np.arange(dim)
    up = ((idx >> (n_sites - 1 - sensor)) & 1) == 0
    return np.sum(np.abs(states[up, :]) ** 2, axis=0)


def run_deer(
    cluster_factory: Callable[[int], Sequence[SpinSite]],
    tau_grid_us,
    n_realizations: int = 1,
    bath_pi: bool = True,
    bath_target: Optional[tuple] = None,
    field_axis=NV_AXES[0],
    seed: int = 0,
) -> TraceResult:
    """Phase-cycled echo with an optional recoupling pi on bath spins.

    Sequence: pi/2_y - tau - pi_x (sensor, plus targeted bath when
    ``bath_pi``) - tau - pi/2_{+-y}; signal = P_up(-) - P_up(+), i.e. the
    cosine of the accumulated bath phase, averaged over realizations with
    random bath product states.
    """
    tau = np.asarray(tau_grid_us, dtype=float)
    signals = []
    for r in range(n_realizations):
        sites = list(cluster_factory(r))
        n = len(sites)
        if 2**n > MAX_CLUSTER_DIM:
            raise ValueError(f"cluster dimension {2**n} exceeds the {MAX_CLUSTER_DIM} cap")
        ham = build_cluster_hamiltonian(sites, field_axis, Frame.LAB_SECULAR)
        evals, evecs = np.linalg.eigh(ham.matrix)

        rng = np.random.default_rng(np.random.SeedSequence([seed, r, 11]))
        bath_bits = rng.integers(0, 2, size=n - 1) if n > 1 else np.zeros(0, dtype=int)
        index = 0
        for i in range(n):
            bit = 0 if i == 0 else int(bath_bits[i - 1])
            index = (index << 1) | bit
        psi0 = np.zeros(2**n, dtype=complex)
        psi0[index] = 1.0

        flip = {0}
        if bath_pi:
            for i, s in enumerate(sites[1:], start=1):
                if bath_target is None or (
                    s.species == bath_target[0] and s.subgroup == bath_target[1]
                ):
                    flip.add(i)
        u_half = rotation_unitary(n, math.pi / 2, "y", [0])
        u_pi = rotation_unitary(n, math.pi, "x", sorted(flip))
        u_plus = rotation_unitary(n, math.pi / 2, "y", [0])
        u_minus = rotation_unitary(n, math.pi / 2, "-y", [0])

        phases = np.exp(-1j * TWO_PI * np.outer(evals, tau))
        c1 = evecs.conj().T @ (u_half @ psi0)
        mid = u_pi @ (evecs @ (phases * c1[:, None]))
        states = evecs @ (phases * (evecs.conj().T @ mid))
        p_plus = _sensor_up_probability(u_plus @ states, n)
        p_minus = _sensor_up_probability(u_minus @ states, n)
        signals.append(p_minus - p_plus)

    sig = np.array(signals)
    mean = np.empty(tau.size)
    sem = np.empty(tau.size)
    for k in range(tau.size):
        mean[k], sem[k] = reduce_mean_sem(sig[:, k])
    return TraceResult(tau, mean, sem, n_realizations)


def deer_trace(
    density_ppm: float,
    tau_grid_us=None,
    n_realizations: int = 200,
    n_bath: int = 5,
    seed: int = 0,
    bath_pi: bool = True,
    placement: Placement = Placement.DIAMOND_LATTICE,
) -> TraceResult:
    """Disorder-averaged NV-P1 DEER decay at the given addressed density."""
    if tau_grid_us is None:
        tau_grid_us = default_tau_grid(density_ppm)
    factory = lambda r: sample_nv_p1_cluster(
        density_ppm, n_bath=n_bath, seed=seed, realization=r, placement=placement
    )
    return run_deer(
        factory,
        tau_grid_us,
        n_realizations=n_realizations,
        bath_pi=bath_pi,
        bath_target=(Species.P1, 0),
        seed=seed,
    )


def run_rabi(
    omega_mhz: float,
    t_grid_us,
    detuning_mhz: float = 0.0,
) -> TraceResult:
    """Driven single-spin evolution; returns the <sigma_z> trace.

    In the rotating frame H = Omega Sx + delta Sz, so the signal oscillates
    at sqrt(Omega^2 + delta^2) with contrast Omega^2 / (Omega^2 + delta^2).
    """
    t = np.asarray(t_grid_us, dtype=float)
    h = omega_mhz * np.array([[0, 0.5], [0.5, 0]]) + detuning_mhz * np.array(
        [[0.5, 0], [0, -0.5]]
    )
    evals, evecs = np.linalg.eigh(h)
    psi0 = np.array([1.0, 0.0], dtype=complex)
    phases = np.exp(-1j * TWO_PI * np.outer(evals, t))
    states = evecs @ (phases * (evecs.conj().T @ psi0)[:, None])
    sz = np.abs(states[0, :]) ** 2 - np.abs(states[1, :]) ** 2
    return TraceResult(t, sz, np.zeros_like(t), 1)


def fft_peak(trace: TraceResult):
    """Dominant oscillation frequency of a trace on a uniform grid, MHz."""
    t = trace.abscissa_us
    if t.size < 4:
        raise FitError("trace too short for a spectrum")
    dts = np.diff(t)
    if np.ptp(dts) > 1e-9 * dts[0]:
        raise FitError("spectrum extraction needs a uniform time grid")
    freqs, mag = fitkit.fft_spectrum(trace.signal - np.mean(trace.signal), dts[0])
    return fitkit.spectrum_peak(freqs, mag)


@dataclass
class DephasingFit:
    rate_mhz: float
    rate_sigma: float
    t2_us: float
    beta: float
    fit: fitkit.FitResult


def extract_dephasing_rate(trace: TraceResult) -> DephasingFit:
    """Stretched-exponential fit of an echo decay; returns 1/T2 with 1 sigma."""
    y = trace.signal
    if np.ptp(y) < 0.05 * max(np.abs(y).max(), 1e-12) or np.ptp(y) < 1e-12:
        raise FitError("trace shows no decay; dephasing rate is not identifiable")
    sigma = trace.sem if np.all(trace.sem > 0) else None
    res = fitkit.fit(fitkit.STRETCHED_EXP, trace.abscissa_us, y, sigma=sigma)
    t2 = res["t2"]
    t2_sigma = res.sigma("t2")
    return DephasingFit(
        rate_mhz=1.0 / t2,
        rate_sigma=t2_sigma / t2**2,
        t2_us=t2,
        beta=res["beta"],
        fit=res,
    )


@dataclass
class AlphaFit:
    alpha_mhz_per_ppm: float
    alpha_sigma: float
    fit: fitkit.FitResult


def calibrate_alpha(densities_ppm, rates_mhz, rate_sigmas=None) -> AlphaFit:
    """Through-origin weighted fit of dephasing rate vs density."""
    d = np.asarray(densities_ppm, dtype=float)
    if np.unique(d).size < 2:
        raise FitError("rate-vs-density calibration needs at least two distinct densities")
    res = fitkit.linear_fit(d, rates_mhz, sigma=rate_sigmas, through_origin=True)
    return AlphaFit(res["slope"], res.sigma("slope"), res)


def group_rate_slope(group_counts, rates_mhz, rate_sigmas=None) -> fitkit.FitResult:
    """Incremental dephasing per added spin group: slope of rate vs group count."""
    g = np.asarray(group_counts, dtype=float)
    if np.unique(g).size < 2:
        raise FitError("need at least two distinct group counts")
    return fitkit.linear_fit(g, rates_mhz, sigma=rate_sigmas)


@dataclass
class KEstimate:
    k_mhz_per_group_ppm: float
    k_sigma: float


def compute_K(alpha_mhz_per_ppm: float, addressed_fraction: float, alpha_sigma: float = 0.0) -> KEstimate:
    """Expected dephasing per addressed group at 1 ppm total density.

    ``addressed_fraction`` is the population fraction carried by one
    addressed spectral group (1 for a single group, 1/2 for two equal
    groups, 3/12 for the usual P1 dip).
    """
    if not 0 < addressed_fraction <= 1:
        raise ValueError("addressed fraction must lie in (0, 1]")
    return KEstimate(
        alpha_mhz_per_ppm * addressed_fraction, alpha_sigma * addressed_fraction
    )


@dataclass
class ConcentrationEstimate:
    mean_ppm: float
    sigma_ppm: float
    quantiles: dict
    n_samples: int
    n_rejected: int
    rejection_warning: bool


def estimate_concentration(
    gamma_exp_mhz: float,
    gamma_sigma: float,
    k_mhz_per_group_ppm: float,
    k_sigma: float,
    n_mc: int = 10_000,
    seed: int = 0,
) -> ConcentrationEstimate:
    """Monte Carlo posterior for total density = gamma_exp / K.

    Both inputs are sampled as Gaussians; K draws at or below zero are
    rejected and counted, with a warning flag past 1% rejections.
    """
    if k_mhz_per_group_ppm <= 0:
        raise ValueError("K must be positive")
    res = fitkit.mc_propagate(
        lambda g, k: g / k,
        [gamma_exp_mhz, k_mhz_per_group_ppm],
        [gamma_sigma, k_sigma],
        n=n_mc,
        seed=seed,
        reject=lambda g, k: k <= 0,
    )
    return ConcentrationEstimate(
        mean_ppm=res.mean,
        sigma_ppm=res.sigma,
        quantiles=res.quantiles,
        n_samples=res.n_samples,
        n_rejected=res.n_rejected,
        rejection_warning=res.rejection_warning,
    )
