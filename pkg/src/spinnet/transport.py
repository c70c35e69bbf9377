"""Semiclassical polarization transport on disordered spin networks.

Hartmann-Hahn matched flip-flop channels give golden-rule rates between
sites; polarization then obeys the linear lattice master equation
dP_i/dt = sum_j R_ij (P_j - P_i) - P_i / T1rho_i.  Because the generator is
a constant symmetric positive-semidefinite matrix, the default propagation
is its exact eigendecomposition (one factorization serves every requested
time); an explicit Runge-Kutta route is kept as an independent cross-check
for small systems.

The diffusion analysis follows the mean-squared displacement of the
polarization cloud about the source, fits the slope inside a window bounded
below by the one-hop distance and above by the box, and removes the finite
box by a linear extrapolation in 1/L.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from . import fitkit
from .constants import J0_MHZ_NM3
from .network import (
    NV_AXES,
    EnsembleSpec,
    Species,
    SpinNetwork,
    SpinSite,
    assign_detunings,
    generate_network,
    mean_spacing,
    ppm_to_density,
)
from .spinops import effective_rabi, tilt_projection

__all__ = [
    "RateMatrix",
    "Trajectory",
    "MsdCurve",
    "DiffusionResult",
    "ExtrapolationResult",
    "StiffnessError",
    "WindowError",
    "build_rates",
    "integrate_master_equation",
    "msd",
    "extract_diffusion",
    "finite_size_extrapolate",
    "diffusion_length",
    "transport_network",
    "average_msd",
    "diffusion_scaling",
]

RATE_FLOOR_MHZ = 1e-6


class StiffnessError(RuntimeError):
    pass


class WindowError(RuntimeError):
    pass


@dataclass
class RateMatrix:
    """Symmetric pair-rate matrix in MHz with the cutoff used to build it."""

    rates: np.ndarray
    cutoff_nm: float
    omega_mhz: float
    gamma_mhz: float

    def __post_init__(self):
        r = np.asarray(self.rates, dtype=float)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValueError("rate matrix must be square")
        if not np.allclose(r, r.T):
            raise ValueError("rates must be symmetric")
        if np.any(np.diag(r) != 0):
            raise ValueError("rate matrix diagonal must be zero")
        if not np.all(np.isfinite(r)) or np.any(r < 0):
            raise ValueError("rates must be finite and nonnegative")
        self.rates = r

    @property
    def n_sites(self) -> int:
        return self.rates.shape[0]

    def hottest_pair(self):
        flat = int(np.argmax(self.rates))
        i, j = divmod(flat, self.n_sites)
        return i, j, float(self.rates[i, j])


def _axis_index(axis: np.ndarray) -> int:
    return int(np.argmax(NV_AXES @ axis))


def build_rates(net: SpinNetwork, omega_mhz: float, gamma_mhz: float = 0.15) -> RateMatrix:
    """Golden-rule flip-flop rates between every pair of dressed sites.

    J~_ij = (J_ij/8 for degenerate pairs, J_ij/4 otherwise) sin(theta_i)
    sin(theta_j) with NV scaling inside J_ij, and
    R_ij = 2 |J~|^2 Gamma / (Gamma^2 + (Omega_eff,i - Omega_eff,j)^2).
    Pairs whose best-case rate falls below 1e-6 MHz are dropped; the
    corresponding cutoff radius is recorded.
    """
    if omega_mhz <= 0:
        raise ValueError("drive amplitude must be positive")
    if gamma_mhz <= 0:
        raise ValueError("Hartmann-Hahn linewidth must be positive")
    sites = net.sites
    n = len(sites)
    pos = net.positions
    axis = net.spec.field_axis_unit
    delta = net.detunings

    # largest conceivable |J~| at distance r is J0/r^3 (angular factor 2,
    # double NV scaling 2, inter prefactor 1/4, unit projections)
    cutoff = (2.0 * J0_MHZ_NM3**2 / (gamma_mhz * RATE_FLOOR_MHZ)) ** (1.0 / 6.0)

    rates = np.zeros((n, n))
    if n >= 2:
        rvec = pos[None, :, :] - pos[:, None, :]
        r = np.linalg.norm(rvec, axis=-1)
        np.fill_diagonal(r, np.inf)
        if net.spec.exclusion_nm > 0 and r.min() < net.spec.exclusion_nm - 1e-9:
            raise ValueError("network violates its exclusion radius")
        cos = np.divide(rvec @ axis, r, where=np.isfinite(r))
        j_bare = J0_MHZ_NM3 * (1.0 - 3.0 * cos**2) / r**3
        is_nv = np.array([s.species == Species.NV for s in sites])
        scale = np.sqrt(2.0) ** (is_nv[:, None].astype(int) + is_nv[None, :].astype(int))
        keys = [(s.species, s.subgroup, _axis_index(s.axis)) for s in sites]
        same = np.array([[ki == kj for kj in keys] for ki in keys])
        prefactor = np.where(same, 1.0 / 8.0, 1.0 / 4.0)
        sin_t = np.array([tilt_projection(omega_mhz, d) for d in delta])
        j_eff = prefactor * scale * j_bare * sin_t[:, None] * sin_t[None, :]
        om_eff = np.array([effective_rabi(omega_mhz, d) for d in delta])
        d_eff = om_eff[:, None] - om_eff[None, :]
        rates = 2.0 * j_eff**2 * gamma_mhz / (gamma_mhz**2 + d_eff**2)
        rates[r > cutoff] = 0.0
        np.fill_diagonal(rates, 0.0)
    return RateMatrix(rates, cutoff_nm=cutoff, omega_mhz=omega_mhz, gamma_mhz=gamma_mhz)


@dataclass
class Trajectory:
    times_us: np.ndarray
    polarization: np.ndarray  # (n_times, n_sites)

    def total(self) -> np.ndarray:
        return self.polarization.sum(axis=1)


def _relaxation_vector(t1rho_us, n: int) -> np.ndarray:
    if t1rho_us is None:
        return np.zeros(n)
    arr = np.broadcast_to(np.asarray(t1rho_us, dtype=float), (n,)).copy()
    if np.any(arr <= 0):
        raise ValueError("T1rho must be positive (or None for no relaxation)")
    return 1.0 / arr


def integrate_master_equation(
    rates,
    t1rho_us,
    p0,
    times_us,
    method: str = "eigh",
    validate: bool = True,
) -> Trajectory:
    """Propagate the lattice master equation to the requested times.

    ``method='eigh'`` (default) diagonalizes the symmetric generator once
    and is exact at any time; ``method='rk'`` runs an explicit adaptive
    integrator with step bounded by 0.1/max(sum_j R_ij + 1/T1rho) as an
    independent cross-check.  Without relaxation the total polarization is
    verified to be conserved to 1e-6 and the solution to respect the
    maximum principle.
    """
    rm = rates if isinstance(rates, RateMatrix) else RateMatrix(np.asarray(rates, dtype=float), 0.0, 1.0, 0.15)
    r = rm.rates
    n = rm.n_sites
    p0 = np.asarray(p0, dtype=float)
    if p0.shape != (n,):
        raise ValueError("initial polarization length must match the rate matrix")
    times = np.asarray(times_us, dtype=float)
    if np.any(times < 0):
        raise ValueError("times must be nonnegative")
    relax = _relaxation_vector(t1rho_us, n)
    m = np.diag(r.sum(axis=1) + relax) - r

    if method == "eigh":
        evals, evecs = np.linalg.eigh(m)
        coeff = evecs.T @ p0
        traj = np.einsum("ik,tk,k->ti", evecs, np.exp(-np.outer(times, evals)), coeff)
    elif method == "rk":
        scale = float(np.max(r.sum(axis=1) + relax))
        max_step = 0.1 / scale if scale > 0 else np.inf
        t_end = float(times.max()) if times.size else 0.0
        if max_step < np.inf and t_end / max_step > 2e6:
            i, j, hot = rm.hottest_pair()
            raise StiffnessError(
                f"explicit integration to t={t_end:g} us needs >2e6 steps; "
                f"stiffness is dominated by pair ({i}, {j}) at R={hot:g} MHz"
            )
        sol = solve_ivp(
            lambda t, p: -(m @ p),
            (0.0, t_end),
            p0,
            t_eval=times,
            method="RK45",
            max_step=max_step,
            rtol=1e-9,
            atol=1e-12,
        )
        if not sol.success:
            raise StiffnessError(f"explicit integrator failed: {sol.message}")
        traj = sol.y.T
    else:
        raise ValueError(f"unknown integration method {method!r}")

    if validate and t1rho_us is None:
        tot0 = p0.sum()
        drift = np.abs(traj.sum(axis=1) - tot0)
        ref = max(abs(tot0), np.abs(p0).max(), 1e-12)
        if drift.max() > 1e-6 * ref:
            raise RuntimeError("total polarization drifted beyond 1e-6 without relaxation")
        lo, hi = p0.min(), p0.max()
        tol = 1e-9 * max(abs(lo), abs(hi), 1.0)
        if traj.min() < lo - tol or traj.max() > hi + tol:
            raise RuntimeError("maximum principle violated without relaxation")
    return Trajectory(times, traj)


@dataclass
class MsdCurve:
    times_us: np.ndarray
    msd_nm2: np.ndarray
    survival: np.ndarray
    sem_nm2: Optional[np.ndarray] = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = "times_us,msd_nm2,survival" + (",sem_nm2" if self.sem_nm2 is not None else "")
        buf.write(cols + "\n")
        for k in range(len(self.times_us)):
            row = [self.times_us[k], self.msd_nm2[k], self.survival[k]]
            if self.sem_nm2 is not None:
                row.append(self.sem_nm2[k])
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MsdCurve":
        rows = [line.split(",") for line in text.strip().splitlines()]
        header, data = rows[0], np.array(rows[1:], dtype=float)
        sem = data[:, 3] if "sem_nm2" in header else None
        return cls(data[:, 0], data[:, 1], data[:, 2], sem_nm2=sem)


def msd(traj: Trajectory, positions_nm, source_index: int) -> MsdCurve:
    """Polarization-weighted mean-squared displacement about the source."""
    pos = np.asarray(positions_nm, dtype=float)
    r2 = np.sum((pos - pos[source_index]) ** 2, axis=1)
    p = traj.polarization
    tot = p.sum(axis=1)
    if np.any(tot <= 0):
        raise ValueError("total polarization must stay positive for the MSD")
    curve = (p @ r2) / tot
    return MsdCurve(traj.times_us, curve, tot)


@dataclass
class DiffusionResult:
    d_nm2_per_us: float
    sigma: float
    window_t_us: tuple
    window_msd_nm2: tuple
    n_window_points: int
    fit: fitkit.FitResult


def extract_diffusion(curve: MsdCurve, d_avg_nm: float, box_nm: float) -> DiffusionResult:
    """Slope/6 of the MSD inside the window [d_avg^2, 0.5 (L/2)^2]."""
    lo = d_avg_nm**2
    hi = 0.5 * (box_nm / 2.0) ** 2
    if hi <= lo:
        raise WindowError(
            f"analysis window is empty: box {box_nm:g} nm gives MSD ceiling "
            f"{hi:g} nm^2 below the one-hop floor {lo:g} nm^2; use a larger box"
        )
    inside = (curve.msd_nm2 >= lo) & (curve.msd_nm2 <= hi)
    if inside.sum() < 2:
        raise WindowError(
            f"only {int(inside.sum())} MSD points inside [{lo:g}, {hi:g}] nm^2; "
            "the curve saturates before the window opens; use a larger box "
            "or a longer time grid"
        )
    t = curve.times_us[inside]
    y = curve.msd_nm2[inside]
    sigma = None
    if curve.sem_nm2 is not None and np.all(curve.sem_nm2[inside] > 0):
        sigma = curve.sem_nm2[inside]
    res = fitkit.linear_fit(t, y, sigma=sigma)
    return DiffusionResult(
        d_nm2_per_us=res["slope"] / 6.0,
        sigma=res.sigma("slope") / 6.0,
        window_t_us=(float(t.min()), float(t.max())),
        window_msd_nm2=(lo, hi),
        n_window_points=int(inside.sum()),
        fit=res,
    )


@dataclass
class ExtrapolationResult:
    d_inf_nm2_per_us: float
    sigma: float
    reliable: bool
    fit: fitkit.FitResult

    def to_json(self) -> str:
        return json.dumps(
            {
                "D_inf_nm2_per_us": self.d_inf_nm2_per_us,
                "sigma": self.sigma,
                "reliable": self.reliable,
                "slope_vs_inv_L": self.fit["slope"],
            }
        )


def finite_size_extrapolate(box_sizes_nm, d_values, sigmas=None) -> ExtrapolationResult:
    """Weighted linear fit of D_L vs 1/L; the intercept estimates D at L->inf.

    With only two sizes the fit is exact and its uncertainty meaningless, so
    the result is flagged unreliable.
    """
    L = np.asarray(box_sizes_nm, dtype=float)
    d = np.asarray(d_values, dtype=float)
    if L.size < 2:
        raise fitkit.FitError("extrapolation needs at least two box sizes")
    res = fitkit.linear_fit(1.0 / L, d, sigma=sigmas)
    reliable = L.size > 2 or sigmas is not None
    return ExtrapolationResult(
        d_inf_nm2_per_us=res["intercept"],
        sigma=res.sigma("intercept"),
        reliable=reliable,
        fit=res,
    )


def diffusion_length(d_nm2_per_us: float, tau_us: float) -> float:
    """Diffusion length sqrt(6 D tau), nm."""
    if d_nm2_per_us < 0 or tau_us < 0:
        raise ValueError("diffusion coefficient and time must be nonnegative")
    return math.sqrt(6.0 * d_nm2_per_us * tau_us)


def transport_network(
    density_ppm: float,
    n_p1: int,
    w_mhz: float = 1.36,
    seed: int = 0,
    realization: int = 0,
    exclusion_nm: float = 1.0,
) -> SpinNetwork:
    """A transport box: one polarized NV at the center plus n_p1 addressed P1.

    The box side is (n_p1 / n)^(1/3) so the P1 density is exact; every P1
    carries the addressed group tag.  Site 0 is the NV source.
    """
    n = ppm_to_density(density_ppm)
    if n <= 0:
        raise ValueError("transport needs a positive P1 density")
    box = (n_p1 / n) ** (1.0 / 3.0)
    spec = EnsembleSpec(
        box_nm=box,
        densities_ppm={Species.P1: density_ppm},
        exclusion_nm=exclusion_nm,
        seed=seed,
    )
    center = np.full(3, box / 2)
    for attempt in range(100):
        base = generate_network(spec, realization=realization + 1000 * attempt)
        pos = base.positions
        if len(pos) and np.min(np.linalg.norm(pos - center, axis=1)) < exclusion_nm:
            continue
        sites = [SpinSite(0, center.copy(), Species.NV, NV_AXES[0].copy(), subgroup=0)]
        sites += [
            SpinSite(k + 1, s.position_nm, Species.P1, NV_AXES[0].copy(), subgroup=0)
            for k, s in enumerate(base.sites)
        ]
        net = SpinNetwork(spec=spec, sites=sites, realization=realization)
        if w_mhz > 0:
            net = assign_detunings(net, w_mhz)
        return net
    raise RuntimeError("could not place the source away from the bath in 100 attempts")


def _default_time_grid(t_end_us: float, n_points: int = 48) -> np.ndarray:
    return np.concatenate([[0.0], np.geomspace(max(t_end_us * 1e-4, 1e-3), t_end_us, n_points - 1)])


def average_msd(
    omega_mhz: float,
    density_ppm: float,
    n_p1: int,
    n_realizations: int = 100,
    w_mhz: float = 1.36,
    gamma_mhz: float = 0.15,
    seed: int = 0,
    times_us=None,
) -> tuple:
    """Disorder-averaged MSD curve for one box size.

    When no time grid is given, the grid end is chosen adaptively on the
    first realization so the curve crosses the top of the analysis window.
    Returns (curve, box_nm).
    """
    n = ppm_to_density(density_ppm)
    box = (n_p1 / n) ** (1.0 / 3.0)
    msd_top = 0.5 * (box / 2.0) ** 2

    def one(realization, grid):
        net = transport_network(density_ppm, n_p1, w_mhz=w_mhz, seed=seed, realization=realization)
        rm = build_rates(net, omega_mhz, gamma_mhz)
        p0 = np.zeros(len(net.sites))
        p0[0] = 1.0
        traj = integrate_master_equation(rm, None, p0, grid)
        return msd(traj, net.positions, 0)

    if times_us is None:
        t_end = 100.0
        for _ in range(8):
            probe = one(0, _default_time_grid(t_end))
            if probe.msd_nm2.max() >= msd_top:
                break
            t_end *= 4.0
        times_us = _default_time_grid(t_end)
    else:
        times_us = np.asarray(times_us, dtype=float)

    curves = np.empty((n_realizations, times_us.size))
    totals = np.empty((n_realizations, times_us.size))
    for r in range(n_realizations):
        c = one(r, times_us)
        curves[r] = c.msd_nm2
        totals[r] = c.survival
    mean = np.empty(times_us.size)
    sem = np.empty(times_us.size)
    for k in range(times_us.size):
        mean[k], sem[k] = fitkit.reduce_mean_sem(curves[:, k])
    surv = totals.mean(axis=0)
    return MsdCurve(times_us, mean, surv, sem_nm2=sem), box


@dataclass
class ScalingResult:
    omega_mhz: float
    box_sizes_nm: list
    d_values: list
    d_sigmas: list
    extrapolation: ExtrapolationResult

    def to_json(self) -> str:
        return json.dumps(
            {
                "omega_MHz": self.omega_mhz,
                "L_nm": self.box_sizes_nm,
                "D_L": self.d_values,
                "D_L_sigma": self.d_sigmas,
                "D_inf": self.extrapolation.d_inf_nm2_per_us,
                "sigma": self.extrapolation.sigma,
            }
        )


def diffusion_scaling(
    omega_mhz: float,
    density_ppm: float = 1.575,
    n_list: Sequence[int] = (100, 200, 400, 800),
    n_realizations: int = 100,
    w_mhz: float = 1.36,
    gamma_mhz: float = 0.15,
    seed: int = 0,
) -> ScalingResult:
    """D_L across box sizes plus the 1/L extrapolation to D_inf."""
    d_avg = mean_spacing(density_ppm)
    boxes, ds, sigs = [], [], []
    for n_p1 in n_list:
        curve, box = average_msd(
            omega_mhz,
            density_ppm,
            n_p1,
            n_realizations=n_realizations,
            w_mhz=w_mhz,
            gamma_mhz=gamma_mhz,
            seed=seed + n_p1,
        )
        res = extract_diffusion(curve, d_avg, box)
        boxes.append(float(box))
        ds.append(res.d_nm2_per_us)
        sigs.append(res.sigma if res.sigma > 0 else None)
    sigmas = None if any(s is None for s in sigs) else sigs
    extrap = finite_size_extrapolate(boxes, ds, sigmas)
    return ScalingResult(omega_mhz, boxes, ds, [s or 0.0 for s in sigs], extrap)
