"""Spin operators, dipolar couplings, and cluster Hamiltonian construction.

Every site is an effective spin-1/2 (the NV is restricted to its {|0>,|-1>}
pair, which is why NV couplings pick up sqrt(2) factors).  Hamiltonians are
dense complex matrices in MHz on the 2^N tensor-product space; the 2*pi
enters only at propagation time.

Two frames are built here.  In the lab-secular frame, pairs with matching
transition frequencies keep their flip-flop terms and all other pairs reduce
to Ising couplings along z.  Under continuous driving (spin locking) the
roles are played by the tilted ladder operators S~+- = S^y +- i S^z, and the
surviving couplings are the dressed flip-flop terms plus an Ising term along
the drive axis x.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Mapping, Optional, Sequence

import numpy as np

from .constants import J0_MHZ_NM3
from .network import Species, SpinSite

__all__ = [
    "Frame",
    "SpinOperatorSet",
    "ClusterHamiltonian",
    "dipolar_coupling",
    "nv_scaling",
    "pair_coupling",
    "is_heterogeneous",
    "build_secular_intra",
    "build_ising_inter",
    "build_dressed_intra",
    "build_dressed_inter",
    "build_cluster_hamiltonian",
    "effective_rabi",
    "tilt_projection",
    "effective_disorder",
]

_SX = np.array([[0, 1], [1, 0]], dtype=complex) / 2
_SY = np.array([[0, -1j], [1j, 0]], dtype=complex) / 2
_SZ = np.array([[1, 0], [0, -1]], dtype=complex) / 2
_ID = np.eye(2, dtype=complex)


class Frame(str, Enum):
    LAB_SECULAR = "lab_secular"
    DRESSED = "dressed"


def _embed(op: np.ndarray, site: int, n: int) -> np.ndarray:
    left = np.eye(2**site, dtype=complex)
    right = np.eye(2 ** (n - site - 1), dtype=complex)
    return np.kron(np.kron(left, op), right)


class SpinOperatorSet:
    """Per-site spin-1/2 operators embedded in the 2^n product space."""

    def __init__(self, n_sites: int):
        if n_sites < 1:
            raise ValueError("need at least one site")
        self.n_sites = n_sites
        self.dim = 2**n_sites
        self.sx = [_embed(_SX, i, n_sites) for i in range(n_sites)]
        self.sy = [_embed(_SY, i, n_sites) for i in range(n_sites)]
        self.sz = [_embed(_SZ, i, n_sites) for i in range(n_sites)]
        self.sp = [x + 1j * y for x, y in zip(self.sx, self.sy)]
        self.sm = [x - 1j * y for x, y in zip(self.sx, self.sy)]
        # tilted-frame ladder operators, raising/lowering along the drive axis
        self.tp = [y + 1j * z for y, z in zip(self.sy, self.sz)]
        self.tm = [y - 1j * z for y, z in zip(self.sy, self.sz)]

    @property
    def total_sx(self) -> np.ndarray:
        return sum(self.sx)

    @property
    def total_sz(self) -> np.ndarray:
        return sum(self.sz)


@lru_cache(maxsize=8)
def operator_set(n_sites: int) -> SpinOperatorSet:
    return SpinOperatorSet(n_sites)


@dataclass
class ClusterHamiltonian:
    """Dense Hermitian cluster Hamiltonian in MHz with its frame tag."""

    matrix: np.ndarray
    frame: Frame
    n_sites: int
    couplings: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.shape != (2**self.n_sites, 2**self.n_sites):
            raise ValueError("matrix dimension must be 2^n_sites")
        scale = max(np.abs(m).max(), 1.0)
        if np.abs(m - m.conj().T).max() > 1e-12 * scale:
            raise ValueError("cluster Hamiltonian must be Hermitian")
        self.matrix = m

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def to_json(self) -> str:
        return json.dumps(
            {
                "frame": self.frame.value,
                "n_sites": self.n_sites,
                "real": self.matrix.real.tolist(),
                "imag": self.matrix.imag.tolist(),
                "couplings": {f"{i},{j}": v for (i, j), v in self.couplings.items()},
            }
        )


def dipolar_coupling(r_vec, quant_axis) -> float:
    """Bare dipolar coupling J0 (1 - 3 cos^2 theta) / r^3, MHz.

    ``theta`` is the angle between the pair separation and the quantization
    axis set by the static field.
    """
    r_vec = np.asarray(r_vec, dtype=float)
    r = float(np.linalg.norm(r_vec))
    if r == 0:
        raise ValueError("dipolar coupling diverges at zero separation")
    axis = np.asarray(quant_axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    cos = float(np.dot(r_vec, axis)) / r
    return J0_MHZ_NM3 * (1.0 - 3.0 * cos**2) / r**3


def nv_scaling(j_mhz: float, n_nv_participants: int) -> float:
    """Scale a coupling by sqrt(2) per NV participant (0, 1 or 2)."""
    if n_nv_participants not in (0, 1, 2):
        raise ValueError("a pair coupling has 0, 1 or 2 NV participants")
    return j_mhz * math.sqrt(2.0) ** n_nv_participants


def pair_coupling(site_i: SpinSite, site_j: SpinSite, quant_axis) -> float:
    """NV-scaled dipolar coupling between two sites, MHz."""
    j = dipolar_coupling(site_j.position_nm - site_i.position_nm, quant_axis)
    n_nv = (site_i.species == Species.NV) + (site_j.species == Species.NV)
    return nv_scaling(j, n_nv)


def is_heterogeneous(site_i: SpinSite, site_j: SpinSite) -> bool:
    """True when the pair's transition frequencies differ (species, axis or
    spectral subgroup mismatch), leaving only the Ising part resonant."""
    if site_i.species != site_j.species:
        return True
    if not np.allclose(site_i.axis, site_j.axis):
        return True
    return site_i.subgroup != site_j.subgroup


def _coupling_map(sites, quant_axis, couplings):
    if couplings is not None:
        return {tuple(sorted(k)): float(v) for k, v in couplings.items()}
    if quant_axis is None:
        raise ValueError("need a quantization axis to compute couplings")
    n = len(sites)
    return {
        (i, j): pair_coupling(sites[i], sites[j], quant_axis)
        for i in range(n)
        for j in range(i + 1, n)
    }


def build_secular_intra(
    sites: Sequence[SpinSite],
    quant_axis=None,
    couplings: Optional[Mapping] = None,
) -> ClusterHamiltonian:
    """Secular Hamiltonian of a degenerate (same species and axis) group.

    H = sum_ij [ -(J_ij/4)(S+S- + S-S+) + J_ij Sz Sz ].
    """
    for a in sites[1:]:
        if is_heterogeneous(sites[0], a):
            raise ValueError("secular intra-group form requires identical species and axis")
    n = len(sites)
    cmap = _coupling_map(sites, quant_axis, couplings)
    ops = operator_set(n)
    h = np.zeros((2**n, 2**n), dtype=complex)
    for (i, j), jij in cmap.items():
        h += -(jij / 4.0) * (ops.sp[i] @ ops.sm[j] + ops.sm[i] @ ops.sp[j])
        h += jij * (ops.sz[i] @ ops.sz[j])
    return ClusterHamiltonian(h, Frame.LAB_SECULAR, n, dict(cmap))


def build_ising_inter(
    sites: Sequence[SpinSite],
    quant_axis=None,
    couplings: Optional[Mapping] = None,
    pairs: Optional[Sequence] = None,
) -> ClusterHamiltonian:
    """Ising Hamiltonian H = sum_ij J_ij Sz Sz over heterogeneous pairs.

    With no explicit ``pairs`` every pair is used and must be heterogeneous.
    """
    n = len(sites)
    cmap = _coupling_map(sites, quant_axis, couplings)
    use = [tuple(sorted(p)) for p in pairs] if pairs is not None else list(cmap)
    for i, j in use:
        if not is_heterogeneous(sites[i], sites[j]):
            raise ValueError(
                f"sites {i} and {j} form a degenerate pair; the Ising-only form does not apply"
            )
    ops = operator_set(n)
    h = np.zeros((2**n, 2**n), dtype=complex)
    for i, j in use:
        h += cmap[i, j] * (ops.sz[i] @ ops.sz[j])
    return ClusterHamiltonian(h, Frame.LAB_SECULAR, n, {p: cmap[p] for p in use})


def build_dressed_intra(
    sites: Sequence[SpinSite],
    quant_axis=None,
    couplings: Optional[Mapping] = None,
) -> ClusterHamiltonian:
    """Dressed-frame Hamiltonian of a degenerate group under matched driving.

    H = sum_ij [ (J_ij/8)(S~+S~- + S~-S~+) - (J_ij/2) Sx Sx ].
    """
    for a in sites[1:]:
        if is_heterogeneous(sites[0], a):
            raise ValueError("dressed intra-group form requires identical species and axis")
    n = len(sites)
    cmap = _coupling_map(sites, quant_axis, couplings)
    ops = operator_set(n)
    h = np.zeros((2**n, 2**n), dtype=complex)
    for (i, j), jij in cmap.items():
        h += (jij / 8.0) * (ops.tp[i] @ ops.tm[j] + ops.tm[i] @ ops.tp[j])
        h += -(jij / 2.0) * (ops.sx[i] @ ops.sx[j])
    return ClusterHamiltonian(h, Frame.DRESSED, n, dict(cmap))


def build_dressed_inter(
    sites: Sequence[SpinSite],
    quant_axis=None,
    couplings: Optional[Mapping] = None,
    pairs: Optional[Sequence] = None,
) -> ClusterHamiltonian:
    """Dressed-frame exchange between distinct groups at matched Rabi rates.

    H = sum_ij (J_ij/4)(S~+S~- + S~-S~+).
    """
    n = len(sites)
    cmap = _coupling_map(sites, quant_axis, couplings)
    use = [tuple(sorted(p)) for p in pairs] if pairs is not None else list(cmap)
    ops = operator_set(n)
    h = np.zeros((2**n, 2**n), dtype=complex)
    for i, j in use:
        h += (cmap[i, j] / 4.0) * (ops.tp[i] @ ops.tm[j] + ops.tm[i] @ ops.tp[j])
    return ClusterHamiltonian(h, Frame.DRESSED, n, {p: cmap[p] for p in use})


def build_cluster_hamiltonian(
    sites: Sequence[SpinSite],
    quant_axis,
    frame: Frame,
    couplings: Optional[Mapping] = None,
) -> ClusterHamiltonian:
    """Full cluster Hamiltonian with per-pair classification.

    Degenerate pairs take the intra-group form, all others the inter-group
    form, in the requested frame.
    """
    n = len(sites)
    cmap = _coupling_map(sites, quant_axis, couplings)
    ops = operator_set(n)
    h = np.zeros((2**n, 2**n), dtype=complex)
    for (i, j), jij in cmap.items():
        if is_heterogeneous(sites[i], sites[j]):
            if frame == Frame.DRESSED:
                h += (jij / 4.0) * (ops.tp[i] @ ops.tm[j] + ops.tm[i] @ ops.tp[j])
            else:
                h += jij * (ops.sz[i] @ ops.sz[j])
        else:
            if frame == Frame.DRESSED:
                h += (jij / 8.0) * (ops.tp[i] @ ops.tm[j] + ops.tm[i] @ ops.tp[j])
                h += -(jij / 2.0) * (ops.sx[i] @ ops.sx[j])
            else:
                h += -(jij / 4.0) * (ops.sp[i] @ ops.sm[j] + ops.sm[i] @ ops.sp[j])
                h += jij * (ops.sz[i] @ ops.sz[j])
    return ClusterHamiltonian(h, frame, n, dict(cmap))


def effective_rabi(omega_mhz: float, detuning_mhz: float) -> float:
    """Generalized Rabi frequency sqrt(Omega^2 + delta^2), MHz."""
    return math.hypot(omega_mhz, detuning_mhz)


def tilt_projection(omega_mhz: float, detuning_mhz: float) -> float:
    """sin(theta) = Omega / Omega_eff, the transverse projection of a
    detuned dressed spin (1 on resonance, 0 at zero drive)."""
    eff = effective_rabi(omega_mhz, detuning_mhz)
    if eff == 0:
        raise ValueError("tilt undefined with zero drive and zero detuning")
    return omega_mhz / eff


def effective_disorder(w_mhz: float, omega_mhz: float) -> float:
    """Second-order dressed-frame disorder W^2 / (2 Omega), MHz."""
    if omega_mhz <= 0:
        raise ValueError("drive amplitude must be positive")
    return w_mhz**2 / (2.0 * omega_mhz)
