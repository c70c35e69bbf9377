"""Disordered spin-ensemble generation and geometric statistics.

Networks are cubic boxes of point defects (NV and P1 centers) at given
densities, with per-site symmetry axes, an optional hard-core exclusion
radius, and quenched Gaussian detunings.  Construction is deterministic:
every realization derives its own RNG stream from (master seed, realization
index), so realizations are independent and can be generated in any order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional

import numpy as np

from .constants import A_DIAMOND_NM, PPM_TO_PER_NM3

__all__ = [
    "Species",
    "Placement",
    "SpinSite",
    "EnsembleSpec",
    "SpinNetwork",
    "GenerationError",
    "NV_AXES",
    "P1_SUBGROUP_WEIGHTS",
    "ppm_to_density",
    "mean_spacing",
    "generate_network",
    "assign_detunings",
    "nearest_neighbor_stats",
    "empirical_nearest_neighbor",
]


class Species(str, Enum):
    NV = "NV"
    P1 = "P1"


class Placement(str, Enum):
    CONTINUUM = "continuum"
    DIAMOND_LATTICE = "diamond_lattice"


# The four <111> crystal axes, unit-normalized.
NV_AXES = np.array(
    [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float
) / math.sqrt(3)

# Spectral subgroup populations of the P1 center (Jahn-Teller axis choice
# combined with the 14N hyperfine state): five groups weighted 1:3:4:3:1.
P1_SUBGROUP_WEIGHTS = np.array([1, 3, 4, 3, 1], dtype=float) / 12.0

# Conventional diamond cell: fcc sites plus the (1/4,1/4,1/4) sublattice.
_DIAMOND_BASIS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.0, 0.5, 0.5],
        [0.5, 0.0, 0.5],
        [0.5, 0.5, 0.0],
        [0.25, 0.25, 0.25],
        [0.25, 0.75, 0.75],
        [0.75, 0.25, 0.75],
        [0.75, 0.75, 0.25],
    ]
)


class GenerationError(RuntimeError):
    """Raised when a network cannot satisfy its constraints within budget."""


def ppm_to_density(concentration_ppm: float) -> float:
    """Defect concentration in ppm to number density in nm^-3."""
    if concentration_ppm < 0:
        raise ValueError(f"concentration must be nonnegative, got {concentration_ppm}")
    return concentration_ppm * PPM_TO_PER_NM3


def mean_spacing(concentration_ppm: float) -> float:
    """Mean inter-defect spacing d_avg = n^(-1/3), nm."""
    n = ppm_to_density(concentration_ppm)
    if n == 0:
        raise ValueError("mean spacing undefined at zero density")
    return n ** (-1.0 / 3.0)


@dataclass
class SpinSite:
    id: int
    position_nm: np.ndarray
    species: Species
    axis: np.ndarray
    subgroup: int = 0
    detuning_mhz: float = 0.0


@dataclass(frozen=True)
class EnsembleSpec:
    """Recipe for one disordered ensemble.

    ``axis_weights`` optionally pins the axis distribution per species (four
    nonnegative weights over the <111> orientations); the default is uniform.
    ``disorder_mhz`` is the quenched detuning standard deviation applied at
    generation time.
    """

    box_nm: float
    densities_ppm: dict
    placement: Placement = Placement.CONTINUUM
    exclusion_nm: float = 1.0
    disorder_mhz: float = 0.0
    field_axis: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    axis_weights: Optional[dict] = None

    def __post_init__(self):
        if self.box_nm <= 0:
            raise ValueError(f"box length must be positive, got {self.box_nm}")
        if self.exclusion_nm < 0:
            raise ValueError("exclusion radius must be nonnegative")
        if self.disorder_mhz < 0:
            raise ValueError("disorder sigma must be nonnegative")
        norm = {}
        for sp, ppm in self.densities_ppm.items():
            if ppm < 0:
                raise ValueError(f"density for {Species(sp).value} must be nonnegative")
            norm[Species(sp)] = float(ppm)
        object.__setattr__(self, "densities_ppm", norm)
        ax = np.asarray(self.field_axis, dtype=float)
        if ax.shape != (3,) or np.linalg.norm(ax) == 0:
            raise ValueError("field_axis must be a nonzero 3-vector")

    @property
    def field_axis_unit(self) -> np.ndarray:
        ax = np.asarray(self.field_axis, dtype=float)
        return ax / np.linalg.norm(ax)

    def site_count(self, species) -> int:
        ppm = self.densities_ppm.get(Species(species), 0.0)
        return int(round(ppm_to_density(ppm) * self.box_nm**3))


@dataclass
class SpinNetwork:
    spec: EnsembleSpec
    sites: list
    realization: int = 0

    @property
    def positions(self) -> np.ndarray:
        if not self.sites:
            return np.zeros((0, 3))
        return np.array([s.position_nm for s in self.sites])

    @property
    def detunings(self) -> np.ndarray:
        return np.array([s.detuning_mhz for s in self.sites])

    def indices_of(self, species) -> np.ndarray:
        sp = Species(species)
        return np.array([i for i, s in enumerate(self.sites) if s.species == sp], dtype=int)

    def count(self, species) -> int:
        return int(self.indices_of(species).size)

    def min_pair_distance(self) -> float:
        pos = self.positions
        if len(pos) < 2:
            return math.inf
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        return float(np.min(dist[np.triu_indices(len(pos), k=1)]))

    def to_json(self) -> str:
        spec = self.spec
        payload = {
            "spec": {
                "box_nm": spec.box_nm,
                "densities_ppm": {Species(k).value: v for k, v in spec.densities_ppm.items()},
                "placement": spec.placement.value,
                "exclusion_nm": spec.exclusion_nm,
                "disorder_mhz": spec.disorder_mhz,
                "field_axis": list(spec.field_axis),
                "seed": spec.seed,
                "axis_weights": (
                    {Species(k).value: list(v) for k, v in spec.axis_weights.items()}
                    if spec.axis_weights
                    else None
                ),
            },
            "realization": self.realization,
            "sites": [
                {
                    "id": s.id,
                    "xyz_nm": [float(c) for c in s.position_nm],
                    "species": s.species.value,
                    "subgroup": int(s.subgroup),
                    "axis": [float(c) for c in s.axis],
                    "detuning_MHz": float(s.detuning_mhz),
                }
                for s in self.sites
            ],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "SpinNetwork":
        data = json.loads(text)
        sp = data["spec"]
        spec = EnsembleSpec(
            box_nm=sp["box_nm"],
            densities_ppm={Species(k): v for k, v in sp["densities_ppm"].items()},
            placement=Placement(sp["placement"]),
            exclusion_nm=sp["exclusion_nm"],
            disorder_mhz=sp["disorder_mhz"],
            field_axis=tuple(sp["field_axis"]),
            seed=sp["seed"],
            axis_weights=(
                {Species(k): tuple(v) for k, v in sp["axis_weights"].items()}
                if sp.get("axis_weights")
                else None
            ),
        )
        sites = [
            SpinSite(
                id=rec["id"],
                position_nm=np.array(rec["xyz_nm"], dtype=float),
                species=Species(rec["species"]),
                axis=np.array(rec["axis"], dtype=float),
                subgroup=rec["subgroup"],
                detuning_mhz=rec["detuning_MHz"],
            )
            for rec in data["sites"]
        ]
        return cls(spec=spec, sites=sites, realization=data.get("realization", 0))


def _draw_continuum(rng, L):
    return rng.uniform(0.0, L, size=3)


class _LatticeSampler:
    """Uniform sampling without replacement over diamond sites in the box.

    Cells are indexed rather than enumerated, so the box may contain ~1e8
    candidate sites without materializing them; a drawn (cell, basis) code is
    rejected if already used or if the site falls outside the box.
    """

    def __init__(self, L):
        self.L = L
        self.n_cells = max(1, math.ceil(L / A_DIAMOND_NM))
        self.used = set()

    def draw(self, rng):
        code = tuple(rng.integers(0, self.n_cells, size=3)) + (int(rng.integers(0, 8)),)
        if code in self.used:
            return None
        frac = np.array(code[:3], dtype=float) + _DIAMOND_BASIS[code[3]]
        pos = frac * A_DIAMOND_NM
        if np.any(pos >= self.L):
            return None
        self.used.add(code)
        return pos


def generate_network(spec: EnsembleSpec, realization: int = 0) -> SpinNetwork:
    """Build one network realization.

    Site counts are round(density * volume) per species.  Positions violating
    the exclusion radius against any already-placed site are redrawn; the
    total redraw budget is 100x the site count, and exhausting it raises
    :class:`GenerationError` naming the budget.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, realization]))
    L = spec.box_nm
    counts = [(sp, spec.site_count(sp)) for sp in (Species.NV, Species.P1)]
    total = sum(c for _, c in counts)
    budget = 100 * max(total, 1)
    placed = np.zeros((total, 3))
    n_placed = 0
    lattice = _LatticeSampler(L) if spec.placement == Placement.DIAMOND_LATTICE else None

    sites = []
    attempts = 0
    for species, count in counts:
        weights = None
        if spec.axis_weights:
            w = spec.axis_weights.get(species, spec.axis_weights.get(species.value))
            if w is not None:
                w = np.asarray(w, dtype=float)
                if w.min() < 0 or w.sum() == 0:
                    raise ValueError("axis weights must be nonnegative and not all zero")
                weights = w / w.sum()
        for _ in range(count):
            while True:
                attempts += 1
                if attempts > budget:
                    raise GenerationError(
                        f"could not satisfy exclusion radius {spec.exclusion_nm} nm "
                        f"within the retry budget of {budget} draws "
                        f"(100x the {total} requested sites)"
                    )
                pos = lattice.draw(rng) if lattice else _draw_continuum(rng, L)
                if pos is None:
                    continue
                if n_placed and spec.exclusion_nm > 0:
                    d2 = np.sum((placed[:n_placed] - pos) ** 2, axis=1)
                    if d2.min() < spec.exclusion_nm**2:
                        continue
                break
            placed[n_placed] = pos
            n_placed += 1
            axis_idx = int(rng.choice(4, p=weights))
            if species == Species.P1:
                subgroup = int(rng.choice(5, p=P1_SUBGROUP_WEIGHTS))
            else:
                subgroup = axis_idx
            sites.append(
                SpinSite(
                    id=len(sites),
                    position_nm=pos.copy(),
                    species=species,
                    axis=NV_AXES[axis_idx].copy(),
                    subgroup=subgroup,
                )
            )

    net = SpinNetwork(spec=spec, sites=sites, realization=realization)
    if spec.disorder_mhz > 0:
        net = assign_detunings(net, spec.disorder_mhz, rng=rng)
    return net


def assign_detunings(net: SpinNetwork, sigma_mhz: float, seed=None, rng=None) -> SpinNetwork:
    """Return a copy of ``net`` with fresh quenched Gaussian detunings.

    Detunings are drawn once and stay fixed for the network's lifetime.
    Either an explicit ``seed`` or an already-running ``rng`` stream selects
    the draw; with neither, the network's own (seed, realization) stream is
    extended deterministically.
    """
    if sigma_mhz < 0:
        raise ValueError("detuning sigma must be nonnegative")
    if rng is None:
        entropy = [net.spec.seed, net.realization, 1] if seed is None else [seed]
        rng = np.random.default_rng(np.random.SeedSequence(entropy))
    deltas = rng.normal(0.0, sigma_mhz, size=len(net.sites)) if sigma_mhz > 0 else np.zeros(len(net.sites))
    sites = [replace(s, detuning_mhz=float(d)) for s, d in zip(net.sites, deltas)]
    return SpinNetwork(spec=net.spec, sites=sites, realization=net.realization)


@dataclass
class NeighborStats:
    d_nn_nm: float
    fraction_within: float


def nearest_neighbor_stats(density_ppm: float, radius_nm: float = 0.0) -> NeighborStats:
    """Poisson nearest-neighbor statistics at the given density.

    d_NN = Gamma(4/3) * (4 pi n / 3)^(-1/3) (= 0.55396 n^(-1/3)) and the
    probability of finding at least one neighbor within ``radius_nm``.
    """
    if density_ppm <= 0:
        raise ValueError("nearest-neighbor distance undefined at zero density")
    if radius_nm < 0:
        raise ValueError("radius must be nonnegative")
    n = ppm_to_density(density_ppm)
    d_nn = math.gamma(4.0 / 3.0) * (4.0 * math.pi * n / 3.0) ** (-1.0 / 3.0)
    fraction = 1.0 - math.exp(-(4.0 / 3.0) * math.pi * radius_nm**3 * n)
    return NeighborStats(d_nn_nm=d_nn, fraction_within=fraction)


def empirical_nearest_neighbor(net: SpinNetwork, margin_nm: float = 0.0) -> np.ndarray:
    """Per-site nearest-neighbor distances, restricted to interior sites.

    Sites closer than ``margin_nm`` to a box face are excluded as reference
    points (their true nearest neighbor may lie outside the box), but all
    sites count as candidate neighbors.
    """
    pos = net.positions
    if len(pos) < 2:
        return np.zeros(0)
    L = net.spec.box_nm
    interior = np.all((pos >= margin_nm) & (pos <= L - margin_nm), axis=1)
    if not np.any(interior):
        return np.zeros(0)
    diff = pos[interior][:, None, :] - pos[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    dist[dist == 0] = np.inf
    return dist.min(axis=1)
