"""Lattice state and transition rules for the coalescence-evaporation-deposition gas.

Particles carry integer masses and live on a periodic d-dimensional lattice,
at most one particle per site.  Three dynamics act on the state:

* hop: a particle jumps at total rate 1 to a uniformly chosen neighbour slot;
  landing on an occupied site merges the two particles (masses add).
* evaporate: at rate p per particle the mass drops by one; a monomer vanishes.
* deposit: at rate q per site a monomer arrives, merging with any occupant.

Everything else in the package (simulator, exact solver, phase scans) treats
this module as the single definition of the dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

HOP = "hop"
EVAPORATE = "evaporate"
DEPOSIT = "deposit"

EVENT_KINDS = (HOP, EVAPORATE, DEPOSIT)

# Per-site masses are kept within the signed 64-bit range so states can be
# exported to numpy arrays and serialized without surprises.
MASS_LIMIT = 2**63 - 1


class MassOverflowError(RuntimeError):
    """A site mass would exceed the 64-bit limit; the run must abort."""


@dataclass(frozen=True)
class Geometry:
    """Periodic hypercubic lattice: ``L**d`` sites, 2d neighbour slots each.

    ``L == 1`` is permitted for the single-site reduction, where every hop
    targets the particle's own site and acts as a no-op.
    """

    d: int
    L: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"dimension must be >= 1, got d={self.d}")
        if self.L < 1:
            raise ValueError(f"side length must be >= 1, got L={self.L}")

    @property
    def n_sites(self) -> int:
        return self.L**self.d

    @property
    def n_directions(self) -> int:
        return 2 * self.d


@dataclass(frozen=True)
class Params:
    """Evaporation rate per particle (p) and deposition rate per site (q)."""

    p: float
    q: float

    def __post_init__(self):
        if not (self.p >= 0.0):
            raise ValueError(f"evaporation rate must be >= 0, got p={self.p}")
        if not (self.q >= 0.0):
            raise ValueError(f"deposition rate must be >= 0, got q={self.q}")


@dataclass
class Event:
    """One transition: kind, source site, and neighbour slot for hops."""

    kind: str
    site: int
    direction: int | None = None


@lru_cache(maxsize=None)
def neighbor_table(geom: Geometry) -> tuple[tuple[int, ...], ...]:
    """neighbors[site][slot] for slots (+e_0, -e_0, +e_1, -e_1, ...).

    Under periodicity with L == 2 both slots of an axis point at the same
    site, and with L == 1 they point back at the site itself; the table keeps
    that multiplicity so uniform slot sampling stays exact.
    """
    d, L = geom.d, geom.L
    sites = geom.n_sites
    table = []
    for s in range(sites):
        row = []
        for axis in range(d):
            stride = L**axis
            coord = (s // stride) % L
            up = s + ((coord + 1) % L - coord) * stride
            down = s + ((coord - 1) % L - coord) * stride
            row.append(up)
            row.append(down)
        table.append(tuple(row))
    return tuple(table)


def shift_site(geom: Geometry, site: int, delta: tuple[int, ...]) -> int:
    """Translate a site index by a lattice vector (cyclically per axis)."""
    L = geom.L
    out = 0
    for axis in range(geom.d):
        stride = L**axis
        coord = (site // stride) % L
        out += ((coord + delta[axis]) % L) * stride
    return out


class LatticeState:
    """Site masses plus a dense index of occupied sites.

    ``occupied`` lists the occupied site indices in arbitrary order and
    ``slot_of[site]`` holds each site's position in that list (-1 if empty),
    so uniform particle sampling and removals are O(1).
    """

    __slots__ = ("geom", "mass", "occupied", "slot_of", "total_mass")

    def __init__(self, geom: Geometry):
        self.geom = geom
        self.mass: list[int] = [0] * geom.n_sites
        self.occupied: list[int] = []
        self.slot_of: list[int] = [-1] * geom.n_sites
        self.total_mass: int = 0

    @property
    def particle_count(self) -> int:
        return len(self.occupied)

    def copy(self) -> "LatticeState":
        other = LatticeState.__new__(LatticeState)
        other.geom = self.geom
        other.mass = list(self.mass)
        other.occupied = list(self.occupied)
        other.slot_of = list(self.slot_of)
        other.total_mass = self.total_mass
        return other

    def masses_by_site(self) -> list[int]:
        return list(self.mass)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LatticeState):
            return NotImplemented
        # occupied-list order is an implementation detail, not state identity
        return (
            self.geom == other.geom
            and self.mass == other.mass
            and self.total_mass == other.total_mass
            and sorted(self.occupied) == sorted(other.occupied)
        )

    def check_invariants(self) -> None:
        """Raise AssertionError if the redundant bookkeeping disagrees."""
        occ = set(self.occupied)
        assert len(occ) == len(self.occupied), "duplicate entries in occupied list"
        for x, m in enumerate(self.mass):
            assert m >= 0, f"negative mass at site {x}"
            if m > 0:
                assert x in occ, f"site {x} has mass {m} but is not indexed"
                assert self.occupied[self.slot_of[x]] == x
            else:
                assert x not in occ, f"empty site {x} is indexed as occupied"
                assert self.slot_of[x] == -1
        assert self.total_mass == sum(self.mass)


def new_lattice(geom: Geometry) -> LatticeState:
    """All-empty initial state (the process converges from any start)."""
    return LatticeState(geom)


def _add_occupied(state: LatticeState, site: int) -> None:
    state.slot_of[site] = len(state.occupied)
    state.occupied.append(site)


def _remove_occupied(state: LatticeState, site: int) -> None:
    i = state.slot_of[site]
    last = state.occupied.pop()
    if last != site:
        state.occupied[i] = last
        state.slot_of[last] = i
    state.slot_of[site] = -1


def apply_event(state: LatticeState, ev: Event) -> LatticeState:
    """Apply one transition in place and return the state.

    Hops move the full mass; landing on an occupied site coalesces the two
    particles into one carrying the summed mass.  Evaporation removes one
    mass unit (a monomer disappears entirely).  Deposition adds a monomer,
    merging with any occupant.  Total mass changes by 0 / -1 / +1 for
    hop / evaporate / deposit respectively.
    """
    kind = ev.kind
    mass = state.mass
    if kind == HOP:
        src = ev.site
        m = mass[src]
        if m <= 0:
            raise ValueError(f"hop from empty site {src} (caller bug)")
        target = neighbor_table(state.geom)[src][ev.direction]
        if target == src:  # L == 1: hop onto itself is a no-op
            return state
        mt = mass[target]
        if mt > 0:
            merged = mt + m
            if merged > MASS_LIMIT:
                raise MassOverflowError(
                    f"coalescence at site {target} would produce mass {merged}"
                )
            mass[target] = merged
            mass[src] = 0
            _remove_occupied(state, src)
        else:
            mass[target] = m
            mass[src] = 0
            i = state.slot_of[src]
            state.occupied[i] = target
            state.slot_of[target] = i
            state.slot_of[src] = -1
    elif kind == EVAPORATE:
        site = ev.site
        m = mass[site]
        if m <= 0:
            raise ValueError(f"evaporation at empty site {site} (caller bug)")
        mass[site] = m - 1
        state.total_mass -= 1
        if m == 1:
            _remove_occupied(state, site)
    elif kind == DEPOSIT:
        site = ev.site
        m = mass[site]
        if m == 0:
            mass[site] = 1
            _add_occupied(state, site)
        else:
            if m + 1 > MASS_LIMIT:
                raise MassOverflowError(
                    f"deposition at site {site} would produce mass {m + 1}"
                )
            mass[site] = m + 1
        state.total_mass += 1
    else:
        raise ValueError(f"unknown event kind {kind!r}")
    return state


def total_rate(state: LatticeState, params: Params) -> float:
    """Total jump rate N*(1+p) + S*q; zero only in the absorbing empty state."""
    n = len(state.occupied)
    return n * (1.0 + params.p) + state.geom.n_sites * params.q
