"""Exact stationary distributions for small instances.

Two routes: a closed form for the single-site reduction (a birth-death chain
in the mass coordinate) and a numerical solve of the truncated master
equation for tiny lattices.  Both serve as ground truth for the stochastic
engine; the truncation is monitored through the probability trapped at the
mass cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import Geometry, Params, neighbor_table

STATE_COUNT_GUARD = 1_000_000
DENSE_SOLVE_CUTOFF = 10_000


class NoStationaryLawError(ValueError):
    """The requested chain is not positive recurrent (q >= p on one site)."""


class StationarySolveError(RuntimeError):
    """The linear solve failed or left too large a residual."""


@dataclass(frozen=True)
class SingleSiteLaw:
    """Geometric stationary law of the single-site chain.

    With one site a hop is a no-op, so the mass performs a birth-death chain
    with constant birth rate q and death rate p, giving
    pi_m = (1 - r) * r**m with r = q/p and mean q/(p - q).
    """

    p: float
    q: float

    @property
    def r(self) -> float:
        return self.q / self.p

    @property
    def mean(self) -> float:
        return self.q / (self.p - self.q)

    @property
    def density(self) -> float:
        """Probability of occupation, P(m >= 1) = q/p."""
        return self.r

    def pmf(self, m: int) -> float:
        return (1.0 - self.r) * self.r**m

    def pmf_array(self, m_max: int) -> np.ndarray:
        r = self.r
        return (1.0 - r) * r ** np.arange(m_max + 1)


def single_site_stationary(p: float, q: float) -> SingleSiteLaw:
    """Closed-form single-site law; requires q < p for positive recurrence."""
    if q < 0.0 or p < 0.0:
        raise ValueError("rates must be non-negative")
    if q >= p:
        raise NoStationaryLawError(
            f"single site has no stationary law for q={q} >= p={p}"
        )
    return SingleSiteLaw(p=p, q=q)


class TruncatedStateSpace:
    """Enumeration of mass configurations with every site capped at m_max.

    States are tuples (m_0, ..., m_{S-1}) in {0..m_max}^S indexed in mixed
    radix: index = sum_i m_i * (m_max+1)**i.
    """

    def __init__(self, geom: Geometry, m_max: int):
        if m_max < 1:
            raise ValueError("mass cutoff must be >= 1")
        self.geom = geom
        self.m_max = m_max
        self.base = m_max + 1
        n = self.base**geom.n_sites
        if n > STATE_COUNT_GUARD:
            raise ValueError(
                f"state count {n} exceeds enumeration guard {STATE_COUNT_GUARD}"
            )
        self.n_states = n
        self._strides = [self.base**i for i in range(geom.n_sites)]

    def encode(self, masses) -> int:
        idx = 0
        for m, stride in zip(masses, self._strides):
            if not (0 <= m <= self.m_max):
                raise ValueError(f"mass {m} outside truncation [0, {self.m_max}]")
            idx += m * stride
        return idx

    def decode(self, idx: int) -> tuple[int, ...]:
        if not (0 <= idx < self.n_states):
            raise ValueError(f"state index {idx} out of range")
        out = []
        for _ in range(self.geom.n_sites):
            idx, m = divmod(idx, self.base)
            out.append(m)
        return tuple(out)

    def site_digits(self, site: int) -> np.ndarray:
        """Mass at one site for every state index, vectorized."""
        idx = np.arange(self.n_states, dtype=np.int64)
        return (idx // self._strides[site]) % self.base


def build_generator(space: TruncatedStateSpace, params: Params) -> sp.csr_matrix:
    """Sparse CTMC generator on the truncated space, row sums zero.

    Coalescence or deposition that would push a mass past the cutoff clamps
    the result to m_max; a deposition onto a site already at the cutoff is
    absorbed by the clamp (no transition), which is what the cap-probability
    monitor quantifies.
    """
    geom = space.geom
    S = geom.n_sites
    base = space.base
    m_max = space.m_max
    strides = space._strides
    p, q = params.p, params.q
    nbr = neighbor_table(geom)
    hop_rate = 1.0 / geom.n_directions

    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    diag = np.zeros(space.n_states)

    for idx in range(space.n_states):
        masses = space.decode(idx)
        out_rate = 0.0
        for x in range(S):
            mx = masses[x]
            if mx >= 1:
                if p > 0.0:
                    rows.append(idx)
                    cols.append(idx - strides[x])
                    vals.append(p)
                    out_rate += p
                for y in nbr[x]:
                    if y == x:  # single-site reduction: hop is a no-op
                        continue
                    my = masses[y]
                    new_my = min(mx + my, m_max)
                    rows.append(idx)
                    cols.append(idx - mx * strides[x] + (new_my - my) * strides[y])
                    vals.append(hop_rate)
                    out_rate += hop_rate
            if q > 0.0 and mx < m_max:
                rows.append(idx)
                cols.append(idx + strides[x])
                vals.append(q)
                out_rate += q
        diag[idx] = -out_rate

    n = space.n_states
    Q = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    Q += sp.diags(diag, format="csr")
    return Q


@dataclass
class StationaryDist:
    """Stationary probabilities with the truncation-error monitor attached."""

    space: TruncatedStateSpace
    probs: np.ndarray
    cap_mass: float
    residual: float


def stationary_solve(
    space: TruncatedStateSpace,
    Q: sp.csr_matrix,
    dense_cutoff: int = DENSE_SOLVE_CUTOFF,
) -> StationaryDist:
    """Solve pi Q = 0 with sum(pi) = 1 by replacing one balance equation.

    Dense LAPACK below ``dense_cutoff`` states, sparse LU above.  The result
    is validated: residual max|pi Q| below 1e-10 and no significantly
    negative entries.
    """
    n = Q.shape[0]
    b = np.zeros(n)
    b[-1] = 1.0
    if n <= dense_cutoff:
        A = Q.toarray().T
        A[-1, :] = 1.0
        try:
            pi = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise StationarySolveError(f"dense solve failed: {exc}") from exc
    else:
        qt = Q.T.tocoo()
        keep = qt.row != n - 1
        rows = np.concatenate([qt.row[keep], np.full(n, n - 1, dtype=qt.row.dtype)])
        cols = np.concatenate([qt.col[keep], np.arange(n, dtype=qt.col.dtype)])
        vals = np.concatenate([qt.data[keep], np.ones(n)])
        A = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()
        try:
            pi = spla.spsolve(A, b)
        except Exception as exc:
            raise StationarySolveError(f"sparse solve failed: {exc}") from exc
    if not np.all(np.isfinite(pi)):
        raise StationarySolveError("solve produced non-finite probabilities")
    if pi.min() < -1e-9:
        raise StationarySolveError(
            f"solve produced negative probability {pi.min():.3e}"
        )
    pi = np.clip(pi, 0.0, None)
    total = pi.sum()
    if not math.isfinite(total) or total <= 0.0:
        raise StationarySolveError("solve produced a non-normalizable vector")
    pi = pi / total
    residual = float(np.abs(pi @ Q).max())
    if residual >= 1e-10:
        raise StationarySolveError(f"stationarity residual {residual:.3e} too large")

    cap = np.zeros(n, dtype=bool)
    for site in range(space.geom.n_sites):
        cap |= space.site_digits(site) == space.m_max
    cap_mass = float(pi[cap].sum())
    return StationaryDist(space=space, probs=pi, cap_mass=cap_mass, residual=residual)


def site_marginal(dist: StationaryDist, site: int = 0) -> np.ndarray:
    """Stationary law of the mass at one site (any site, by translation)."""
    digits = dist.space.site_digits(site)
    return np.bincount(digits, weights=dist.probs, minlength=dist.space.base)


def expected_site_mass(dist: StationaryDist, site: int = 0) -> float:
    marg = site_marginal(dist, site)
    return float(marg @ np.arange(marg.size))


def expected_total_mass(dist: StationaryDist) -> float:
    return sum(expected_site_mass(dist, x) for x in range(dist.space.geom.n_sites))


def solve_lattice(
    geom: Geometry, params: Params, m_max: int
) -> StationaryDist:
    """Convenience wrapper: build the truncated generator and solve it."""
    space = TruncatedStateSpace(geom, m_max)
    Q = build_generator(space, params)
    return stationary_solve(space, Q)
