"""Time evolution, energy moments and the time-averaged tail functionals."""

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from src.components.errors import GeometryError, ValidationError
from src.models.operator import BandedUnitary, FullLine, Geometry
from src.models.profiles import DEFAULT_PROFILE, Profile, theorem_rate

logger = logging.getLogger(__name__)

# Tolerances on the orthogonal decomposition ξ = η + ψ.
ORTHOGONALITY_TOL = 1e-12
UNIT_NORM_TOL = 1e-10

# Smallest half-line window the operator builder accepts.
MIN_DIMENSION = 8


def required_dimension(n_steps: int) -> int:
    """Half-line dimension 2·n_steps + 4 on which n_steps from φ_1 are exact."""
    if n_steps < 0:
        raise ValidationError(f"n_steps must be >= 0, got {n_steps}", "n_steps")
    return 2 * n_steps + 4


def evolution_dimension(n_steps: int) -> int:
    """`required_dimension` raised to the smallest window the builders accept."""
    return max(required_dimension(n_steps), MIN_DIMENSION)


@dataclass(frozen=True)
class StateVector:
    """Amplitudes over the sites of an operator window after n steps."""

    amplitudes: np.ndarray
    geometry: Geometry
    n: int = 0

    @classmethod
    def basis(cls, geometry: Geometry, site: int = 1) -> "StateVector":
        """The unit vector φ_site."""
        amplitudes = np.zeros(geometry.n_dim, dtype=complex)
        amplitudes[geometry.index(site)] = 1.0
        return cls(amplitudes, geometry)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def positions(self) -> np.ndarray:
        """Site weights entering X: k on the half line, |k| on the full line."""
        sites = self.geometry.sites()
        return np.abs(sites) if isinstance(self.geometry, FullLine) else sites

    def support(self) -> tuple[int, int]:
        """Smallest and largest occupied site."""
        occupied = np.flatnonzero(self.amplitudes)
        if occupied.size == 0:
            return self.geometry.first_site, self.geometry.first_site
        sites = self.geometry.sites()
        return int(sites[occupied[0]]), int(sites[occupied[-1]])


def _check_geometry(u: BandedUnitary, psi: StateVector) -> None:
    if u.geometry != psi.geometry:
        raise GeometryError(
            f"State geometry {psi.geometry} does not match operator {u.geometry}"
        )


def check_light_cone(u: BandedUnitary, psi: StateVector, n_steps: int) -> None:
    """Refuses evolutions whose light cone would reach a cut of the window.

    Raises:
        ValidationError: If the window is too small for n_steps.
    """
    lowest, highest = psi.support()
    reach = 2 * n_steps + 2
    too_high = highest + reach > u.geometry.last_site
    too_low = (
        isinstance(u.geometry, FullLine) and lowest - reach < u.geometry.first_site
    )
    if too_high or too_low:
        raise ValidationError(
            f"Dimension {u.n_dim} too small for {n_steps} steps from sites "
            f"[{lowest}, {highest}] (half line from φ_1 needs "
            f"{evolution_dimension(n_steps)})",
            "n_dim",
        )


def step(u: BandedUnitary, psi: StateVector) -> StateVector:
    """Returns Uψ with the step counter incremented."""
    _check_geometry(u, psi)
    return StateVector(u.matvec(psi.amplitudes), psi.geometry, psi.n + 1)


def tail_mass(psi: StateVector, a: float) -> float:
    """Σ_{k ≥ a} |ψ_k|² (|k| ≥ a on the full line)."""
    mask = psi.positions() >= a
    return float(np.sum(psi.probabilities()[mask]))


def head_mass(psi: StateVector, a: float) -> float:
    """Σ_{k < a} |ψ_k|², the complement of `tail_mass`."""
    mask = psi.positions() < a
    return float(np.sum(psi.probabilities()[mask]))


@dataclass
class MomentSeries:
    """Per-step moments ⟨ψ(n), X^m ψ(n)⟩ with norm and tail columns.

    Columns: n, x<m> for each order m, norm, tail_mass (mass at sites
    ≥ n/f(n)) and, after `instability_ratio`, ratio_F and ratio_f5.
    """

    frame: pd.DataFrame
    profile: Profile
    orders: tuple[int, ...]

    def column(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy()


def evolve_moments(
    u: BandedUnitary,
    psi0: StateVector,
    n_max: int,
    orders: Sequence[int] = (1, 2),
    profile: Profile = DEFAULT_PROFILE,
) -> MomentSeries:
    """Evolves ψ0 for n_max steps and records the requested moments.

    Args:
        u: Operator truncation.
        psi0: Initial state.
        n_max: Number of steps.
        orders: Moment orders m.
        profile: Profile f used for the tail_mass threshold n/f(n).

    Returns:
        The moment series with rows n = 0..n_max.

    Raises:
        ValidationError: If the window is smaller than the light cone.
    """
    _check_geometry(u, psi0)
    check_light_cone(u, psi0, n_max)
    positions = psi0.positions().astype(float)
    powers = {m: positions**m for m in orders}
    rows = []
    psi = psi0
    for n in range(n_max + 1):
        probabilities = psi.probabilities()
        row = {"n": n}
        for m in orders:
            row[f"x{m}"] = float(probabilities @ powers[m])
        row["norm"] = float(np.sqrt(probabilities.sum()))
        row["tail_mass"] = tail_mass(psi, n / profile(n))
        rows.append(row)
        if n < n_max:
            psi = step(u, psi)
    return MomentSeries(pd.DataFrame(rows), profile, tuple(orders))


def instability_ratio(series: MomentSeries) -> MomentSeries:
    """Adds ⟨X²⟩(n)/F(n) and ⟨X²⟩(n)·f(n)^5/n² (n² read as 1 at n = 0)."""
    if 2 not in series.orders:
        raise ValidationError("The series has no second moment", "orders")
    frame = series.frame.copy()
    ns = frame["n"].to_numpy()
    x2 = frame["x2"].to_numpy()
    frame["ratio_F"] = x2 / np.array([theorem_rate(int(n)) for n in ns])
    growth = np.array([series.profile(int(n)) ** 5 for n in ns])
    frame["ratio_f5"] = x2 * growth / np.maximum(ns, 1) ** 2
    return MomentSeries(frame, series.profile, series.orders)


def time_avg_tail(
    u: BandedUnitary,
    psi0: StateVector,
    T: int,
    f: Profile = DEFAULT_PROFILE,
    enforce_light_cone: bool = True,
) -> float:
    """(1/(T+1)) Σ_{j=T}^{2T} ‖P_{n ≥ T/f(T)} U^j ψ0‖².

    Raises:
        ValidationError: If the window is smaller than the light cone of 2T
            steps and `enforce_light_cone` is set.
    """
    _check_geometry(u, psi0)
    if T < 1:
        raise ValidationError(f"T must be >= 1, got {T}", "T")
    if enforce_light_cone:
        check_light_cone(u, psi0, 2 * T)
    threshold = T / f(T)
    psi = psi0
    for _ in range(T):
        psi = step(u, psi)
    total = 0.0
    for j in range(T, 2 * T + 1):
        total += tail_mass(psi, threshold)
        if j < 2 * T:
            psi = step(u, psi)
    return total / (T + 1)


def tail_averages(
    u: BandedUnitary,
    psi0: StateVector,
    t_lo: int,
    t_hi: int,
    f: Profile = DEFAULT_PROFILE,
) -> np.ndarray:
    """`time_avg_tail` for every T in [t_lo, t_hi] from one evolution to 2·t_hi.

    Step j contributes to each T with T ≤ j ≤ 2T; the tail beyond T/f(T) is
    read off a cumulative mass table over positions, so a step costs O(N)
    plus O(t_hi − t_lo).

    Raises:
        ValidationError: If 1 ≤ t_lo ≤ t_hi fails or the window is smaller
            than the light cone of 2·t_hi steps.
    """
    _check_geometry(u, psi0)
    if not 1 <= t_lo <= t_hi:
        raise ValidationError(f"Need 1 <= t_lo <= t_hi, got [{t_lo}, {t_hi}]", "T")
    check_light_cone(u, psi0, 2 * t_hi)
    Ts = np.arange(t_lo, t_hi + 1)
    # k ≥ T/f(T) for integer k iff k ≥ ceil(T/f(T))
    cutoffs = np.array([math.ceil(T / f(int(T))) for T in Ts])
    positions = psi0.positions()
    top = int(positions.max()) + 1
    cutoffs = np.clip(cutoffs, 0, top)
    totals = np.zeros(Ts.size)
    psi = psi0
    for j in range(2 * t_hi + 1):
        lo, hi = max(t_lo, (j + 1) // 2), min(t_hi, j)
        if lo <= hi:
            mass = np.bincount(
                positions, weights=psi.probabilities(), minlength=top + 1
            )
            tails = np.cumsum(mass[::-1])[::-1]
            window = slice(lo - t_lo, hi - t_lo + 1)
            totals[window] += tails[cutoffs[window]]
        if j < 2 * t_hi:
            psi = step(u, psi)
    return totals / (Ts + 1)


@dataclass(frozen=True)
class Lemma1Witness:
    """Time j in [T, 2T] with the largest tail beyond T/f(T)."""

    T: int
    j: int
    tail: float
    x2: float
    tail_threshold: float
    bound: float

    @property
    def applies(self) -> bool:
        return self.tail >= self.tail_threshold

    @property
    def holds(self) -> bool:
        """⟨X²⟩(j) ≥ T²/f(T)⁴ whenever the tail reaches 1/f(T)²."""
        return not self.applies or self.x2 >= self.bound


def lemma1_witness(
    u: BandedUnitary, T: int, f: Profile = DEFAULT_PROFILE
) -> Lemma1Witness:
    """Finds j in [T, 2T] maximizing the tail beyond T/f(T) from φ_1.

    If that tail is at least 1/f(T)², Chebyshev's inequality forces
    ⟨X²⟩(j) ≥ (T/f(T))²·f(T)⁻² = T²/f(T)⁴.
    """
    psi = StateVector.basis(u.geometry, 1)
    check_light_cone(u, psi, 2 * T)
    threshold = T / f(T)
    positions = psi.positions().astype(float)
    best = (T, -1.0, 0.0)
    for j in range(2 * T + 1):
        if j >= T:
            tail = tail_mass(psi, threshold)
            if tail > best[1]:
                best = (j, tail, float(psi.probabilities() @ positions**2))
        if j < 2 * T:
            psi = step(u, psi)
    return Lemma1Witness(
        T=T,
        j=best[0],
        tail=best[1],
        x2=best[2],
        tail_threshold=1.0 / f(T) ** 2,
        bound=T * T / f(T) ** 4,
    )


@dataclass(frozen=True)
class Lemma2Result:
    lhs: float
    rhs: float

    def holds(self, slack: float = 1e-10) -> bool:
        return self.lhs >= self.rhs - slack


def lemma2_gap(
    u_dense: np.ndarray,
    p_indices: Sequence[int],
    eta: np.ndarray,
    psi: np.ndarray,
    T: int,
) -> Lemma2Result:
    """Both sides of the orthogonal-split inequality for ξ = η + ψ.

    lhs = (1/(T+1)) Σ_{j=T}^{2T} ‖(I−P)U^jξ‖² and
    rhs = ‖ψ‖² − 3·((1/(T+1)) Σ_{j=T}^{2T} ‖PU^jψ‖²)^{1/2},
    where P projects on the coordinates `p_indices`.

    Raises:
        ValidationError: If η and ψ are not orthogonal or ‖ξ‖ ≠ 1.
    """
    overlap = abs(np.vdot(eta, psi))
    if overlap > ORTHOGONALITY_TOL:
        raise ValidationError(f"Decomposition not orthogonal: |<η,ψ>| = {overlap:.3e}")
    xi = eta + psi
    if abs(np.linalg.norm(xi) - 1.0) > UNIT_NORM_TOL:
        raise ValidationError(f"ξ is not a unit vector: ‖ξ‖ = {np.linalg.norm(xi)}")
    in_p = np.zeros(len(xi), dtype=bool)
    in_p[list(p_indices)] = True
    power = np.linalg.matrix_power(u_dense, T)
    xi_j, psi_j = power @ xi, power @ psi
    outside, inside = 0.0, 0.0
    for j in range(T, 2 * T + 1):
        outside += float(np.sum(np.abs(xi_j[~in_p]) ** 2))
        inside += float(np.sum(np.abs(psi_j[in_p]) ** 2))
        if j < 2 * T:
            xi_j, psi_j = u_dense @ xi_j, u_dense @ psi_j
    lhs = outside / (T + 1)
    rhs = float(np.vdot(psi, psi).real) - 3.0 * np.sqrt(inside / (T + 1))
    return Lemma2Result(lhs, float(rhs))
