"""Transfer matrices, Lyapunov exponents and generalized eigenfunctions.

A solution of Uψ = e^{iE}ψ with coefficients c_k satisfies
(c_{2k}, c_{2k+1}) = T_k(E)·(c_{2k−2}, c_{2k−1}); on the half line the first
pair is fixed by c_1 through the boundary vector (a_1, a_2).
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from src.components.errors import FitError, NumericFailure, ValidationError
from src.components.model import ModelParams
from src.models.operator import build_blocks
from src.models.phases import PhaseSequence

logger = logging.getLogger(__name__)

# Default number of factors between two renormalizations.
DEFAULT_RESCALE_EVERY = 16

# Number of segments of the batch-means error estimate.
BATCH_SEGMENTS = 32

# Envelope values are floored before taking logarithms.
FIT_FLOOR = 1e-300

MIN_FIT_PAIRS = 16


def _require_transmission(params: ModelParams) -> None:
    if params.t <= 0.0:
        raise ValidationError("Transfer matrices are singular at t = 0", "t")


@dataclass(frozen=True)
class TransferMatrix:
    """2×2 complex transfer matrix T_k(E)."""

    k: int
    E: float
    matrix: np.ndarray

    def det(self) -> complex:
        return complex(np.linalg.det(self.matrix))


def _transfer_entries(
    phases: PhaseSequence, params: ModelParams, ks: np.ndarray, E: float
) -> np.ndarray:
    """Stacked T_k(E) for an array of k, shape (len(ks), 2, 2)."""
    r, t = params.r, params.t
    a, b, c = 2 * ks - 2, 2 * ks - 1, 2 * ks
    th_a, al_a, ga_a = phases.angles(a)
    th_b, al_b, ga_b = phases.angles(b)
    th_c, al_c, ga_c = phases.angles(c)
    q = r / t
    out = np.empty((len(ks), 2, 2), dtype=complex)
    out[:, 0, 0] = -np.exp(-1j * (E + ga_b + ga_a + th_b + th_a))
    out[:, 0, 1] = 1j * q * (
        np.exp(-1j * (E + ga_b - al_a + th_b + th_a)) - np.exp(-1j * (ga_b - al_b))
    )
    out[:, 1, 0] = 1j * q * (
        np.exp(-1j * (th_a - th_c + ga_c + ga_b + ga_a + al_b))
        - np.exp(-1j * (E + th_a + th_b + ga_c + ga_b + ga_a + al_c))
    )
    out[:, 1, 1] = (
        -np.exp(1j * (E + th_c + th_b - ga_c - ga_b)) / t**2
        + q**2
        * np.exp(-1j * (ga_c + ga_b))
        * (np.exp(1j * (th_c - th_a + al_a - al_b)) + np.exp(-1j * (al_c - al_b)))
        - q**2 * np.exp(-1j * (E + th_a + th_b + ga_c + ga_b + al_c - al_a))
    )
    return out


def transfer_matrix(
    phases: PhaseSequence, params: ModelParams, k: int, E: float
) -> TransferMatrix:
    """T_k(E) mapping (c_{2k−2}, c_{2k−1}) to (c_{2k}, c_{2k+1}).

    Raises:
        ValidationError: At t = 0.
    """
    _require_transmission(params)
    return TransferMatrix(k, E, _transfer_entries(phases, params, np.array([k]), E)[0])


def transfer_det(phases: PhaseSequence, k: int) -> complex:
    """det T_k(E) = e^{−i(θ_{2k−2}−θ_{2k}+γ_{2k}+2γ_{2k−1}+γ_{2k−2})}."""
    th_a, _, ga_a = phases.at(2 * k - 2)
    _, _, ga_b = phases.at(2 * k - 1)
    th_c, _, ga_c = phases.at(2 * k)
    return complex(np.exp(-1j * (th_a - th_c + ga_c + 2 * ga_b + ga_a)))


def transfer_matrix_from_blocks(
    phases: PhaseSequence, params: ModelParams, k: int, E: float
) -> np.ndarray:
    """T_k(E) solved from U_eψ = e^{iE}U_o†ψ on sites 2k−1 and 2k.

    Only the blocks S_{2k−2}, S_{2k−1}, S_{2k} enter.
    """
    _require_transmission(params)
    blocks = build_blocks(phases, params, range(2 * k - 2, 2 * k + 1))
    s_a, s_b, s_c = blocks.blocks
    s_b_adj = s_b.conj().T
    z = np.exp(1j * E)
    # row 2k−1 gives c_{2k}, row 2k then gives c_{2k+1}
    first = np.array([s_a[1, 0], s_a[1, 1] - z * s_b_adj[0, 0]]) / (z * s_b_adj[0, 1])
    second = (
        np.array([0.0, z * s_b_adj[1, 0]]) + (z * s_b_adj[1, 1] - s_c[0, 0]) * first
    ) / s_c[0, 1]
    return np.vstack([first, second])


def boundary_vector(
    phases: PhaseSequence, params: ModelParams, E: float
) -> tuple[complex, complex]:
    """(a_1, a_2) with (c_2, c_3) = c_1·(a_1, a_2) on the half line."""
    _require_transmission(params)
    r, t = params.r, params.t
    th0, _, _ = phases.at(0)
    th1, al1, ga1 = phases.at(1)
    th2, al2, ga2 = phases.at(2)
    a1 = (1j / t) * (
        np.exp(-1j * (E + ga1 + th1 + th0)) - r * np.exp(-1j * (ga1 - al1))
    )
    a2 = (
        -np.exp(1j * (E + th2 + th1 - ga2 - ga1)) / t**2
        + (r / t**2)
        * np.exp(-1j * (ga2 + ga1))
        * (np.exp(1j * (th2 - th0 - al1)) + r * np.exp(-1j * (al2 - al1)))
        - (r / t**2) * np.exp(-1j * (E + th0 + th1 + ga2 + ga1 + al2))
    )
    return complex(a1), complex(a2)


class CocycleAccumulator:
    """Running product T_n⋯T_1 kept renormalized by its sup norm.

    Worker-local and mutable; log‖product‖ = log_scale + log‖current‖.
    """

    def __init__(self, rescale_every: int = DEFAULT_RESCALE_EVERY):
        if rescale_every < 1:
            raise ValidationError(f"rescale_every must be >= 1, got {rescale_every}")
        self.rescale_every = rescale_every
        # entries kept as Python complex numbers, faster than 2x2 numpy products
        self.m = [1 + 0j, 0j, 0j, 1 + 0j]
        self.log_scale = 0.0
        self.count = 0

    def push(self, factor: np.ndarray) -> None:
        """Left-multiplies the product by one factor."""
        a, b, c, d = self.m
        if isinstance(factor, np.ndarray):
            factor = factor.ravel().tolist()
        f00, f01, f10, f11 = factor
        self.m = [
            f00 * a + f01 * c,
            f00 * b + f01 * d,
            f10 * a + f11 * c,
            f10 * b + f11 * d,
        ]
        self.count += 1
        if self.count % self.rescale_every == 0:
            self.rescale()

    def rescale(self) -> None:
        norm = max(abs(x) for x in self.m)
        if not math.isfinite(norm) or norm == 0.0:
            raise NumericFailure(
                "Cocycle product overflow despite rescaling",
                {"count": self.count, "log_scale": self.log_scale, "norm": norm},
            )
        self.m = [x / norm for x in self.m]
        self.log_scale += math.log(norm)

    def log_norm(self) -> float:
        norm = max(abs(x) for x in self.m)
        if not math.isfinite(norm) or norm == 0.0:
            raise NumericFailure(
                "Cocycle product is not finite",
                {"count": self.count, "log_scale": self.log_scale},
            )
        return self.log_scale + math.log(norm)

    def matrix(self) -> np.ndarray:
        """Current (renormalized) product."""
        return np.array(self.m, dtype=complex).reshape(2, 2)


@dataclass(frozen=True)
class CocycleResult:
    """Lyapunov estimate with a batch-means convergence gauge."""

    gamma: float
    stderr: float
    n_factors: int
    E: float


def lyapunov(
    phases: PhaseSequence,
    params: ModelParams,
    E: float,
    n_factors: int,
    rescale_every: int = DEFAULT_RESCALE_EVERY,
    first_k: int = 1,
) -> CocycleResult:
    """Estimates γ(E) = lim ln‖T_N⋯T_1‖/N with the sup norm.

    Args:
        phases: Phase provider.
        params: Model parameters (t > 0).
        E: Quasi-energy in [0, 2π).
        n_factors: Number of factors, at least 1000.
        rescale_every: Factors between renormalizations.
        first_k: Index of the first factor.

    Returns:
        γ̂ and the standard error of the mean over 32 equal segments.

    Raises:
        ValidationError: For t = 0 or fewer than 1000 factors.
        NumericFailure: If the product overflows.
    """
    _require_transmission(params)
    if n_factors < 1000:
        raise ValidationError(
            f"n_factors must be >= 1000, got {n_factors}", "n_factors"
        )
    ks = np.arange(first_k, first_k + n_factors)
    factors = _transfer_entries(phases, params, ks, E)
    accumulator = CocycleAccumulator(rescale_every)
    bounds = np.linspace(0, n_factors, BATCH_SEGMENTS + 1).astype(int)
    marks = [0.0]
    segment = 1
    for i, factor in enumerate(factors.reshape(-1, 4).tolist(), start=1):
        accumulator.push(factor)
        if i == bounds[segment]:
            marks.append(accumulator.log_norm())
            segment += 1
    rates = np.diff(marks) / np.diff(bounds)
    gamma = marks[-1] / n_factors
    stderr = float(np.std(rates, ddof=1) / math.sqrt(BATCH_SEGMENTS))
    return CocycleResult(gamma, stderr, n_factors, E)


def periodic_spectral_radius(
    phases: PhaseSequence, params: ModelParams, E: float, period: int
) -> float:
    """Spectral radius of T_period⋯T_1; equals 1 inside a band."""
    _require_transmission(params)
    factors = _transfer_entries(phases, params, np.arange(1, period + 1), E)
    product = np.eye(2, dtype=complex)
    for factor in factors:
        product = factor @ product
    return float(np.max(np.abs(np.linalg.eigvals(product))))


@dataclass(frozen=True)
class CoefficientSequence:
    """Coefficients c_k of a generalized eigenfunction from `first_site` on."""

    first_site: int
    values: np.ndarray

    def at(self, site: int) -> complex:
        return complex(self.values[site - self.first_site])


def solve_forward(
    phases: PhaseSequence,
    params: ModelParams,
    E: float,
    c1: complex,
    n_pairs: int,
) -> CoefficientSequence:
    """Half-line solution c_2..c_{2n_pairs+1} started from c_1."""
    if n_pairs < 1:
        raise ValidationError(f"n_pairs must be >= 1, got {n_pairs}", "n_pairs")
    a1, a2 = boundary_vector(phases, params, E)
    pair = np.array([c1 * a1, c1 * a2], dtype=complex)
    values = np.empty(2 * n_pairs, dtype=complex)
    values[:2] = pair
    if n_pairs > 1:
        factors = _transfer_entries(phases, params, np.arange(2, n_pairs + 1), E)
        for i, factor in enumerate(factors, start=1):
            pair = factor @ pair
            values[2 * i : 2 * i + 2] = pair
    return CoefficientSequence(2, values)


def solve_backward(
    phases: PhaseSequence,
    params: ModelParams,
    E: float,
    pair: tuple[complex, complex],
    k_top: int,
    n_pairs: int,
) -> np.ndarray:
    """Inverts T_{k_top}, T_{k_top−1}, ... starting from (c_{2k_top}, c_{2k_top+1}).

    Returns:
        Array of the n_pairs preceding pairs, shape (n_pairs, 2); row i holds
        (c_{2(k_top−i−1)}, c_{2(k_top−i−1)+1}).
    """
    _require_transmission(params)
    ks = np.arange(k_top, k_top - n_pairs, -1)
    factors = _transfer_entries(phases, params, ks, E)
    current = np.asarray(pair, dtype=complex)
    out = np.empty((n_pairs, 2), dtype=complex)
    for i, factor in enumerate(factors):
        current = np.linalg.solve(factor, current)
        out[i] = current
    return out


def solve_full_line(
    phases: PhaseSequence,
    params: ModelParams,
    E: float,
    c0: complex,
    c1: complex,
    n_pairs: int,
) -> CoefficientSequence:
    """Full-line solution on sites −2n_pairs..2n_pairs+1 from (c_0, c_1).

    Forward pairs use T_1, T_2, ...; backward pairs use T_0⁻¹, T_{−1}⁻¹, ...
    """
    _require_transmission(params)
    forward = _transfer_entries(phases, params, np.arange(1, n_pairs + 1), E)
    values = np.zeros(4 * n_pairs + 2, dtype=complex)
    offset = 2 * n_pairs
    values[offset] = c0
    values[offset + 1] = c1
    pair = np.array([c0, c1], dtype=complex)
    for k, factor in enumerate(forward, start=1):
        pair = factor @ pair
        values[offset + 2 * k : offset + 2 * k + 2] = pair
    backward = solve_backward(phases, params, E, (c0, c1), 0, n_pairs)
    for i, row in enumerate(backward, start=1):
        values[offset - 2 * i : offset - 2 * i + 2] = row
    return CoefficientSequence(-2 * n_pairs, values)


def pair_envelope(
    coeffs: Union[CoefficientSequence, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Sites 2k and envelopes (|c_{2k}|²+|c_{2k+1}|²)^{1/2} of complete pairs.

    Plain arrays are read as c_1, c_2, ...
    """
    if not isinstance(coeffs, CoefficientSequence):
        coeffs = CoefficientSequence(1, np.asarray(coeffs, dtype=complex))
    values = coeffs.values
    start = coeffs.first_site
    skip = start % 2  # first index holding an even site
    paired = values[skip:]
    n_pairs = len(paired) // 2
    paired = paired[: 2 * n_pairs].reshape(n_pairs, 2)
    sites = start + skip + 2 * np.arange(n_pairs)
    return sites, np.sqrt(np.sum(np.abs(paired) ** 2, axis=1))


def decay_rate(coeffs: Union[CoefficientSequence, np.ndarray]) -> float:
    """Least-squares slope of ln envelope against 2k over the middle half.

    Negative values mean decay.

    Raises:
        FitError: For fewer than 16 pairs or an all-zero fitting range.
    """
    sites, envelope = pair_envelope(coeffs)
    n_pairs = len(sites)
    if n_pairs < MIN_FIT_PAIRS:
        raise FitError(f"Need at least {MIN_FIT_PAIRS} pairs, got {n_pairs}")
    lo, hi = n_pairs // 4, n_pairs - n_pairs // 4
    window = envelope[lo:hi]
    if not np.any(window > 0.0):
        raise FitError("Envelope vanishes on the fitting range")
    logs = np.log(np.maximum(window, FIT_FLOOR))
    slope = np.polyfit(sites[lo:hi].astype(float), logs, 1)[0]
    return float(slope)


def lyapunov_grid(
    phases: PhaseSequence,
    params: ModelParams,
    energies: np.ndarray,
    n_factors: int,
    rescale_every: int = DEFAULT_RESCALE_EVERY,
    map_fn: Optional[Callable] = None,
) -> list[CocycleResult]:
    """`lyapunov` over a grid of energies; `map_fn` keeps input order."""
    map_fn = map_fn or map
    return list(
        map_fn(
            lambda E: lyapunov(phases, params, float(E), n_factors, rescale_every),
            energies,
        )
    )


def lower_bound(params: ModelParams) -> float:
    """ln(1/t²), the lower bound of γ for almost every θ."""
    _require_transmission(params)
    return -2.0 * math.log(params.t)
