"""Spectral measures of unitary truncations and their transforms.

Measures are finite sums μ = Σ_j w_j δ_{E_j} with respect to a reference
vector. Densities are taken relative to dE/2π, so the uniform probability
measure has density 1, and ⟦ψ⟧² denotes the supremum of that density over a
spectral window.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import pandas as pd
from scipy import integrate, linalg

from src.components.errors import (
    DomainError,
    FitError,
    NumericFailure,
    PoleError,
    ValidationError,
)
from src.components.model import TWO_PI, ExactDyadic, ModelParams
from src.models.cocycle import (
    FIT_FLOOR,
    MIN_FIT_PAIRS,
    CoefficientSequence,
    decay_rate,
)
from src.models.operator import (
    BandedUnitary,
    FullLine,
    assemble_half,
    perturb_rank_one,
)
from src.models.profiles import DEFAULT_PROFILE, Profile

logger = logging.getLogger(__name__)

# Largest dimension handed to the dense eigensolver.
DEFAULT_DENSE_LIMIT = 2048

# Accepted eigen-residual ‖Uv − e^{iE}v‖.
RESIDUAL_TOL = 1e-10

UNIT_CIRCLE_TOL = 1e-12
POLE_TOL = 1e-14

# Boundary-eigenvector policy: more than this mass in the edge sites.
BOUNDARY_SITES = 10
BOUNDARY_MASS = 0.05

# Envelope values below this fraction of the peak are treated as noise.
ENVELOPE_NOISE = 1e-12


@dataclass(frozen=True)
class SpectralMeasure:
    """Eigenphases in [0, 2π) sorted ascending, with weights."""

    phases: np.ndarray
    weights: np.ndarray

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def moment(self, j: int) -> complex:
        """∫ e^{ijE} dμ."""
        return complex(np.sum(self.weights * np.exp(1j * j * self.phases)))

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.sum(self.weights * f(self.phases)))


@dataclass(frozen=True)
class Eigensystem:
    """Eigenphases (ascending) and orthonormal eigenvectors as columns."""

    phases: np.ndarray
    vectors: np.ndarray
    operator: BandedUnitary

    def measure(self, vector: np.ndarray) -> SpectralMeasure:
        """Spectral measure of an arbitrary vector."""
        return SpectralMeasure(self.phases, np.abs(self.vectors.conj().T @ vector) ** 2)

    def project(self, vector: np.ndarray, window: tuple[float, float]) -> np.ndarray:
        """Spectral projection of a vector onto eigenphases in [a, b]."""
        inside = (self.phases >= window[0]) & (self.phases <= window[1])
        coefficients = self.vectors[:, inside].conj().T @ vector
        return self.vectors[:, inside] @ coefficients


def eigensystem(
    u: BandedUnitary, dense_limit: int = DEFAULT_DENSE_LIMIT
) -> Eigensystem:
    """Dense eigendecomposition through the complex Schur form.

    For a normal matrix the Schur factor is diagonal, so its unitary factor
    holds orthonormal eigenvectors even for clustered eigenvalues.

    Raises:
        ValidationError: If the dimension exceeds the dense limit.
        NumericFailure: On non-convergence or an eigen-residual above 1e-10.
    """
    if u.n_dim > dense_limit:
        raise ValidationError(
            f"Dimension {u.n_dim} exceeds the dense limit {dense_limit}", "n_dim"
        )
    dense = u.to_dense()
    try:
        schur_form, vectors = linalg.schur(dense, output="complex")
    except linalg.LinAlgError as e:
        raise NumericFailure(f"Eigensolver did not converge: {e}") from e
    eigenvalues = np.diag(schur_form)
    phases = np.mod(np.angle(eigenvalues), TWO_PI)
    residuals = np.linalg.norm(
        dense @ vectors - vectors * np.exp(1j * phases)[None, :], axis=0
    )
    worst = int(np.argmax(residuals))
    if residuals[worst] > RESIDUAL_TOL:
        raise NumericFailure(
            f"Eigen-residual {residuals[worst]:.3e} at index {worst}"
            f" (boundary={u.boundary})",
            {"index": worst, "residual": float(residuals[worst])},
        )
    order = np.argsort(phases, kind="stable")
    return Eigensystem(phases[order], vectors[:, order], u)


def eigendecompose(
    u: BandedUnitary, ref_site: int = 1, dense_limit: int = DEFAULT_DENSE_LIMIT
) -> SpectralMeasure:
    """Spectral measure of φ_ref_site: w_j = |⟨φ_ref, v_j⟩|²."""
    system = eigensystem(u, dense_limit)
    row = u.geometry.index(ref_site)
    return SpectralMeasure(system.phases, np.abs(system.vectors[row, :]) ** 2)


def _points(z) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    if np.any(np.abs(np.abs(z) - 1.0) < UNIT_CIRCLE_TOL):
        raise DomainError("Transforms are undefined on |z| = 1", "z")
    return z


def _scalar_or_array(values: np.ndarray, z) -> np.ndarray:
    return values[0] if np.ndim(z) == 0 else values


def cauchy(mu: SpectralMeasure, z):
    """F(z) = Σ w_j (e^{iE_j} + z)/(e^{iE_j} − z)."""
    points = _points(z)
    nodes = np.exp(1j * mu.phases)[None, :]
    ratios = (nodes + points[:, None]) / (nodes - points[:, None])
    values = np.sum(mu.weights * ratios, axis=1)
    return _scalar_or_array(values, z)


def borel(mu: SpectralMeasure, z):
    """R(z) = Σ w_j / (e^{iE_j} − z)."""
    points = _points(z)
    nodes = np.exp(1j * mu.phases)[None, :]
    values = np.sum(mu.weights / (nodes - points[:, None]), axis=1)
    return _scalar_or_array(values, z)


def _is_pi(lam: float) -> bool:
    return abs(lam - math.pi) < 1e-15


def clark_transform(f0, lam: float):
    """F_λ = ((e^{iλ}−1) + (e^{iλ}+1)F_0) / ((e^{iλ}+1) + (e^{iλ}−1)F_0).

    At λ = π this is 1/F_0.

    Raises:
        PoleError: If the denominator vanishes (a point mass at z).
    """
    f0 = np.asarray(f0, dtype=complex)
    if _is_pi(lam):
        numerator, denominator = np.ones_like(f0), f0
    else:
        w = np.exp(1j * lam)
        numerator = (w - 1.0) + (w + 1.0) * f0
        denominator = (w + 1.0) + (w - 1.0) * f0
    if np.any(np.abs(denominator) <= POLE_TOL):
        raise PoleError(f"Clark transform pole at λ = {lam}")
    result = numerator / denominator
    return complex(result) if result.ndim == 0 else result


def clark_real_part(f0, lam: float):
    """Re F_λ = (1+y²)·Re F_0 / |1 + iyF_0|² with y = sin λ/(1 + cos λ)."""
    f0 = np.asarray(f0, dtype=complex)
    if _is_pi(lam):
        result = np.real(1.0 / f0)
    else:
        y = math.sin(lam) / (1.0 + math.cos(lam))
        result = (1.0 + y * y) * f0.real / np.abs(1.0 + 1j * y * f0) ** 2
    return float(result) if np.ndim(result) == 0 else result


def clark_borel(r0, z, lam: float):
    """R_λ(z) = R_0(z) / (e^{iλ} + z(e^{iλ}−1)R_0(z))."""
    w = np.exp(1j * lam)
    denominator = w + np.asarray(z) * (w - 1.0) * np.asarray(r0)
    if np.any(np.abs(denominator) <= POLE_TOL):
        raise PoleError(f"Borel transform pole at λ = {lam}")
    return np.asarray(r0) / denominator


def circle_grid(radius: float, n_points: int) -> np.ndarray:
    """n_points equally spaced points on |z| = radius."""
    return radius * np.exp(1j * TWO_PI * np.arange(n_points) / n_points)


@dataclass(frozen=True)
class ClarkReport:
    """Direct-versus-transform errors over a z grid."""

    lam: float
    cauchy_error: float
    borel_error: float
    relation_error: float
    table: pd.DataFrame

    @property
    def max_error(self) -> float:
        return max(self.cauchy_error, self.borel_error)


def clark_consistency(
    params: ModelParams, n_dim: int, lam: float, z_grid: np.ndarray
) -> ClarkReport:
    """Compares μ_λ transforms with the Clark transforms of μ_0.

    μ_0 comes from U⁺ and μ_λ from U_λ⁺ on the same unitary truncation; the
    relation F = 2zR + 1 is checked on both measures.
    """
    u0 = assemble_half(params, n_dim, boundary="unitary")
    mu0 = eigendecompose(u0)
    mu_lam = eigendecompose(perturb_rank_one(u0, lam))
    f0, r0 = cauchy(mu0, z_grid), borel(mu0, z_grid)
    f_direct, r_direct = cauchy(mu_lam, z_grid), borel(mu_lam, z_grid)
    err_f = np.abs(f_direct - clark_transform(f0, lam))
    err_r = np.abs(r_direct - clark_borel(r0, z_grid, lam))
    relation = max(
        float(np.max(np.abs(f0 - (2 * z_grid * r0 + mu0.mass)))),
        float(np.max(np.abs(f_direct - (2 * z_grid * r_direct + mu_lam.mass)))),
    )
    table = pd.DataFrame(
        {
            "z_re": z_grid.real,
            "z_im": z_grid.imag,
            "error_F": err_f,
            "error_R": err_r,
        }
    )
    return ClarkReport(lam, float(err_f.max()), float(err_r.max()), relation, table)


@dataclass(frozen=True)
class AverageResult:
    lhs: float
    rhs: float
    n_lambda: int

    @property
    def defect(self) -> float:
        return abs(self.lhs - self.rhs)


def spectral_average(
    params: ModelParams,
    n_dim: int,
    test_function: Callable[[np.ndarray], np.ndarray],
    n_lambda: int,
    map_fn: Optional[Callable] = None,
) -> AverageResult:
    """λ-average of ∫ f dμ_λ against ∫ f dE/2π.

    The λ integral is taken with weight dλ/2π (uniform grid of n_lambda
    points), so both sides equal 1 for f ≡ 1.
    """
    if n_lambda < 8:
        raise ValidationError(f"n_lambda must be >= 8, got {n_lambda}", "n_lambda")
    u0 = assemble_half(params, n_dim, boundary="unitary")
    lambdas = TWO_PI * np.arange(n_lambda) / n_lambda

    def integral(lam: float) -> float:
        return eigendecompose(perturb_rank_one(u0, float(lam))).integrate(test_function)

    values = list((map_fn or map)(integral, lambdas))
    lhs = float(np.mean(values))
    rhs = integrate.quad(
        lambda E: float(test_function(np.array([E]))[0]), 0.0, TWO_PI, limit=400
    )[0] / TWO_PI
    return AverageResult(lhs, rhs, n_lambda)


def fejer_indicator(
    a: float, b: float, degree: int
) -> Callable[[np.ndarray], np.ndarray]:
    """Indicator of [a, b] smoothed by the Fejér kernel of the given degree."""
    js = np.arange(1, degree + 1)
    weights = 1.0 - js / (degree + 1.0)
    # Fourier coefficients of the indicator relative to dE/2π
    coeffs = (np.exp(-1j * js * a) - np.exp(-1j * js * b)) / (1j * js * TWO_PI)
    mean = (b - a) / TWO_PI

    def f(E: np.ndarray) -> np.ndarray:
        E = np.asarray(E, dtype=float)
        waves = np.exp(1j * np.outer(E, js))
        return mean + 2.0 * np.real(waves @ (weights * coeffs))

    return f


def poisson_test_function(rho: float = 0.5) -> Callable[[np.ndarray], np.ndarray]:
    """Poisson kernel (1−ρ²)/(1 − 2ρ cos E + ρ²), mean 1, Fourier decay ρ^j."""

    def f(E: np.ndarray) -> np.ndarray:
        return (1.0 - rho**2) / (1.0 - 2.0 * rho * np.cos(E) + rho**2)

    return f


def density(mu: SpectralMeasure, E, epsilon: float):
    """Poisson-smoothed density Re F((1−ε)e^{iE})."""
    if not 0.0 < epsilon < 0.5:
        raise ValidationError(f"epsilon must lie in (0, 0.5), got {epsilon}", "epsilon")
    values = np.real(cauchy(mu, (1.0 - epsilon) * np.exp(1j * np.atleast_1d(E))))
    return float(values[0]) if np.ndim(E) == 0 else values


def conjugate_density(mu: SpectralMeasure, E, epsilon: float):
    """Im F((1−ε)e^{iE}), the conjugate function of the density."""
    values = np.imag(cauchy(mu, (1.0 - epsilon) * np.exp(1j * np.atleast_1d(E))))
    return float(values[0]) if np.ndim(E) == 0 else values


def point_mass_indicator(mu: SpectralMeasure, E, epsilon: float):
    """ε·Re F((1−ε)e^{iE}); tends to (1+r)·μ({E}) ≈ 2μ({E}) as ε → 0."""
    return epsilon * density(mu, E, epsilon)


def energy_grid(n_grid: int, window: tuple[float, float] = (0.0, TWO_PI)) -> np.ndarray:
    a, b = window
    if b >= a + TWO_PI - 1e-15:
        return a + (b - a) * np.arange(n_grid) / n_grid
    return np.linspace(a, b, n_grid)


def covariance_density_check(
    params: ModelParams,
    n_dim: int,
    epsilon: float,
    theta: float,
    n_grid: int = 256,
) -> float:
    """Max difference of the θ-density at E and the θ=0 density at E + 2θ.

    U(β,θ)⁺ = e^{−2iθ}U(β,0)⁺ moves every eigenphase by −2θ, hence
    f_θ(E) = f_0(E + 2θ).
    """
    if not isinstance(params.beta, ExactDyadic):
        raise ValidationError("Covariance check needs an exact rational beta", "beta")
    shifted = params.replace(theta=theta)
    base = params.replace(theta=0.0)
    mu_theta, mu_zero = (
        eigendecompose(
            perturb_rank_one(assemble_half(p, n_dim, boundary="unitary"), p.lam)
        )
        for p in (shifted, base)
    )
    grid = energy_grid(n_grid)
    lhs = density(mu_theta, grid, epsilon)
    rhs = density(mu_zero, np.mod(grid + 2.0 * shifted.theta, TWO_PI), epsilon)
    return float(np.max(np.abs(lhs - rhs)))


def cyclicity_rank(u: BandedUnitary, phi_site: int = 1, n_krylov: int = 64) -> int:
    """Numerical rank of {U^j φ : |j| ≤ n_krylov}.

    Negative powers use U† on a unitary truncation and the pseudo-inverse on
    an open cut.
    """
    dense = u.to_dense()
    inverse = dense.conj().T if u.boundary == "unitary" else np.linalg.pinv(dense)
    start = np.zeros(u.n_dim, dtype=complex)
    start[u.geometry.index(phi_site)] = 1.0
    columns = [start]
    forward, backward = start, start
    for _ in range(n_krylov):
        forward = dense @ forward
        backward = inverse @ backward
        columns.extend([forward, backward])
    singular = linalg.svdvals(np.column_stack(columns))
    if singular[0] == 0.0:
        return 0
    return int(np.sum(singular > 1e-8 * singular[0]))


@dataclass(frozen=True)
class EigenRecord:
    """Localization summary of one eigenvector."""

    E: float
    weight: float
    ipr: float
    decay_rate: float
    boundary_flag: bool
    at_floor: bool

    def to_dict(self) -> dict:
        return {
            "E": self.E,
            "weight": self.weight,
            "ipr": self.ipr,
            "decay_rate": self.decay_rate,
            "boundary_flag": self.boundary_flag,
            "at_floor": self.at_floor,
        }


def _one_sided_decay(vector: np.ndarray, boundary_sites: int) -> tuple[float, bool]:
    """Decay rate away from the peak towards the farther edge.

    The edge sites are excluded and the fit stops where the envelope reaches
    the noise level. When fewer than 16 pairs remain above the noise the rate
    is the slope from the peak to the first noise-level pair and the record
    is marked as being at the fit floor.
    """
    probs = np.abs(vector) ** 2
    n = len(vector)
    peak = int(np.argmax(probs))
    right = vector[peak : n - boundary_sites]
    left = vector[boundary_sites : peak + 1][::-1]
    side = right if len(right) >= len(left) else left
    if len(side) < 2:
        return float("-inf"), True
    usable = len(side) // 2 * 2
    envelope = np.sqrt(np.sum(np.abs(side[:usable].reshape(-1, 2)) ** 2, axis=1))
    below = np.flatnonzero(envelope < ENVELOPE_NOISE * envelope[0])
    above = int(below[0]) if below.size else len(envelope)
    if above >= MIN_FIT_PAIRS:
        try:
            return decay_rate(CoefficientSequence(0, side[: 2 * above])), False
        except FitError:
            return float("-inf"), True
    if above == 0 or above == len(envelope):
        return float("-inf"), True
    edge_value = max(envelope[above], FIT_FLOOR * envelope[0])
    return float(math.log(edge_value / envelope[0]) / (2 * above)), True


def localization_profile(
    u: BandedUnitary,
    boundary_sites: int = BOUNDARY_SITES,
    boundary_mass: float = BOUNDARY_MASS,
    dense_limit: int = DEFAULT_DENSE_LIMIT,
) -> list[EigenRecord]:
    """IPR, envelope decay rate and boundary flag for each eigenvector."""
    system = eigensystem(u, dense_limit)
    ref = u.geometry.index(1)
    records = []
    for j, E in enumerate(system.phases):
        v = system.vectors[:, j]
        probs = np.abs(v) ** 2
        edge_mass = probs[-boundary_sites:].sum()
        if isinstance(u.geometry, FullLine):
            edge_mass += probs[:boundary_sites].sum()
        rate, at_floor = _one_sided_decay(v, boundary_sites)
        records.append(
            EigenRecord(
                E=float(E),
                weight=float(probs[ref]),
                ipr=float(np.sum(probs**2)),
                decay_rate=rate,
                boundary_flag=bool(edge_mass > boundary_mass),
                at_floor=at_floor,
            )
        )
    flagged = sum(r.boundary_flag for r in records)
    if flagged:
        logger.warning(
            f"{flagged} of {len(records)} eigenvectors are boundary-localized"
        )
    return records


def sup_density(
    mu: SpectralMeasure,
    window: tuple[float, float],
    epsilon: float,
    n_grid: int = 512,
) -> float:
    """Supremum of the smoothed density over a window, the estimate of ⟦·⟧²."""
    return float(np.max(density(mu, energy_grid(n_grid, window), epsilon)))


def triple_norm(
    mu: SpectralMeasure, window: tuple[float, float], epsilon: float
) -> float:
    return math.sqrt(sup_density(mu, window, epsilon))


@dataclass(frozen=True)
class TailDiagnostic:
    """Near-site mass of a windowed vector against its density bound."""

    lhs: float
    rhs: float
    slack: float

    @property
    def passes(self) -> bool:
        return self.lhs <= self.slack * self.rhs


def windowed_tail_diagnostic(
    u: BandedUnitary,
    window: tuple[float, float],
    T: int,
    epsilon: float = 1e-2,
    f: Profile = DEFAULT_PROFILE,
    slack: float = 2.0,
) -> TailDiagnostic:
    """Checks (1/(T+1))Σ_{j=T}^{2T}‖P_{n<T/f(T)}U^jψ‖² ≤ (2π/(T+1))·#{n<T/f(T)}·⟦ψ⟧².

    ψ is the spectral projection of φ_1 onto the window. This is a
    diagnostic: ⟦ψ⟧ is estimated by Poisson smoothing at scale epsilon.
    """
    system = eigensystem(u)
    phi = np.zeros(u.n_dim, dtype=complex)
    phi[u.geometry.index(1)] = 1.0
    psi = system.project(phi, window)
    norm_sq = sup_density(system.measure(psi), window, epsilon)
    threshold = T / f(T)
    near = u.geometry.sites() < threshold
    count = int(np.sum((u.geometry.sites() >= 1) & near))
    dense = u.to_dense()
    state = np.linalg.matrix_power(dense, T) @ psi
    total = 0.0
    for j in range(T, 2 * T + 1):
        total += float(np.sum(np.abs(state[near]) ** 2))
        if j < 2 * T:
            state = dense @ state
    lhs = total / (T + 1)
    rhs = TWO_PI / (T + 1) * count * norm_sq
    return TailDiagnostic(lhs, rhs, slack)


def lemma3_check(
    u: BandedUnitary,
    xi: np.ndarray,
    eta: np.ndarray,
    window: tuple[float, float],
    epsilon: float,
    n_steps: int,
) -> tuple[float, float]:
    """Σ_{|j|≤n_steps}|⟨U^jξ, η⟩|² against 2π·⟦ξ⟧²·‖η‖².

    Returns:
        (lhs, rhs) with ⟦ξ⟧² estimated on the window by `sup_density`.
    """
    system = eigensystem(u)
    bound = TWO_PI * sup_density(system.measure(xi), window, epsilon) * float(
        np.vdot(eta, eta).real
    )
    # ⟨U^jξ, η⟩ = Σ_k conj(a_k) b_k e^{−ijE_k} in the eigenbasis
    a = system.vectors.conj().T @ xi
    b = system.vectors.conj().T @ eta
    weights = np.conj(a) * b
    js = np.arange(-n_steps, n_steps + 1)
    overlaps = np.exp(-1j * np.outer(js, system.phases)) @ weights
    return float(np.sum(np.abs(overlaps) ** 2)), float(bound)
