"""Inductive construction of the frequency sequence β_1, β_2, … .

Each stage m fixes a time scale T_m at which the time-averaged tail beyond
T_m/f(T_m) is large, a radius Δ_m inside which that property survives
changes of β, and the next frequency β_{m+1} = β_m + 2^{−κ_m!}. All
frequencies are exact dyadics; Δ_m is kept as an exact integer sum plus its
base-2 logarithm.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import qmc

from src.components.errors import (
    BudgetExceededError,
    ConstructionFailure,
    NumericFailure,
    ValidationError,
)
from src.components.model import (
    MAX_DYADIC_EXPONENT,
    TWO_PI,
    ExactDyadic,
    ModelParams,
    beta_from_dict,
    dyadic_add_pow2,
    parse_beta,
)
from src.models.evolution import (
    StateVector,
    evolution_dimension,
    step,
    tail_averages,
    time_avg_tail,
)
from src.models.operator import (
    HalfLine,
    assemble_half,
    assemble_perturbed,
    perturb_rank_one,
)
from src.models.profiles import DEFAULT_PROFILE, Profile, get_profile
from src.models.spectral import (
    conjugate_density,
    density,
    eigendecompose,
    eigensystem,
    energy_grid,
    sup_density,
)

logger = logging.getLogger(__name__)

MODES = ("rigorous", "empirical")

# Perturbation phases covered by the instability claim.
LAMBDA_RANGE = (math.pi / 6.0, math.pi / 2.0)

# A log2 value this close to an integer is not trusted to round down.
LOG2_GUARD = 1e-9

# Tolerance when re-checking a stored log2 Δ.
AUDIT_LOG2_TOL = 1e-9


@dataclass(frozen=True)
class ConstructionSettings:
    """Parameters of the construction and of the constants estimator."""

    mode: str = "empirical"
    n_stages: int = 3
    beta_start: str = "1"
    profile: str = "log_fifth_root"
    n_samples: int = 5
    max_T: int = 4096
    max_dim: int = 1 << 15
    # spectral window surrogate
    estimate_dim: int = 256
    epsilon: float = 0.02
    n_grid: int = 1024
    min_mass: float = 0.05
    peak_distance: float = 0.05
    peak_factor: float = 10.0
    max_S: float = 1024.0
    n_lambda_grid: int = 5
    forced_constants: tuple[float, ...] = ()
    check_persistence: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(
                f"Unknown construction mode: {self.mode} (valid: {', '.join(MODES)})",
                "construction.mode",
            )
        if self.n_stages < 1:
            raise ValidationError(
                f"n_stages must be >= 1, got {self.n_stages}", "construction.n_stages"
            )
        if self.n_samples < 1:
            raise ValidationError(
                f"n_samples must be >= 1, got {self.n_samples}",
                "construction.n_samples",
            )
        if self.forced_constants and len(self.forced_constants) != 2:
            raise ValidationError(
                "forced_constants takes [c1, c2]", "construction.forced_constants"
            )
        object.__setattr__(self, "forced_constants", tuple(self.forced_constants))

    @property
    def profile_fn(self) -> Profile:
        return get_profile(self.profile)


@dataclass(frozen=True)
class DeltaValue:
    """Δ(T) = (T+1)/(f(T)·π·Σ_{j=T}^{2T} 4^{j+1}(2j²−j)) in exact pieces."""

    T: int
    series_sum: int
    f_T: float
    log2_delta: float

    @property
    def exponent(self) -> int:
        """An integer e with 2^e ≤ Δ, one bit lower near integer log2 values."""
        e = math.floor(self.log2_delta)
        if self.log2_delta - e < LOG2_GUARD:
            e -= 1
        return e

    def value(self) -> float:
        """Δ as a double; underflows to 0 for T beyond a few hundred."""
        return 2.0**self.log2_delta


def delta_series(T: int) -> int:
    """Σ_{j=T}^{2T} 4^{j+1}(2j²−j) as an exact integer."""
    return sum((4 ** (j + 1)) * (2 * j * j - j) for j in range(T, 2 * T + 1))


def delta(T: int, f: Profile = DEFAULT_PROFILE) -> DeltaValue:
    """Computes the β-robustness radius of a stage with time scale T.

    Raises:
        ValidationError: If T < 2.
    """
    if T < 2:
        raise ValidationError(f"T must be >= 2, got {T}", "T")
    series_sum = delta_series(T)
    f_T = f(T)
    log2_delta = (
        math.log2(T + 1) - math.log2(f_T) - math.log2(math.pi) - math.log2(series_sum)
    )
    return DeltaValue(T=T, series_sum=series_sum, f_T=f_T, log2_delta=log2_delta)


def delta_lower_bound(log2_delta: float) -> ExactDyadic:
    """The dyadic 2^e ≤ Δ used in exact comparisons."""
    e = DeltaValue(0, 0, 1.0, log2_delta).exponent
    return ExactDyadic(1 << e) if e >= 0 else ExactDyadic.pow2(-e)


@dataclass(frozen=True)
class SampleCheck:
    """One evaluation of the time-averaged tail at a (θ, λ) sample."""

    theta: float
    lam: float
    lhs: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.lhs >= self.threshold


@dataclass(frozen=True)
class VerificationRecord:
    """Tail checks of one frequency at one time scale."""

    beta: ExactDyadic
    T: int
    n_dim: int
    samples: tuple[SampleCheck, ...]
    complete: bool = True

    @property
    def verified(self) -> bool:
        return self.complete and all(s.passed for s in self.samples)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.to_dict(),
            "T": self.T,
            "n_dim": self.n_dim,
            "complete": self.complete,
            "verified": self.verified,
            "samples": [
                {**asdict(s), "passed": s.passed} for s in self.samples
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VerificationRecord":
        samples = tuple(
            SampleCheck(s["theta"], s["lam"], s["lhs"], s["threshold"])
            for s in data["samples"]
        )
        return cls(
            beta=beta_from_dict(data["beta"]),
            T=data["T"],
            n_dim=data["n_dim"],
            samples=samples,
            complete=data["complete"],
        )


@dataclass(frozen=True)
class ConstantsEstimate:
    """Measured and closed-form constants of the spectral window."""

    c1: float
    c2: float
    window: tuple[float, float]
    S: float
    window_mass: float
    conjugate_bound: float
    closed_form_c1: float
    closed_form_c2: float
    forced: bool = False

    def to_dict(self) -> dict:
        data = asdict(self)
        data["window"] = list(self.window)
        return data


@dataclass(frozen=True)
class BetaStage:
    """One stage of the construction and its audit trail."""

    m: int
    beta: ExactDyadic
    T: int
    series_sum: int
    log2_delta: float
    kappa: int
    beta_next: ExactDyadic
    c1: float = float("nan")
    c2: float = float("nan")
    mode: str = "empirical"
    verification: Optional[VerificationRecord] = None
    persistence: tuple[VerificationRecord, ...] = ()
    constants: Optional[ConstantsEstimate] = None

    @property
    def delta_exponent(self) -> int:
        return DeltaValue(self.T, self.series_sum, 1.0, self.log2_delta).exponent

    @property
    def verified(self) -> bool:
        return self.verification is not None and self.verification.verified

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "mode": self.mode,
            "beta": self.beta.to_dict(),
            "T": self.T,
            "delta_sum_hex": hex(self.series_sum),
            "log2_delta": self.log2_delta,
            "delta_exponent": self.delta_exponent,
            "kappa": self.kappa,
            "kappa_factorial": math.factorial(self.kappa),
            "beta_next": self.beta_next.to_dict(),
            "c1": self.c1,
            "c2": self.c2,
            "verified": self.verified,
            "verification": (
                self.verification.to_dict() if self.verification else None
            ),
            "persistence": [record.to_dict() for record in self.persistence],
            "constants": self.constants.to_dict() if self.constants else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BetaStage":
        constants = data.get("constants")
        if constants is not None:
            constants = ConstantsEstimate(
                **{**constants, "window": tuple(constants["window"])}
            )
        verification = data.get("verification")
        return cls(
            m=data["m"],
            beta=beta_from_dict(data["beta"]),
            T=data["T"],
            series_sum=int(data["delta_sum_hex"], 16),
            log2_delta=data["log2_delta"],
            kappa=data["kappa"],
            beta_next=beta_from_dict(data["beta_next"]),
            c1=data["c1"],
            c2=data["c2"],
            mode=data["mode"],
            verification=(
                VerificationRecord.from_dict(verification) if verification else None
            ),
            persistence=tuple(
                VerificationRecord.from_dict(r) for r in data.get("persistence", [])
            ),
            constants=constants,
        )


def _local_peaks(values: np.ndarray, factor: float) -> np.ndarray:
    """Indices of circular local maxima above factor × median."""
    is_max = (values >= np.roll(values, 1)) & (values >= np.roll(values, -1))
    return np.flatnonzero(is_max & (values > factor * np.median(values)))


def _circular_distance(E: np.ndarray, points: np.ndarray) -> np.ndarray:
    if points.size == 0:
        return np.full(E.shape, np.inf)
    diff = np.abs(E[:, None] - points[None, :]) % TWO_PI
    return np.min(np.minimum(diff, TWO_PI - diff), axis=1)


def _longest_run(mask: np.ndarray) -> tuple[int, int]:
    """Start and end (inclusive) of the longest run of True; (0, -1) if none."""
    best, start = (0, -1), None
    for i, flag in enumerate(np.append(mask, False)):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if i - 1 - start > best[1] - best[0]:
                best = (start, i - 1)
            start = None
    return best


def _closed_form_constants(
    window_length: float, S: float, conjugate_bound: float, L: float
) -> tuple[float, float]:
    lower = 1.0 / (S * (1.0 + S + conjugate_bound + 2.0 / L**2) ** 2)
    c1 = math.sqrt(window_length * lower / TWO_PI)
    c2 = math.sqrt(2.0 * (2.0 + math.sqrt(3.0)) ** 2 * S)
    return c1, c2


def estimate_constants(
    params: ModelParams,
    n_dim: int,
    settings: ConstructionSettings = ConstructionSettings(),
) -> ConstantsEstimate:
    """Estimates a spectral window and the decomposition constants C_1, C_2.

    The smoothed density f_0 of φ_1 for U(β,0)⁺ is swept with S = 2, 4, 8, …
    until the longest interval where 1/S ≤ f_0 ≤ S, at distance at least
    `peak_distance` from density peaks, carries spectral mass at least
    `min_mass`. Over a λ grid in [π/6, π/2] the perturbed measures then give
    c1 = (min_λ μ_λ(I))^{1/2} and c2 = (max_λ sup_I f_λ)^{1/2}.

    Args:
        params: Model parameters; θ and λ are ignored.
        n_dim: Half-line truncation dimension (unitary closure).
        settings: Estimator settings.

    Returns:
        The estimate, with the closed-form constants alongside.

    Raises:
        ConstructionFailure: If no window reaches the minimal mass.
    """
    base = params.replace(theta=0.0, lam=0.0)
    u0 = assemble_half(base, n_dim, boundary="unitary")
    mu0 = eigendecompose(u0)
    grid = energy_grid(settings.n_grid)
    f0 = density(mu0, grid, settings.epsilon)
    peaks = grid[_local_peaks(f0, settings.peak_factor)]
    far = _circular_distance(grid, peaks) >= settings.peak_distance
    logger.debug(f"{peaks.size} density peaks for beta={params.beta}")

    S = 2.0
    while S <= settings.max_S:
        start, end = _longest_run((f0 >= 1.0 / S) & (f0 <= S) & far)
        if end >= start:
            window = (float(grid[start]), float(grid[end]))
            inside = (mu0.phases >= window[0]) & (mu0.phases <= window[1])
            mass = float(mu0.weights[inside].sum())
            if mass >= settings.min_mass:
                break
        S *= 2.0
    else:
        raise ConstructionFailure(
            f"No spectral window with mass >= {settings.min_mass} for S <= "
            f"{settings.max_S}; relax construction.min_mass, "
            "construction.peak_distance or construction.max_S"
        )

    masses, sups = [], []
    phi = StateVector.basis(u0.geometry, 1).amplitudes
    for lam in np.linspace(*LAMBDA_RANGE, settings.n_lambda_grid):
        mu = eigensystem(perturb_rank_one(u0, float(lam))).measure(phi)
        inside = (mu.phases >= window[0]) & (mu.phases <= window[1])
        masses.append(float(mu.weights[inside].sum()))
        sups.append(sup_density(mu, window, settings.epsilon))
    on_window = (grid >= window[0]) & (grid <= window[1])
    conjugate_bound = float(
        np.max(np.abs(conjugate_density(mu0, grid[on_window], settings.epsilon)))
    )
    closed_c1, closed_c2 = _closed_form_constants(
        window[1] - window[0], S, conjugate_bound, settings.peak_distance
    )
    estimate = ConstantsEstimate(
        c1=math.sqrt(min(masses)),
        c2=math.sqrt(max(sups)),
        window=window,
        S=S,
        window_mass=mass,
        conjugate_bound=conjugate_bound,
        closed_form_c1=closed_c1,
        closed_form_c2=closed_c2,
    )
    logger.info(
        f"Window [{window[0]:.4f}, {window[1]:.4f}] with S={S:g}, "
        f"c1={estimate.c1:.4g}, c2={estimate.c2:.4g}"
    )
    return estimate


def theorem_gap(T: int, c1: float, c2: float, f: Profile = DEFAULT_PROFILE) -> float:
    """C_1² − 3√(2π)·C_2·(2/f(T) + 1/T)^{1/2} − 2/f(T); T is admissible if ≥ 0."""
    f_T = f(T)
    spread = 3.0 * math.sqrt(TWO_PI) * c2 * math.sqrt(2.0 / f_T + 1.0 / T)
    return c1 * c1 - spread - 2.0 / f_T


def select_T(
    c1: float,
    c2: float,
    f: Profile = DEFAULT_PROFILE,
    t_min: int = 2,
    max_T: int = 4096,
) -> int:
    """Smallest T ≥ max(t_min, 2) with a non-negative `theorem_gap`.

    The gap is increasing in T, so the search is a bisection.

    Raises:
        ValidationError: If c1 <= 0.
        BudgetExceededError: If no T up to max_T qualifies.
    """
    if c1 <= 0:
        raise ValidationError(f"c1 must be positive, got {c1}", "c1")
    lo = max(t_min, 2)
    if lo > max_T or theorem_gap(max_T, c1, c2, f) < 0:
        raise BudgetExceededError(
            f"No admissible T in [{lo}, {max_T}] for c1={c1:.4g}, c2={c2:.4g}"
        )
    hi = max_T
    while lo < hi:
        mid = (lo + hi) // 2
        if theorem_gap(mid, c1, c2, f) >= 0:
            hi = mid
        else:
            lo = mid + 1
    return lo


def next_beta(history: Sequence[BetaStage]) -> tuple[ExactDyadic, int]:
    """Chooses β_{m+1} = β_m + 2^{−κ!} for the smallest admissible κ.

    The last stage supplies β_m and Δ_m; its kappa and beta_next fields are
    ignored. κ starts at the previous stage's κ (or 1), must satisfy
    κ! > −log2 Δ_m + 1 and is raised until |β_{m+1} − β_k| < 2^{e_k} ≤ Δ_k
    holds exactly for every stage k.

    Raises:
        ValidationError: If the history is empty.
        NumericFailure: If no κ within the dyadic budget works.
    """
    if not history:
        raise ValidationError("Empty stage history", "history")
    last = history[-1]
    kappa = history[-2].kappa if len(history) > 1 else 1
    bounds = [delta_lower_bound(stage.log2_delta) for stage in history]
    while math.factorial(kappa) <= MAX_DYADIC_EXPONENT:
        kappa_factorial = math.factorial(kappa)
        if kappa_factorial > -last.log2_delta + 1.0:
            candidate = dyadic_add_pow2(last.beta, kappa_factorial)
            if all(
                abs(candidate - stage.beta) < bound
                for stage, bound in zip(history, bounds)
            ):
                return candidate, kappa
            logger.debug(f"kappa={kappa} violates a radius condition")
        kappa += 1
    raise NumericFailure(
        f"No admissible kappa for stage {last.m}",
        {"log2_delta": last.log2_delta},
    )


def halton_samples(n_samples: int, offset: int = 0) -> list[tuple[float, float]]:
    """Unscrambled Halton points mapped to θ ∈ [0, 2π), λ ∈ [π/6, π/2].

    The all-zero first point of the sequence is skipped.
    """
    sampler = qmc.Halton(d=2, scramble=False)
    sampler.fast_forward(1 + offset)
    points = sampler.random(n_samples)
    width = LAMBDA_RANGE[1] - LAMBDA_RANGE[0]
    return [
        (TWO_PI * float(u), LAMBDA_RANGE[0] + width * float(v)) for u, v in points
    ]


def _sample_check(
    base: ModelParams, T: int, f: Profile, sample: tuple[float, float]
) -> SampleCheck:
    theta, lam = sample
    params = base.replace(theta=theta, lam=lam)
    u = assemble_perturbed(params, evolution_dimension(2 * T))
    lhs = time_avg_tail(u, StateVector.basis(u.geometry, 1), T, f)
    check = SampleCheck(theta, lam, lhs, 1.0 / f(T) ** 2)
    logger.debug(f"T={T} theta={theta:.4f} lam={lam:.4f} lhs={lhs:.6f}")
    return check


def verify_stage(
    params: ModelParams,
    beta: ExactDyadic,
    T: int,
    samples: Sequence[tuple[float, float]],
    f: Profile = DEFAULT_PROFILE,
    max_dim: int = 1 << 15,
    map_fn: Callable = map,
) -> VerificationRecord:
    """Checks (1/(T+1))Σ_{j=T}^{2T}‖P_{n≥T/f(T)}U^jφ_1‖² ≥ 1/f(T)² per sample.

    Evolution uses the half line of dimension 4T+4, on which 2T steps from
    φ_1 are exact. Over budget, an empty record with complete=False is
    returned.

    Args:
        params: Supplies t and α.
        beta: Frequency under test.
        T: Time scale.
        samples: (θ, λ) pairs.
        f: Growth profile.
        max_dim: Largest evolution dimension allowed.
        map_fn: Order-preserving map used to run the samples.

    Returns:
        The verification record.
    """
    n_dim = evolution_dimension(2 * T)
    if n_dim > max_dim:
        logger.warning(
            f"Verification of T={T} needs dimension {n_dim} > {max_dim}; "
            "recording a partial result"
        )
        return VerificationRecord(beta, T, n_dim, (), complete=False)
    base = params.replace(beta=beta)
    checks = tuple(map_fn(lambda s: _sample_check(base, T, f, s), samples))
    return VerificationRecord(beta, T, n_dim, checks)


def lemma5_bound(n: int, dbeta: float) -> float:
    """2·4^n·(2n² − n)·2π·|β − β′|."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}", "n")
    return 2.0 * 4.0**n * (2 * n * n - n) * TWO_PI * abs(dbeta)


def _beta_distance(a, b) -> float:
    if isinstance(a, ExactDyadic) and isinstance(b, ExactDyadic):
        return abs(a - b).to_float()
    return abs(a.to_float() - b.to_float())


@dataclass
class Lemma5Report:
    """Per-step distance of two evolutions and its β-perturbation bound.

    Columns: n, difference, bound, ratio (difference/bound, 0 if both vanish).
    """

    frame: pd.DataFrame

    @property
    def holds(self) -> bool:
        return bool(np.all(self.frame["difference"] <= self.frame["bound"] + 1e-12))

    @property
    def max_ratio(self) -> float:
        return float(self.frame["ratio"].max())


def lemma5_check(
    params: ModelParams, params_prime: ModelParams, n_max: int
) -> Lemma5Report:
    """Evolves φ_1 under two frequencies and compares with `lemma5_bound`."""
    n_dim = evolution_dimension(n_max)
    u = assemble_perturbed(params, n_dim)
    u_prime = assemble_perturbed(params_prime, n_dim)
    dbeta = _beta_distance(params.beta, params_prime.beta)
    psi = psi_prime = StateVector.basis(HalfLine(n_dim), 1)
    rows = []
    for n in range(1, n_max + 1):
        psi, psi_prime = step(u, psi), step(u_prime, psi_prime)
        difference = float(np.linalg.norm(psi.amplitudes - psi_prime.amplitudes))
        bound = lemma5_bound(n, dbeta)
        ratio = difference / bound if bound > 0 else 0.0
        rows.append({"n": n, "difference": difference, "bound": bound, "ratio": ratio})
    return Lemma5Report(pd.DataFrame(rows))


def _stage_constants(
    params: ModelParams, beta: ExactDyadic, settings: ConstructionSettings
) -> ConstantsEstimate:
    if settings.forced_constants:
        c1, c2 = settings.forced_constants
        return ConstantsEstimate(
            c1=c1,
            c2=c2,
            window=(0.0, TWO_PI),
            S=float("nan"),
            window_mass=float("nan"),
            conjugate_bound=float("nan"),
            closed_form_c1=float("nan"),
            closed_form_c2=float("nan"),
            forced=True,
        )
    return estimate_constants(
        params.replace(beta=beta), settings.estimate_dim, settings
    )


def _tail_table(
    base: ModelParams,
    samples: Sequence[tuple[float, float]],
    t_lo: int,
    t_hi: int,
    f: Profile,
    map_fn: Callable,
) -> tuple[int, np.ndarray]:
    """Time-averaged tails for each sample (rows) and each T in [t_lo, t_hi]."""
    n_dim = evolution_dimension(2 * t_hi)

    def averages(sample: tuple[float, float]) -> np.ndarray:
        theta, lam = sample
        u = assemble_perturbed(base.replace(theta=theta, lam=lam), n_dim)
        return tail_averages(u, StateVector.basis(u.geometry, 1), t_lo, t_hi, f)

    return n_dim, np.array(list(map_fn(averages, samples)))


def _empirical_T(
    params: ModelParams,
    beta: ExactDyadic,
    t_min: int,
    samples: Sequence[tuple[float, float]],
    settings: ConstructionSettings,
    map_fn: Callable,
) -> tuple[int, VerificationRecord]:
    """Smallest T ≥ t_min at which every sample passes the tail check.

    Windows [t_lo, 2·t_lo] are scanned in turn, each with one evolution per
    sample that yields the tail averages of all its T values at once.
    """
    f = settings.profile_fn
    base = params.replace(beta=beta)
    # largest T whose 2T steps fit into max_dim
    t_cap = min(settings.max_T, (settings.max_dim - 4) // 4)
    t_lo = t_min
    while t_lo <= t_cap:
        t_hi = min(2 * t_lo, t_cap)
        n_dim, table = _tail_table(base, samples, t_lo, t_hi, f, map_fn)
        Ts = range(t_lo, t_hi + 1)
        thresholds = np.array([1.0 / f(T) ** 2 for T in Ts])
        passing = np.all(table >= thresholds, axis=0)
        if passing.any():
            k = int(np.argmax(passing))
            checks = tuple(
                SampleCheck(theta, lam, float(table[i, k]), float(thresholds[k]))
                for i, (theta, lam) in enumerate(samples)
            )
            return t_lo + k, VerificationRecord(beta, t_lo + k, n_dim, checks)
        logger.debug(f"No T in [{t_lo}, {t_hi}] passes for beta={beta}")
        t_lo = t_hi + 1
    if t_cap < settings.max_T:
        logger.warning(
            f"Dimension budget {settings.max_dim} stops the scan at T={t_cap}"
        )
    raise BudgetExceededError(
        f"No T in [{t_min}, {t_cap}] passes the tail check for beta={beta}"
    )


def _persistence(
    params: ModelParams,
    stage_beta: ExactDyadic,
    T: int,
    exponent: int,
    samples: Sequence[tuple[float, float]],
    settings: ConstructionSettings,
    map_fn: Callable,
) -> tuple[VerificationRecord, ...]:
    """Re-verifies at β ± 2^{e−1}, a shift of at most Δ/2."""
    shift = ExactDyadic.pow2(1 - exponent)
    records = tuple(
        verify_stage(
            params, beta, T, samples, settings.profile_fn, settings.max_dim, map_fn
        )
        for beta in (stage_beta - shift, stage_beta + shift)
    )
    if not all(record.verified for record in records):
        logger.warning(
            f"Tail check does not persist at beta={stage_beta} ± 2^{exponent - 1}"
        )
    return records


def build_stage(
    params: ModelParams,
    history: Sequence[BetaStage],
    settings: ConstructionSettings,
    map_fn: Callable = map,
) -> BetaStage:
    """Computes stage m = len(history) + 1 from the completed stages.

    Raises:
        BudgetExceededError: If T or the verification dimension exceeds the
            configured budget.
    """
    m = len(history) + 1
    f = settings.profile_fn
    if history:
        beta, t_min = history[-1].beta_next, 2 * history[-1].T
    else:
        beta, t_min = parse_beta("exact", settings.beta_start), 2
    samples = halton_samples(settings.n_samples, offset=(m - 1) * settings.n_samples)

    constants = None
    if settings.mode == "rigorous":
        constants = _stage_constants(params, beta, settings)
        T = select_T(constants.c1, constants.c2, f, t_min, settings.max_T)
        verification = verify_stage(
            params, beta, T, samples, f, settings.max_dim, map_fn
        )
    else:
        T, verification = _empirical_T(params, beta, t_min, samples, settings, map_fn)

    d = delta(T, f)
    draft = BetaStage(
        m=m,
        beta=beta,
        T=T,
        series_sum=d.series_sum,
        log2_delta=d.log2_delta,
        kappa=0,
        beta_next=beta,
        c1=constants.c1 if constants else float("nan"),
        c2=constants.c2 if constants else float("nan"),
        mode=settings.mode,
        verification=verification,
        constants=constants,
    )
    beta_next, kappa = next_beta([*history, draft])
    persistence: tuple[VerificationRecord, ...] = ()
    if m == 1 and settings.check_persistence:
        persistence = _persistence(
            params, beta, T, d.exponent, samples, settings, map_fn
        )
    stage = replace(draft, kappa=kappa, beta_next=beta_next, persistence=persistence)
    logger.info(
        f"Stage {m}: T={T}, log2(delta)={d.log2_delta:.3f}, kappa={kappa}, "
        f"verified={stage.verified}"
    )
    return stage


def run_construction(
    params: ModelParams,
    settings: ConstructionSettings = ConstructionSettings(),
    resume: Sequence[BetaStage] = (),
    on_stage: Optional[Callable[[BetaStage], None]] = None,
    map_fn: Callable = map,
) -> list[BetaStage]:
    """Runs stages until `settings.n_stages` are complete.

    Args:
        params: Supplies t and α.
        settings: Construction settings.
        resume: Stages completed by an earlier run, in order.
        on_stage: Called with each newly completed stage.
        map_fn: Order-preserving map used for sample checks.

    Returns:
        All stages, resumed ones included.

    Raises:
        BudgetExceededError: With the completed stages as partial result.
    """
    stages = list(resume)
    for expected, stage in enumerate(stages, start=1):
        if stage.m != expected:
            raise ValidationError(
                f"Resumed stages out of order: found m={stage.m} at {expected}",
                "resume",
            )
    if stages:
        logger.info(f"Resuming after stage {stages[-1].m}")
    while len(stages) < settings.n_stages:
        try:
            stage = build_stage(params, stages, settings, map_fn)
        except BudgetExceededError as e:
            raise type(e)(str(e), partial=list(stages)) from e
        stages.append(stage)
        if on_stage is not None:
            on_stage(stage)
    return stages


@dataclass(frozen=True)
class AuditFinding:
    m: int
    check: str
    passed: bool
    detail: str = ""


@dataclass
class AuditReport:
    findings: list[AuditFinding] = field(default_factory=list)

    def add(self, m: int, check: str, passed: bool, detail: str = "") -> None:
        self.findings.append(AuditFinding(m, check, bool(passed), detail))

    @property
    def ok(self) -> bool:
        return all(finding.passed for finding in self.findings)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(finding) for finding in self.findings])


def audit_stages(
    stages: Iterable[BetaStage], f: Profile = DEFAULT_PROFILE
) -> AuditReport:
    """Re-checks a stage list from its stored records alone.

    Δ_k is recomputed from T_k; comparisons with Δ_k use the exact dyadic
    2^{e_k} ≤ Δ_k.
    """
    stages = list(stages)
    report = AuditReport()
    for i, stage in enumerate(stages):
        m = stage.m
        report.add(m, "index", m == i + 1)
        report.add(m, "series_sum", stage.series_sum == delta_series(stage.T))
        recomputed = delta(stage.T, f)
        report.add(
            m,
            "log2_delta",
            abs(recomputed.log2_delta - stage.log2_delta) <= AUDIT_LOG2_TOL,
            f"{stage.log2_delta} vs {recomputed.log2_delta}",
        )
        report.add(m, "T_start", i > 0 or stage.T >= 2)
        kappa_factorial = math.factorial(stage.kappa)
        # (i): 2^{-κ!} < 2^{e} ≤ Δ
        report.add(
            m,
            "condition_i",
            kappa_factorial > -stage.log2_delta + 1.0
            and -kappa_factorial < stage.delta_exponent,
        )
        report.add(
            m,
            "increment",
            stage.beta_next - stage.beta == ExactDyadic.pow2(kappa_factorial),
        )
        report.add(m, "condition_ii", stage.verified)
        for earlier in stages[: i + 1]:
            report.add(
                m,
                "condition_iii",
                abs(stage.beta_next - earlier.beta)
                < delta_lower_bound(earlier.log2_delta),
                f"against stage {earlier.m}",
            )
        if i > 0:
            previous = stages[i - 1]
            report.add(m, "chain", stage.beta == previous.beta_next)
            report.add(m, "T_doubling", stage.T >= 2 * previous.T)
            report.add(m, "delta_decreasing", stage.log2_delta < previous.log2_delta)
            report.add(m, "kappa_monotone", stage.kappa >= previous.kappa)
    return report


def ratio_decreases(ratios: Sequence[float]) -> list[int]:
    """Indices i ≥ 1 at which ⟨X²⟩f⁵/T² fell below its value at stage i − 1."""
    return [i for i in range(1, len(ratios)) if ratios[i] < ratios[i - 1]]
