"""Model parameters, exact dyadic frequencies and phase generation."""

import hashlib
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import total_ordering
from typing import Union

import numpy as np

from src.components.errors import BudgetExceededError, ValidationError

TWO_PI = 2.0 * math.pi

# Largest exponent q accepted for p/2^q (bits of the denominator).
MAX_DYADIC_EXPONENT = 1 << 26

# (sqrt(5) - 1) / 2, the float-mode default irrational frequency.
GOLDEN_MEAN = (math.sqrt(5.0) - 1.0) / 2.0


def reduce_angle(value: float) -> float:
    """Reduces an angle to [0, 2π)."""
    reduced = value % TWO_PI
    # x % 2π rounds up to 2π for tiny negative x
    return 0.0 if reduced >= TWO_PI else reduced


@total_ordering
@dataclass(frozen=True)
class ExactDyadic:
    """Exact dyadic rational p / 2^q kept in lowest terms."""

    p: int
    q: int = 0

    def __post_init__(self):
        if self.q < 0:
            raise ValidationError(f"Negative dyadic exponent: {self.q}", "q")
        if self.q > MAX_DYADIC_EXPONENT:
            raise BudgetExceededError(
                f"Dyadic exponent {self.q} exceeds {MAX_DYADIC_EXPONENT} bits"
            )
        p, q = self.p, self.q
        if p == 0:
            q = 0
        elif q > 0:
            shift = min((p & -p).bit_length() - 1, q)
            p, q = p >> shift, q - shift
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    mode = "exact"

    @classmethod
    def from_fraction(cls, value: Fraction) -> "ExactDyadic":
        """Converts a fraction whose denominator is a power of two."""
        denominator = value.denominator
        if denominator & (denominator - 1):
            raise ValidationError(
                f"Denominator {denominator} is not a power of two", "beta"
            )
        return cls(value.numerator, denominator.bit_length() - 1)

    @classmethod
    def pow2(cls, exponent: int) -> "ExactDyadic":
        """Returns 2^(-exponent)."""
        return cls(1, exponent)

    def _aligned(self, other: "ExactDyadic") -> tuple[int, int, int]:
        q = max(self.q, other.q)
        return self.p << (q - self.q), other.p << (q - other.q), q

    def __add__(self, other: "ExactDyadic") -> "ExactDyadic":
        a, b, q = self._aligned(other)
        return ExactDyadic(a + b, q)

    def __sub__(self, other: "ExactDyadic") -> "ExactDyadic":
        a, b, q = self._aligned(other)
        return ExactDyadic(a - b, q)

    def __neg__(self) -> "ExactDyadic":
        return ExactDyadic(-self.p, self.q)

    def __abs__(self) -> "ExactDyadic":
        return ExactDyadic(abs(self.p), self.q)

    def __mul__(self, factor: int) -> "ExactDyadic":
        if not isinstance(factor, int):
            return NotImplemented
        return ExactDyadic(self.p * factor, self.q)

    __rmul__ = __mul__

    def __lt__(self, other: "ExactDyadic") -> bool:
        a, b, _ = self._aligned(other)
        return a < b

    def sign(self) -> int:
        return (self.p > 0) - (self.p < 0)

    def to_fraction(self) -> Fraction:
        return Fraction(self.p, 1 << self.q)

    def to_float(self) -> float:
        """Correctly rounded double value."""
        return self.p / (1 << self.q)

    def frac_times(self, k: int) -> float:
        """Returns frac(βk) computed in integer arithmetic."""
        if self.q == 0:
            return 0.0
        modulus = 1 << self.q
        return ((self.p * k) % modulus) / modulus

    def to_dict(self) -> dict:
        return {"mode": "exact", "p_hex": hex(self.p), "q": self.q}

    def __str__(self) -> str:
        return f"{self.p}/2^{self.q}"


@dataclass(frozen=True)
class FloatBeta:
    """Double-precision frequency for irrational demonstrations."""

    value: float

    mode = "float"

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValidationError(f"Non-finite beta: {self.value}", "beta")

    def to_float(self) -> float:
        return self.value

    def frac_times(self, k: int) -> float:
        return (self.value * k) % 1.0

    def to_dict(self) -> dict:
        return {"mode": "float", "value": self.value}

    def __str__(self) -> str:
        return repr(self.value)


BetaValue = Union[ExactDyadic, FloatBeta]


def parse_beta(mode: str, value: Union[str, int, float]) -> BetaValue:
    """Parses a frequency from its configuration representation.

    Args:
        mode: Either "exact" or "float".
        value: Exact mode accepts integers, "p/q" with q a power of two and
            "p/2^q"; float mode accepts numbers and the name "golden".

    Returns:
        The frequency as ExactDyadic or FloatBeta.

    Raises:
        ValidationError: If the mode is unknown or the value cannot be parsed.
    """
    if mode == "exact":
        if isinstance(value, float):
            # every finite double is a dyadic rational
            return ExactDyadic.from_fraction(Fraction(value))
        text = str(value).replace(" ", "")
        if "/2^" in text:
            numerator, exponent = text.split("/2^")
            return ExactDyadic(int(numerator), int(exponent))
        try:
            return ExactDyadic.from_fraction(Fraction(text))
        except ValueError as e:
            raise ValidationError(f"Cannot parse exact beta: {value}", "beta") from e
    if mode == "float":
        if isinstance(value, str) and value.strip().lower() == "golden":
            return FloatBeta(GOLDEN_MEAN)
        try:
            return FloatBeta(float(value))
        except ValueError as e:
            raise ValidationError(f"Cannot parse float beta: {value}", "beta") from e
    raise ValidationError(f"Unknown beta mode: {mode}", "beta_mode")


def beta_from_dict(data: dict) -> BetaValue:
    """Inverse of `to_dict` for both beta modes."""
    if data["mode"] == "exact":
        return ExactDyadic(int(data["p_hex"], 16), int(data["q"]))
    return FloatBeta(float(data["value"]))


@dataclass(frozen=True)
class ModelParams:
    """All parameters of the model; r is derived from t."""

    t: float
    alpha: float
    theta: float
    lam: float
    beta: BetaValue

    @property
    def r(self) -> float:
        return math.sqrt(1.0 - self.t * self.t)

    def replace(self, **changes) -> "ModelParams":
        """Returns validated parameters with some fields changed."""
        fields = {
            "t": self.t,
            "alpha": self.alpha,
            "theta": self.theta,
            "lam": self.lam,
            "beta": self.beta,
        }
        fields.update(changes)
        return make_params(**fields)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "alpha": self.alpha,
            "theta": self.theta,
            "lam": self.lam,
            "beta": self.beta.to_dict(),
        }

    def digest(self) -> str:
        """Short stable hash of the parameters."""
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def make_params(
    t: float,
    alpha: float = 0.0,
    theta: float = 0.0,
    lam: float = 0.0,
    beta: BetaValue = ExactDyadic(1),
) -> ModelParams:
    """Validates the model parameters and reduces all angles to [0, 2π).

    Args:
        t: Transmission amplitude in [0, 1].
        alpha: Reflection phase.
        theta: Global phase offset of the θ_k sequence.
        lam: Rank-one perturbation phase.
        beta: Frequency, exact dyadic or float.

    Returns:
        The validated parameters.

    Raises:
        ValidationError: If t is out of range or an angle is not finite.
    """
    if not (isinstance(t, (int, float)) and math.isfinite(t)) or not 0.0 <= t <= 1.0:
        raise ValidationError(f"t must lie in [0, 1], got {t}", "t")
    angles = {"alpha": alpha, "theta": theta, "lam": lam}
    for name, value in angles.items():
        if not math.isfinite(value):
            raise ValidationError(f"Non-finite angle {name}: {value}", name)
    if not isinstance(beta, (ExactDyadic, FloatBeta)):
        raise ValidationError(f"Unsupported beta type: {type(beta).__name__}", "beta")
    return ModelParams(
        t=float(t),
        alpha=reduce_angle(alpha),
        theta=reduce_angle(theta),
        lam=reduce_angle(lam),
        beta=beta,
    )


def phase_theta(beta: BetaValue, theta: float, k: int) -> float:
    """Returns θ_k = 2π·frac(βk) + θ reduced to [0, 2π)."""
    return reduce_angle(TWO_PI * beta.frac_times(k) + theta)


def phase_theta_array(beta: BetaValue, theta: float, ks: np.ndarray) -> np.ndarray:
    """Vectorized `phase_theta` over an integer array of sites."""
    if isinstance(beta, ExactDyadic):
        fracs = np.array([beta.frac_times(int(k)) for k in ks], dtype=float)
    else:
        fracs = np.mod(beta.value * np.asarray(ks, dtype=float), 1.0)
    values = np.mod(TWO_PI * fracs + theta, TWO_PI)
    values[values >= TWO_PI] = 0.0
    return values


def dyadic_add_pow2(beta: ExactDyadic, kappa_factorial: int) -> ExactDyadic:
    """Returns β + 2^(-kappa_factorial) exactly.

    Raises:
        ValidationError: If the exponent is smaller than 1.
        BudgetExceededError: If the exponent exceeds MAX_DYADIC_EXPONENT.
    """
    if kappa_factorial < 1:
        raise ValidationError(
            f"Exponent must be at least 1, got {kappa_factorial}", "kappa_factorial"
        )
    return beta + ExactDyadic.pow2(kappa_factorial)

