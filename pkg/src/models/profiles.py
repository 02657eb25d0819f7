"""Growth profiles f(n) used by the instability functionals."""

import math
from abc import ABC, abstractmethod


class Profile(ABC):
    """Monotone diverging sequence n -> f(n) > 0."""

    name: str

    @abstractmethod
    def __call__(self, n: float) -> float:
        raise NotImplementedError("The __call__ method must be implemented.")


class LogPowerProfile(Profile):
    """f(n) = (ln(2 + |n|))^power."""

    def __init__(self, power: float = 0.2):
        if power <= 0:
            raise ValueError(f"Profile power must be positive, got {power}")
        self.power = power
        self.name = f"log_power_{power:g}"

    def __call__(self, n: float) -> float:
        return math.log(2.0 + abs(n)) ** self.power


# The default profile f(n) = (ln(2+n))^{1/5}.
DEFAULT_PROFILE = LogPowerProfile(0.2)

PROFILES = {
    "log_fifth_root": DEFAULT_PROFILE,
    "log": LogPowerProfile(1.0),
}


def get_profile(name: str) -> Profile:
    """Looks up a profile by its configuration name."""
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(
            f"Unknown profile: {name} (valid: {', '.join(sorted(PROFILES))})"
        ) from None


def theorem_rate(n: int) -> float:
    """F(n) = n² / ln(2 + n), with F(0) := ln 2."""
    if n == 0:
        return math.log(2.0)
    return n * n / math.log(2.0 + n)
