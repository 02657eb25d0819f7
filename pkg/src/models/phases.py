"""Phase sequences (θ_k, α_k, γ_k) feeding the scattering blocks."""

from abc import ABC, abstractmethod

import numpy as np

from src.components.errors import ValidationError
from src.components.model import (
    TWO_PI,
    BetaValue,
    ModelParams,
    phase_theta_array,
    reduce_angle,
)

PhaseArrays = tuple[np.ndarray, np.ndarray, np.ndarray]


class PhaseSequence(ABC):
    """Abstract provider of the phases θ_k, α_k, γ_k at integer sites k."""

    @abstractmethod
    def angles(self, ks: np.ndarray) -> PhaseArrays:
        """Returns the phases at the given sites.

        Args:
            ks: Integer array of sites (negative sites allowed).

        Returns:
            Arrays (theta, alpha, gamma), each the shape of `ks`, in [0, 2π).
        """
        raise NotImplementedError("The angles method must be implemented.")

    def at(self, k: int) -> tuple[float, float, float]:
        """Returns (θ_k, α_k, γ_k) for a single site."""
        theta, alpha, gamma = self.angles(np.array([k]))
        return float(theta[0]), float(alpha[0]), float(gamma[0])


class AlmostPeriodic(PhaseSequence):
    """θ_k = 2πβk + θ, α_k = α and γ_k = (−1)^(k+1)·α."""

    def __init__(self, beta: BetaValue, theta: float = 0.0, alpha: float = 0.0):
        self.beta = beta
        self.theta = reduce_angle(theta)
        self.alpha = reduce_angle(alpha)

    @classmethod
    def from_params(cls, params: ModelParams) -> "AlmostPeriodic":
        return cls(params.beta, params.theta, params.alpha)

    def angles(self, ks: np.ndarray) -> PhaseArrays:
        ks = np.asarray(ks, dtype=np.int64)
        theta = phase_theta_array(self.beta, self.theta, ks)
        alpha = np.full(ks.shape, self.alpha)
        odd = np.mod(ks, 2) == 1
        gamma = np.where(odd, self.alpha, reduce_angle(-self.alpha))
        return theta, alpha, gamma


class ExplicitArrays(PhaseSequence):
    """Phases read from arrays indexed from `first_site` on."""

    def __init__(
        self,
        theta: np.ndarray,
        alpha: np.ndarray,
        gamma: np.ndarray,
        first_site: int = 0,
    ):
        theta, alpha, gamma = (
            np.asarray(a, dtype=float) for a in (theta, alpha, gamma)
        )
        if not theta.shape == alpha.shape == gamma.shape or theta.ndim != 1:
            raise ValidationError("Phase arrays must be 1-d and of equal length")
        self._theta = np.mod(theta, TWO_PI)
        self._alpha = np.mod(alpha, TWO_PI)
        self._gamma = np.mod(gamma, TWO_PI)
        self.first_site = first_site

    @classmethod
    def random(
        cls, rng: np.random.Generator, first_site: int, size: int
    ) -> "ExplicitArrays":
        """Independent uniform phases, for generic tests."""
        draws = rng.uniform(0.0, TWO_PI, size=(3, size))
        return cls(draws[0], draws[1], draws[2], first_site)

    @property
    def last_site(self) -> int:
        return self.first_site + len(self._theta) - 1

    def angles(self, ks: np.ndarray) -> PhaseArrays:
        index = np.asarray(ks, dtype=np.int64) - self.first_site
        if index.size and (index.min() < 0 or index.max() >= len(self._theta)):
            raise ValidationError(
                f"Sites outside [{self.first_site}, {self.last_site}] requested"
            )
        return self._theta[index], self._alpha[index], self._gamma[index]


class ThetaZeroShift(PhaseSequence):
    """Wraps a sequence replacing θ_0 by θ_0 − λ.

    On the half line this reproduces the rank-one perturbation U_λ⁺.
    """

    def __init__(self, base: PhaseSequence, lam: float):
        self.base = base
        self.lam = lam

    def angles(self, ks: np.ndarray) -> PhaseArrays:
        theta, alpha, gamma = self.base.angles(ks)
        theta = np.where(np.asarray(ks) == 0, np.mod(theta - self.lam, TWO_PI), theta)
        return theta, alpha, gamma
