"""Run configuration: TOML sections, command-line overrides and digest."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import toml

from src.components.errors import ValidationError
from src.components.model import ModelParams, make_params, parse_beta
from src.models.betasearch import ConstructionSettings

VERSION = "0.3.0"

# Largest half-line dimension the runner will build.
MAX_DIMENSION = 1 << 20


@dataclass(frozen=True)
class ModelSection:
    """[model]: parameters of U_λ(β,θ)⁺."""

    t: float = 0.7071067811865476
    alpha: float = 0.0
    theta: float = 0.0
    lam: float = 0.0
    beta_mode: str = "exact"
    beta: str = "1"

    def to_params(self) -> ModelParams:
        return make_params(
            t=self.t,
            alpha=self.alpha,
            theta=self.theta,
            lam=self.lam,
            beta=parse_beta(self.beta_mode, self.beta),
        )


@dataclass(frozen=True)
class ExperimentSection:
    """[experiment]: sizes, grids and seeds of the subcommands.

    n_dim = 0 lets each subcommand choose the smallest adequate dimension.
    """

    n_dim: int = 0
    full_line: bool = False
    boundary: str = "open"
    n_max: int = 100
    profile: str = "log_fifth_root"
    n_energies: int = 64
    n_factors: int = 100000
    rescale_every: int = 16
    n_z: int = 256
    z_radius: float = 0.9
    lambdas: tuple[float, ...] = (
        0.5235987755982988,
        1.0471975511965976,
        1.5707963267948966,
        3.141592653589793,
    )
    n_lambda: int = 256
    test_function: str = "cos"
    epsilon: float = 0.02
    dense_limit: int = 2048
    boundary_sites: int = 10
    boundary_mass: float = 0.05
    n_draws: int = 100
    seed: int = 0


@dataclass(frozen=True)
class OutputSection:
    """[output]: artifact directory and cache toggle."""

    dir: str = "runs"
    cache: bool = True


SECTIONS = {
    "model": ModelSection,
    "experiment": ExperimentSection,
    "construction": ConstructionSettings,
    "output": OutputSection,
}


def _coerce(section: str, spec: dataclasses.Field, value: Any) -> Any:
    name = f"{section}.{spec.name}"
    default = spec.default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{name} must be true or false, got {value!r}", name)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{name} must be an integer, got {value!r}", name)
        if value != int(value):
            raise ValidationError(f"{name} must be an integer, got {value!r}", name)
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{name} must be a number, got {value!r}", name)
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValidationError(f"{name} must be a list, got {value!r}", name)
        return tuple(float(v) for v in value)
    return str(value)


def _build_section(section: str, values: dict) -> Any:
    cls = SECTIONS[section]
    specs = {spec.name: spec for spec in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(specs))
    if unknown:
        raise ValidationError(
            f"Unknown key(s) in [{section}]: {', '.join(unknown)} "
            f"(valid: {', '.join(sorted(specs))})",
            f"{section}.{unknown[0]}",
        )
    kwargs = {key: _coerce(section, specs[key], value) for key, value in values.items()}
    return cls(**kwargs)


@dataclass(frozen=True)
class RunConfig:
    """Complete, validated configuration of one run."""

    model: ModelSection = field(default_factory=ModelSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    construction: ConstructionSettings = field(default_factory=ConstructionSettings)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        # fail early on unparsable model parameters
        self.model.to_params()
        if self.experiment.boundary not in ("open", "unitary"):
            raise ValidationError(
                f"Unknown boundary: {self.experiment.boundary}", "experiment.boundary"
            )
        if not 0 <= self.experiment.n_dim <= MAX_DIMENSION:
            raise ValidationError(
                f"n_dim must lie in [0, {MAX_DIMENSION}], got {self.experiment.n_dim}",
                "experiment.n_dim",
            )

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ValidationError(
                f"Unknown section(s): {', '.join(unknown)} "
                f"(valid: {', '.join(SECTIONS)})",
                unknown[0],
            )
        for section, values in data.items():
            if not isinstance(values, dict):
                raise ValidationError(f"[{section}] must be a table", section)
        return cls(
            **{
                section: _build_section(section, data.get(section, {}))
                for section in SECTIONS
            }
        )

    def to_dict(self) -> dict:
        data = {}
        for section in SECTIONS:
            values = dataclasses.asdict(getattr(self, section))
            data[section] = {
                key: list(value) if isinstance(value, tuple) else value
                for key, value in values.items()
            }
        return data

    def to_toml(self) -> str:
        return toml.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            data = toml.loads(text)
        except toml.TomlDecodeError as e:
            raise ValidationError(f"Invalid TOML: {e}") from e
        return cls.from_dict(data)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON serialization."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def params(self) -> ModelParams:
        return self.model.to_params()


def parse_override(text: str) -> tuple[str, str, Any]:
    """Parses "section.key=value"; the value is read as TOML, else a string.

    Raises:
        ValidationError: If the text is not of that form.
    """
    key, sep, raw = text.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not section or not name:
        raise ValidationError(
            f"Override must look like section.key=value, got {text!r}", key
        )
    try:
        value = toml.loads(f"v = {raw.strip()}")["v"]
    except toml.TomlDecodeError:
        value = raw.strip()
    return section, name, value


def load_config(
    path: Optional[str] = None, overrides: Sequence[str] = ()
) -> RunConfig:
    """Reads a TOML file (or the defaults) and applies --set overrides.

    Args:
        path: Configuration file; None uses the defaults.
        overrides: Strings "section.key=value", applied in order.

    Returns:
        The validated configuration.

    Raises:
        ValidationError: On unknown sections or keys and invalid values.
    """
    data: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = toml.load(f)
        except OSError as e:
            raise ValidationError(f"Cannot read config {path}: {e}", "config") from e
        except toml.TomlDecodeError as e:
            raise ValidationError(f"Invalid TOML in {path}: {e}", "config") from e
    for text in overrides:
        section, name, value = parse_override(text)
        data.setdefault(section, {})[name] = value
    return RunConfig.from_dict(data)
