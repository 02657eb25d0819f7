"""Subcommands of the experiment driver, the run cache and exit codes.

Each subcommand writes its artifacts into the output directory and returns
their paths. Artifacts depend only on the configuration (its digest is
embedded in every file), so a cached copy is returned when the same
subcommand ran before with the same digest.
"""

import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
import pandas as pd
from scipy.stats import unitary_group
from tqdm import tqdm

from src.components.config import VERSION, RunConfig
from src.components.errors import (
    EXIT_OK,
    BudgetExceededError,
    FloquetLabError,
    NumericFailure,
    ValidationError,
)
from src.components.file_utils import (
    append_jsonl,
    load_stages,
    read_csv,
    read_jsonl,
    stage_record,
    write_csv,
    write_jsonl,
    write_operator,
)
from src.components.model import ExactDyadic, ModelParams, make_params
from src.models.betasearch import (
    audit_stages,
    lemma5_check,
    ratio_decreases,
    run_construction,
)
from src.models.cocycle import lower_bound, lyapunov_grid
from src.models.evolution import (
    StateVector,
    evolution_dimension,
    evolve_moments,
    instability_ratio,
    lemma2_gap,
)
from src.models.operator import (
    FullLine,
    HalfLine,
    assemble_full,
    assemble_half,
    assemble_perturbed,
    factorization_defect,
    theta_covariance_check,
    unitarity_defect,
)
from src.models.phases import AlmostPeriodic, ThetaZeroShift
from src.models.profiles import get_profile
from src.models.spectral import (
    circle_grid,
    clark_consistency,
    energy_grid,
    localization_profile,
    poisson_test_function,
    spectral_average,
    windowed_tail_diagnostic,
)

logger = logging.getLogger(__name__)

# Environment variable naming the cache root.
CACHE_ENV = "FLOQUET_LAB_CACHE"
DEFAULT_CACHE_ROOT = os.path.join("~", ".cache", "floquet-lab")

# Dimension used by subcommands when experiment.n_dim is 0.
DEFAULT_DIMENSION = 256

# Tolerances of `operator check`.
UNITARITY_TOL = 1e-12
FACTORIZATION_TOL = 1e-13
COVARIANCE_TOL = 1e-13

# Orthogonal-split and frequency-shift draws: largest dimension, T and step count.
LEMMA2_MAX_DIM = 32
LEMMA2_MAX_T = 16
LEMMA5_STEPS = 6

TEST_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "cos": np.cos,
    "cos3_sin2": lambda E: np.cos(3 * E) + np.sin(2 * E),
    "poisson": poisson_test_function(0.5),
}


@dataclass
class RunContext:
    """Configuration and execution settings shared by the subcommands."""

    config: RunConfig
    out_dir: str
    threads: int = 1

    @property
    def digest(self) -> str:
        return self.config.digest()

    @property
    def params(self) -> ModelParams:
        return self.config.params()

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def map(self, fn: Callable, items: Iterable) -> list:
        """Order-preserving map, threaded when threads > 1."""
        if self.threads <= 1:
            return list(map(fn, items))
        with ThreadPoolExecutor(max_workers=self.threads) as executor:
            return list(executor.map(fn, items))

    def write_csv(self, name: str, frame: pd.DataFrame) -> str:
        path = self.path(name)
        write_csv(path, frame, self.digest, VERSION)
        logger.info(f"Wrote {path}")
        return path

    def dimension(self, default: int = DEFAULT_DIMENSION) -> int:
        return self.config.experiment.n_dim or default


@dataclass
class RunOutcome:
    exit_code: int
    artifacts: list[str] = field(default_factory=list)
    message: str = ""


def operator_check(ctx: RunContext) -> list[str]:
    """Unitarity, factorization, θ-covariance and rank-one phase-shift checks."""
    params = ctx.params
    n = ctx.dimension()
    half_width = n // 2
    rows = []
    for name, u in (
        ("U", assemble_full(params, FullLine(half_width))),
        ("U_plus", assemble_half(params, n)),
        ("U_lambda_plus", assemble_perturbed(params, n)),
        ("U_plus_unitary", assemble_half(params, n, boundary="unitary")),
    ):
        defect = unitarity_defect(u)
        rows.append(("unitarity_interior", name, defect.interior, UNITARITY_TOL))
        if u.boundary == "unitary":
            rows.append(("unitarity_boundary", name, defect.boundary, UNITARITY_TOL))
    for name, geometry in (("U", FullLine(half_width)), ("U_plus", HalfLine(n))):
        defect = factorization_defect(params, geometry)
        rows.append(("factorization", name, defect, FACTORIZATION_TOL))
    covariance = theta_covariance_check(params, n)
    rows.append(("theta_covariance", "U_plus", covariance, COVARIANCE_TOL))
    shift = ThetaZeroShift(AlmostPeriodic.from_params(params), params.lam)
    shifted = assemble_half(params, n, phases=shift)
    perturbed = assemble_perturbed(params, n)
    phase_shift = float(np.max(np.abs(shifted.bands - perturbed.bands)))
    rows.append(
        ("rank_one_phase_shift", "U_lambda_plus", phase_shift, FACTORIZATION_TOL)
    )
    frame = pd.DataFrame(rows, columns=["check", "operator", "value", "tolerance"])
    frame["passed"] = frame["value"] < frame["tolerance"]
    path = ctx.write_csv("operator_check.csv", frame)
    failed = frame[~frame["passed"]]
    if len(failed):
        raise NumericFailure(
            f"{len(failed)} operator check(s) failed: "
            f"{', '.join(failed['check'] + '/' + failed['operator'])}",
            {"artifact": path},
        )
    return [path]


def operator_export(ctx: RunContext) -> list[str]:
    """Writes U_λ(β,θ)⁺ (or U(β,θ) with experiment.full_line) as text."""
    params, experiment = ctx.params, ctx.config.experiment
    n = ctx.dimension()
    if experiment.full_line:
        u = assemble_full(params, FullLine(n // 2), boundary=experiment.boundary)
    else:
        u = assemble_perturbed(params, n, boundary=experiment.boundary)
    path = ctx.path("operator.txt")
    os.makedirs(ctx.out_dir, exist_ok=True)
    write_operator(path, u, {**params.to_dict(), "digest": ctx.digest})
    logger.info(f"Wrote {path}")
    return [path]


def evolve(ctx: RunContext) -> list[str]:
    """Moment series of φ_1 under U_λ(β,θ)⁺ (or φ_0 under U(β,θ))."""
    params, experiment = ctx.params, ctx.config.experiment
    n_max = experiment.n_max
    n = ctx.dimension(evolution_dimension(n_max))
    if experiment.full_line:
        # the light cone from site 0 reaches ±(2n_max + 2)
        half_width = experiment.n_dim // 2 or 2 * n_max + 2
        u = assemble_full(params, FullLine(half_width))
        psi0 = StateVector.basis(u.geometry, 0)
    else:
        u = assemble_perturbed(params, n)
        psi0 = StateVector.basis(u.geometry, 1)
    logger.info(f"Evolving {n_max} steps in dimension {u.n_dim}")
    series = evolve_moments(
        u, psi0, n_max, orders=(1, 2), profile=get_profile(experiment.profile)
    )
    return [ctx.write_csv("evolve.csv", instability_ratio(series).frame)]


def lyapunov(ctx: RunContext) -> list[str]:
    """Lyapunov exponents on a uniform E grid; dips below ln(1/t²) are flagged."""
    params, experiment = ctx.params, ctx.config.experiment
    energies = energy_grid(experiment.n_energies)
    results = lyapunov_grid(
        AlmostPeriodic.from_params(params),
        params,
        energies,
        experiment.n_factors,
        experiment.rescale_every,
        map_fn=ctx.map,
    )
    bound = lower_bound(params)
    frame = pd.DataFrame(
        {
            "E": [r.E for r in results],
            "gamma": [r.gamma for r in results],
            "stderr": [r.stderr for r in results],
            "n_factors": [r.n_factors for r in results],
            "lower_bound": bound,
        }
    )
    frame["dip"] = frame["gamma"] + 3.0 * frame["stderr"] < frame["lower_bound"]
    if frame["dip"].any():
        logger.warning(
            f"{int(frame['dip'].sum())} energies fall below ln(1/t^2) = {bound:.4f} "
            f"at theta={params.theta}"
        )
    return [ctx.write_csv("lyapunov.csv", frame)]


def spectrum(ctx: RunContext) -> list[str]:
    """Localization records of all eigenvectors of U_λ(β,θ)⁺ (unitary closure)."""
    params, experiment = ctx.params, ctx.config.experiment
    u = assemble_perturbed(params, ctx.dimension(), boundary="unitary")
    records = localization_profile(
        u, experiment.boundary_sites, experiment.boundary_mass, experiment.dense_limit
    )
    path = ctx.path("spectrum.jsonl")
    write_jsonl(
        path,
        ({"kind": "eigen", **record.to_dict()} for record in records),
        ctx.digest,
        VERSION,
    )
    logger.info(f"Wrote {path}")
    return [path]


def clark(ctx: RunContext) -> list[str]:
    """Direct-versus-transform errors of the Cauchy and Borel transforms."""
    params, experiment = ctx.params, ctx.config.experiment
    z_grid = circle_grid(experiment.z_radius, experiment.n_z)
    reports = ctx.map(
        lambda lam: clark_consistency(params, ctx.dimension(), lam, z_grid),
        experiment.lambdas,
    )
    frames = []
    for report in reports:
        table = report.table.copy()
        table.insert(0, "lam", report.lam)
        table["relation_error"] = report.relation_error
        frames.append(table)
    return [ctx.write_csv("clark.csv", pd.concat(frames, ignore_index=True))]


def average(ctx: RunContext) -> list[str]:
    """Spectral averaging over λ at n_lambda and 2·n_lambda grid points."""
    params, experiment = ctx.params, ctx.config.experiment
    try:
        test_function = TEST_FUNCTIONS[experiment.test_function]
    except KeyError:
        raise ValidationError(
            f"Unknown test function: {experiment.test_function} "
            f"(valid: {', '.join(TEST_FUNCTIONS)})",
            "experiment.test_function",
        ) from None
    rows = []
    for n_lambda in (experiment.n_lambda, 2 * experiment.n_lambda):
        result = spectral_average(
            params, ctx.dimension(64), test_function, n_lambda, map_fn=ctx.map
        )
        rows.append(
            {
                "test_function": experiment.test_function,
                "n_lambda": n_lambda,
                "lhs": result.lhs,
                "rhs": result.rhs,
                "defect": result.defect,
            }
        )
    return [ctx.write_csv("average.csv", pd.DataFrame(rows))]


def beta_search(ctx: RunContext) -> list[str]:
    """Runs or resumes the construction, then audits it.

    Stages are appended to `beta_search.jsonl` as they complete, so an
    interrupted run leaves a valid prefix that the next run resumes from.
    """
    params, settings = ctx.params, ctx.config.construction
    path = ctx.path("beta_search.jsonl")
    resume = []
    if os.path.exists(path):
        resume = load_stages(path, ctx.digest)
    write_jsonl(path, (stage_record(s) for s in resume), ctx.digest, VERSION)
    progress = tqdm(total=settings.n_stages, initial=len(resume), desc="Stages")

    def on_stage(stage) -> None:
        append_jsonl(path, stage_record(stage))
        progress.update(1)

    try:
        stages = run_construction(params, settings, resume, on_stage, ctx.map)
    finally:
        progress.close()
    f = settings.profile_fn
    audit = audit_stages(stages, f)
    artifacts = [path, ctx.write_csv("beta_audit.csv", audit.to_frame())]

    # instability ratio along the time scales, at the last frequency reached
    final = params.replace(beta=stages[-1].beta_next)
    T_max = stages[-1].T
    u = assemble_perturbed(final, evolution_dimension(T_max))
    series = instability_ratio(
        evolve_moments(u, StateVector.basis(u.geometry, 1), T_max, profile=f)
    )
    ratios = series.frame.set_index("n").loc[[s.T for s in stages], "ratio_f5"]
    frame = pd.DataFrame(
        {"m": [s.m for s in stages], "T": ratios.index, "ratio_f5": ratios.values}
    )
    artifacts.append(ctx.write_csv("beta_ratios.csv", frame))
    if not audit.ok:
        raise NumericFailure(
            f"Audit failed: {sum(not x.passed for x in audit.findings)} check(s)",
            {"artifact": artifacts[1]},
        )
    drops = ratio_decreases(frame["ratio_f5"].tolist())
    if drops:
        raise NumericFailure(
            "ratio_f5 decreases at stage(s) "
            f"{', '.join(str(frame['m'].iloc[i]) for i in drops)}",
            {"artifact": artifacts[2]},
        )
    return artifacts


def _lemma2_draw(rng: np.random.Generator) -> dict:
    dim = int(rng.integers(2, LEMMA2_MAX_DIM + 1))
    T = int(rng.integers(1, LEMMA2_MAX_T + 1))
    u = unitary_group.rvs(dim, random_state=rng)
    p_indices = np.flatnonzero(rng.random(dim) < 0.5)
    xi = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    xi /= np.linalg.norm(xi)
    # ψ: the part of ξ on a random coordinate subset, η ⟂ ψ the rest
    in_psi = rng.random(dim) < 0.5
    psi = np.where(in_psi, xi, 0.0)
    eta = xi - psi
    result = lemma2_gap(u, p_indices, eta, psi, T)
    return {
        "dim": dim,
        "T": T,
        "lhs": result.lhs,
        "rhs": result.rhs,
        "holds": result.holds(),
    }


def _random_dyadic(rng: np.random.Generator, bits: int = 20) -> ExactDyadic:
    return ExactDyadic(int(rng.integers(0, 1 << bits)), bits)


def _lemma5_draw(rng: np.random.Generator) -> dict:
    beta = _random_dyadic(rng)
    beta_prime = beta + ExactDyadic(int(rng.integers(1, 1 << 8)), 24)
    params = make_params(
        t=float(rng.uniform(0.05, 0.95)),
        theta=float(rng.uniform(0.0, 2 * np.pi)),
        lam=float(rng.uniform(0.0, 2 * np.pi)),
        beta=beta,
    )
    report = lemma5_check(params, params.replace(beta=beta_prime), LEMMA5_STEPS)
    return {
        "beta": str(beta),
        "beta_prime": str(beta_prime),
        "t": params.t,
        "theta": params.theta,
        "lam": params.lam,
        "max_ratio": report.max_ratio,
        "holds": report.holds,
    }


def verify(ctx: RunContext) -> list[str]:
    """Randomized split and frequency-shift suites plus the tail diagnostic.

    Draws are sequential from one seeded generator, so outputs are
    reproducible for a given experiment.seed.
    """
    experiment = ctx.config.experiment
    rng = np.random.default_rng(experiment.seed)
    n_lemma2 = 10 * experiment.n_draws
    lemma2 = pd.DataFrame(
        [_lemma2_draw(rng) for _ in tqdm(range(n_lemma2), desc="Split draws")]
    )
    lemma5 = pd.DataFrame(
        [_lemma5_draw(rng) for _ in tqdm(range(experiment.n_draws), desc="Shift draws")]
    )
    params = ctx.params
    u = assemble_perturbed(params, ctx.dimension(128), boundary="unitary")
    profile = get_profile(experiment.profile)
    rows = []
    for T in (4, 8, 16):
        diagnostic = windowed_tail_diagnostic(
            u, (0.0, 2 * np.pi), T, experiment.epsilon, profile
        )
        rows.append(
            {
                "T": T,
                "lhs": diagnostic.lhs,
                "rhs": diagnostic.rhs,
                "passes": diagnostic.passes,
            }
        )
    artifacts = [
        ctx.write_csv("verify_lemma2.csv", lemma2),
        ctx.write_csv("verify_lemma5.csv", lemma5),
        ctx.write_csv("verify_tail_diagnostic.csv", pd.DataFrame(rows)),
    ]
    violations = int((~lemma2["holds"]).sum() + (~lemma5["holds"]).sum())
    if violations:
        raise NumericFailure(
            f"{violations} inequality violation(s) in randomized checks",
            {"artifacts": artifacts},
        )
    return artifacts


# Per-artifact summary statistics of `report`: column and reduction.
SUMMARIES = {
    "operator_check.csv": ("passed", "all"),
    "evolve.csv": ("ratio_f5", "last"),
    "lyapunov.csv": ("gamma", "mean"),
    "clark.csv": ("error_F", "max"),
    "average.csv": ("defect", "last"),
    "beta_audit.csv": ("passed", "all"),
    "beta_ratios.csv": ("ratio_f5", "last"),
    "verify_lemma2.csv": ("holds", "all"),
    "verify_lemma5.csv": ("max_ratio", "max"),
    "verify_tail_diagnostic.csv": ("passes", "all"),
}


def report(ctx: RunContext) -> list[str]:
    """Summarizes all artifacts found in the output directory."""
    rows = []
    names = sorted(os.listdir(ctx.out_dir)) if os.path.isdir(ctx.out_dir) else []
    for name in names:
        path = ctx.path(name)
        if name == "report.csv":
            continue
        if name.endswith(".csv"):
            header, frame = read_csv(path)
            column, how = SUMMARIES.get(name, (None, None))
            value = None
            if column in frame:
                series = frame[column]
                value = {
                    "all": lambda s: bool(s.all()),
                    "last": lambda s: float(s.iloc[-1]),
                    "mean": lambda s: float(s.mean()),
                    "max": lambda s: float(s.max()),
                }[how](series)
            rows.append(
                {
                    "artifact": name,
                    "digest": header.get("digest"),
                    "version": header.get("version"),
                    "rows": len(frame),
                    "statistic": f"{how}({column})" if value is not None else "",
                    "value": value,
                }
            )
        elif name.endswith(".jsonl"):
            header, records = read_jsonl(path)
            rows.append(
                {
                    "artifact": name,
                    "digest": header.get("digest"),
                    "version": header.get("version"),
                    "rows": len(records),
                    "statistic": "",
                    "value": None,
                }
            )
    if not rows:
        raise ValidationError(f"No artifacts to report in {ctx.out_dir}", "out")
    return [ctx.write_csv("report.csv", pd.DataFrame(rows))]


COMMANDS: dict[str, Callable[[RunContext], list[str]]] = {
    "operator check": operator_check,
    "operator export": operator_export,
    "evolve": evolve,
    "lyapunov": lyapunov,
    "spectrum": spectrum,
    "clark": clark,
    "average": average,
    "beta search": beta_search,
    "verify": verify,
    "report": report,
}

# Subcommands whose output depends on other artifacts and is never cached.
UNCACHED = ("report", "beta search")


def cache_root() -> str:
    return os.path.expanduser(os.environ.get(CACHE_ENV, DEFAULT_CACHE_ROOT))


def _cache_dir(command: str, digest: str) -> str:
    key = hashlib.sha256(f"{command}\n{digest}\n{VERSION}".encode("utf-8"))
    return os.path.join(cache_root(), key.hexdigest()[:32])


def _from_cache(command: str, ctx: RunContext) -> Optional[list[str]]:
    manifest = os.path.join(_cache_dir(command, ctx.digest), "manifest.json")
    if not os.path.exists(manifest):
        return None
    with open(manifest, "r", encoding="utf-8") as f:
        names = json.load(f)["artifacts"]
    os.makedirs(ctx.out_dir, exist_ok=True)
    artifacts = []
    for name in names:
        target = ctx.path(name)
        shutil.copyfile(os.path.join(os.path.dirname(manifest), name), target)
        artifacts.append(target)
    logger.info(f"Cache hit for '{command}' ({ctx.digest[:12]})")
    return artifacts


def _to_cache(command: str, ctx: RunContext, artifacts: list[str]) -> None:
    directory = _cache_dir(command, ctx.digest)
    os.makedirs(directory, exist_ok=True)
    names = [os.path.basename(path) for path in artifacts]
    for path, name in zip(artifacts, names):
        shutil.copyfile(path, os.path.join(directory, name))
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump({"command": command, "artifacts": names}, f)


def run(
    command: str,
    config: RunConfig,
    out_dir: Optional[str] = None,
    threads: int = 1,
    use_cache: bool = True,
) -> RunOutcome:
    """Runs one subcommand and maps errors to exit codes.

    Args:
        command: A key of COMMANDS, e.g. "evolve" or "beta search".
        config: Validated configuration.
        out_dir: Artifact directory; defaults to config.output.dir.
        threads: Worker threads for grid experiments.
        use_cache: Whether the run cache may be read and written.

    Returns:
        Exit code, artifact paths and a message.
    """
    if command not in COMMANDS:
        message = f"Unknown subcommand: {command} (valid: {', '.join(COMMANDS)})"
        logger.error(message)
        return RunOutcome(ValidationError.exit_code, message=message)
    ctx = RunContext(config, out_dir or config.output.dir, max(threads, 1))
    cacheable = use_cache and config.output.cache and command not in UNCACHED
    if cacheable:
        cached = _from_cache(command, ctx)
        if cached is not None:
            return RunOutcome(EXIT_OK, cached, "cached")
    try:
        artifacts = COMMANDS[command](ctx)
    except BudgetExceededError as e:
        logger.warning(f"Partial result: {e}")
        return RunOutcome(e.exit_code, message=str(e))
    except FloquetLabError as e:
        logger.error(str(e))
        return RunOutcome(e.exit_code, message=str(e))
    if cacheable:
        _to_cache(command, ctx, artifacts)
    return RunOutcome(EXIT_OK, artifacts, "ok")
