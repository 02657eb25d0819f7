import logging
import math

import pytest

from scripts.floquet_lab import main
from src.components.config import VERSION, load_config
from src.components.errors import EXIT_BUDGET, EXIT_OK, EXIT_VALIDATION
from src.components.model import ExactDyadic
from src.components.file_utils import (
    load_stages,
    read_csv,
    read_jsonl,
    read_operator,
)
from src.components.runner import CACHE_ENV, run
from src.models.operator import assemble_perturbed

SMALL_CONSTRUCTION = [
    "construction.n_stages=2",
    "construction.n_samples=3",
    "construction.max_T=256",
]


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "cache"))


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def test_unknown_subcommand(tmp_path):
    outcome = run("plot", load_config(), out_dir=str(tmp_path))
    assert outcome.exit_code == EXIT_VALIDATION
    assert "valid:" in outcome.message


def test_evolve_selects_the_light_cone_dimension(tmp_path, caplog):
    config = load_config(overrides=["experiment.n_max=100"])
    with caplog.at_level(logging.INFO):
        outcome = run("evolve", config, out_dir=str(tmp_path), use_cache=False)
    assert outcome.exit_code == EXIT_OK
    assert "dimension 204" in caplog.text
    header, frame = read_csv(outcome.artifacts[0])
    assert header == {"digest": config.digest(), "version": VERSION}
    assert len(frame) == 101
    assert {"n", "x1", "x2", "norm", "tail_mass", "ratio_F", "ratio_f5"} <= set(
        frame.columns
    )


def test_full_line_evolution(tmp_path):
    config = load_config(
        overrides=["experiment.n_max=20", "experiment.full_line=true"]
    )
    outcome = run("evolve", config, out_dir=str(tmp_path), use_cache=False)
    assert outcome.exit_code == EXIT_OK
    _, frame = read_csv(outcome.artifacts[0])
    assert (abs(frame["norm"] - 1.0) < 1e-10).all()


def test_verify_is_deterministic(tmp_path):
    config = load_config(overrides=["experiment.n_draws=3", "experiment.seed=42"])
    first = run("verify", config, out_dir=str(tmp_path / "a"), use_cache=False)
    second = run("verify", config, out_dir=str(tmp_path / "b"), use_cache=False)
    assert first.exit_code == second.exit_code == EXIT_OK
    assert len(first.artifacts) == 3
    for a, b in zip(first.artifacts, second.artifacts):
        assert read_bytes(a) == read_bytes(b)
    _, lemma2 = read_csv(first.artifacts[0])
    assert len(lemma2) == 30 and lemma2["holds"].all()


def test_cached_run_is_identical(tmp_path):
    config = load_config(overrides=["experiment.n_max=20"])
    fresh = run("evolve", config, out_dir=str(tmp_path / "a"))
    cached = run("evolve", config, out_dir=str(tmp_path / "b"))
    assert fresh.message == "ok" and cached.message == "cached"
    assert read_bytes(fresh.artifacts[0]) == read_bytes(cached.artifacts[0])
    other = load_config(overrides=["experiment.n_max=21"])
    assert run("evolve", other, out_dir=str(tmp_path / "c")).message == "ok"


def test_operator_check_and_export(tmp_path):
    config = load_config(overrides=["experiment.n_dim=64", "model.lam=0.5"])
    check = run("operator check", config, out_dir=str(tmp_path), use_cache=False)
    assert check.exit_code == EXIT_OK
    _, frame = read_csv(check.artifacts[0])
    assert frame["passed"].all()
    export = run("operator export", config, out_dir=str(tmp_path), use_cache=False)
    restored = read_operator(export.artifacts[0])
    expected = assemble_perturbed(config.params(), 64)
    assert restored.geometry == expected.geometry
    assert (restored.bands == expected.bands).all()


def test_unknown_test_function(tmp_path):
    config = load_config(overrides=['experiment.test_function="sinc"'])
    outcome = run("average", config, out_dir=str(tmp_path), use_cache=False)
    assert outcome.exit_code == EXIT_VALIDATION


def test_budget_exceeded_is_a_partial_result(tmp_path):
    config = load_config(
        overrides=[
            'construction.mode="rigorous"',
            "construction.forced_constants=[1.0, 0.0]",
        ]
    )
    outcome = run("beta search", config, out_dir=str(tmp_path))
    assert outcome.exit_code == EXIT_BUDGET
    header, records = read_jsonl(str(tmp_path / "beta_search.jsonl"))
    assert header["digest"] == config.digest()
    assert records == []


def test_beta_search_resume_is_equivalent(tmp_path):
    config = load_config(overrides=SMALL_CONSTRUCTION + ["model.t=1.0"])
    full = run("beta search", config, out_dir=str(tmp_path / "full"))
    assert full.exit_code == EXIT_OK
    names = ["beta_search.jsonl", "beta_audit.csv", "beta_ratios.csv"]
    assert [p.rsplit("/", 1)[-1] for p in full.artifacts] == names

    lines = read_bytes(tmp_path / "full" / "beta_search.jsonl").split(b"\n")
    resumed_dir = tmp_path / "resumed"
    resumed_dir.mkdir()
    # header, stage 1 and a torn write of stage 2
    (resumed_dir / "beta_search.jsonl").write_bytes(
        b"\n".join(lines[:2]) + b"\n" + lines[2][:40]
    )
    resumed = run("beta search", config, out_dir=str(resumed_dir))
    assert resumed.exit_code == EXIT_OK
    for name in names:
        assert read_bytes(tmp_path / "full" / name) == read_bytes(resumed_dir / name)
    stages = load_stages(str(resumed_dir / "beta_search.jsonl"), config.digest())
    assert [s.m for s in stages] == [1, 2]


@pytest.mark.slow
def test_default_construction_grows_the_ratio(tmp_path):
    config = load_config()
    outcome = run("beta search", config, out_dir=str(tmp_path), use_cache=False)
    assert outcome.exit_code == EXIT_OK, outcome.message
    _, ratios = read_csv(str(tmp_path / "beta_ratios.csv"))
    assert list(ratios["m"]) == [1, 2, 3]
    assert (ratios["ratio_f5"].diff().dropna() >= 0).all()
    stages = load_stages(str(tmp_path / "beta_search.jsonl"), config.digest())
    for previous, stage in zip(stages, stages[1:]):
        increment = ExactDyadic.pow2(math.factorial(previous.kappa))
        assert stage.beta - previous.beta == increment
        assert stage.T >= 2 * previous.T


def test_resume_rejects_foreign_audit(tmp_path):
    config = load_config(overrides=SMALL_CONSTRUCTION + ["model.t=1.0"])
    run("beta search", config, out_dir=str(tmp_path))
    other = load_config(overrides=SMALL_CONSTRUCTION + ["model.t=0.9"])
    outcome = run("beta search", other, out_dir=str(tmp_path))
    assert outcome.exit_code == EXIT_VALIDATION


def test_report_summarizes_artifacts(tmp_path):
    config = load_config(overrides=["experiment.n_max=20", "experiment.n_dim=64"])
    empty = run("report", config, out_dir=str(tmp_path / "empty"))
    assert empty.exit_code == EXIT_VALIDATION
    run("evolve", config, out_dir=str(tmp_path), use_cache=False)
    run("operator check", config, out_dir=str(tmp_path), use_cache=False)
    outcome = run("report", config, out_dir=str(tmp_path))
    assert outcome.exit_code == EXIT_OK
    _, frame = read_csv(outcome.artifacts[0])
    assert list(frame["artifact"]) == ["evolve.csv", "operator_check.csv"]
    assert set(frame["digest"]) == {config.digest()}


def test_command_line(tmp_path):
    out = str(tmp_path)
    evolve = ["evolve", "--set", "experiment.n_max=10", "--out", out, "--no-cache"]
    assert main(evolve) == EXIT_OK
    assert (tmp_path / "evolve.csv").exists()
    assert main(["operator", "explode", "--out", out]) == EXIT_VALIDATION
    assert main(["evolve", "--seed", "-1", "--out", out]) == EXIT_VALIDATION
    assert main(["evolve", "--set", "model.gamma=1", "--out", out]) == EXIT_VALIDATION
    verify = ["verify", "--seed", "7", "--set", "experiment.n_draws=2", "--out", out]
    assert main(verify) == EXIT_OK
