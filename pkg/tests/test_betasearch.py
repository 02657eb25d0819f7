import json
import math
from dataclasses import replace

import numpy as np
import pytest

from src.components.errors import (
    BudgetExceededError,
    ConstructionFailure,
    ValidationError,
)
from src.components.model import ExactDyadic, FloatBeta, make_params
from src.models.betasearch import (
    LAMBDA_RANGE,
    BetaStage,
    ConstructionSettings,
    audit_stages,
    delta,
    delta_lower_bound,
    delta_series,
    estimate_constants,
    halton_samples,
    lemma5_bound,
    lemma5_check,
    next_beta,
    ratio_decreases,
    run_construction,
    select_T,
    theorem_gap,
    verify_stage,
)
from tests.conftest import T_HALF, random_params

SMALL_RUN = ConstructionSettings(n_stages=2, n_samples=3, max_T=256)


def stage_with(log2_delta, beta=ExactDyadic(1), kappa=0, m=1, T=2):
    return BetaStage(
        m=m,
        beta=beta,
        T=T,
        series_sum=delta_series(T),
        log2_delta=log2_delta,
        kappa=kappa,
        beta_next=beta,
    )


@pytest.fixture(scope="module")
def small_run():
    params = make_params(t=T_HALF)
    return params, run_construction(params, SMALL_RUN)


def test_delta_at_two():
    value = delta(2)
    assert value.series_sum == 32896
    assert value.log2_delta == pytest.approx(-15.17, abs=0.01)
    assert value.value() == pytest.approx(2.719e-5, rel=1e-3)
    assert value.exponent == -16
    with pytest.raises(ValidationError):
        delta(1)


def test_delta_is_decreasing():
    values = [delta(T).log2_delta for T in range(2, 200)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_delta_exponent_guard():
    assert delta_lower_bound(-3.0) == ExactDyadic.pow2(4)
    assert delta_lower_bound(-2.5) == ExactDyadic.pow2(3)
    assert delta_lower_bound(-3.0 + 1e-12) == ExactDyadic.pow2(4)


@pytest.mark.parametrize(
    "log2_delta,kappa",
    [(-15.17, 4), (-0.5, 2), (-100.0, 5)],
)
def test_next_beta_minimal_kappa(log2_delta, kappa):
    beta_next, chosen = next_beta([stage_with(log2_delta)])
    assert chosen == kappa
    assert beta_next - ExactDyadic(1) == ExactDyadic.pow2(math.factorial(kappa))


def test_next_beta_respects_earlier_radii():
    first = stage_with(-15.17, kappa=4)
    second = stage_with(-40.0, beta=first.beta + ExactDyadic.pow2(24), kappa=0, m=2)
    beta_next, kappa = next_beta([first, second])
    assert kappa == 5
    assert abs(beta_next - first.beta) < delta_lower_bound(first.log2_delta)
    with pytest.raises(ValidationError):
        next_beta([])


def test_select_T_is_minimal():
    T = select_T(1.0, 0.0, max_T=10**15)
    assert abs(T - math.ceil(math.exp(32) - 2)) <= 10
    assert theorem_gap(T, 1.0, 0.0) >= 0
    assert theorem_gap(T - 1, 1.0, 0.0) < 0


def test_select_T_budget_and_validation():
    with pytest.raises(BudgetExceededError):
        select_T(1.0, 1e6)
    with pytest.raises(BudgetExceededError):
        select_T(1.0, 0.0, t_min=5000)
    with pytest.raises(ValidationError):
        select_T(0.0, 0.1)


def test_halton_samples_are_deterministic_and_in_range():
    samples = halton_samples(8)
    assert samples == halton_samples(8)
    assert halton_samples(3, offset=5) == samples[5:]
    for theta, lam in samples:
        assert 0.0 < theta < 2 * math.pi
        assert LAMBDA_RANGE[0] <= lam <= LAMBDA_RANGE[1]


def test_verify_stage_extremes():
    samples = halton_samples(3)
    beta = ExactDyadic(1)
    ballistic = verify_stage(make_params(t=1.0), beta, 8, samples)
    assert ballistic.verified
    assert ballistic.n_dim == 36
    assert all(s.lhs == pytest.approx(1.0) for s in ballistic.samples)
    frozen = verify_stage(make_params(t=0.0), beta, 8, samples)
    assert not frozen.verified
    over_budget = verify_stage(make_params(t=1.0), beta, 8, samples, max_dim=16)
    assert not over_budget.complete and not over_budget.verified


def test_lemma5_bound():
    assert lemma5_bound(1, 1e-3) == pytest.approx(16 * math.pi * 1e-3)
    with pytest.raises(ValidationError):
        lemma5_bound(0, 1e-3)


def test_lemma5_holds_on_random_draws(rng):
    worst = 0.0
    for i in range(100):
        params = random_params(rng, exact=False)
        shift = float(rng.uniform(-1e-3, 1e-3))
        prime = params.replace(beta=FloatBeta(params.beta.value + shift))
        report = lemma5_check(params, prime, 6)
        assert report.holds, i
        worst = max(worst, report.max_ratio)
    assert 0.0 < worst <= 1.0


def test_lemma5_for_equal_frequencies(half_params):
    report = lemma5_check(half_params, half_params, 6)
    assert report.holds
    assert report.max_ratio == 0.0
    assert list(report.frame.columns) == ["n", "difference", "bound", "ratio"]


def test_estimate_constants(half_params):
    estimate = estimate_constants(half_params, 256)
    assert 0.0 < estimate.c1 <= 1.0
    assert estimate.c2 > 0.0
    assert 0.0 <= estimate.window[0] < estimate.window[1] < 2 * math.pi
    assert estimate.window_mass >= ConstructionSettings().min_mass
    assert estimate.closed_form_c1 > 0.0
    assert estimate.closed_form_c2 >= 2 * (2 + math.sqrt(3)) - 1e-9


def test_estimate_constants_without_transport():
    with pytest.raises(ConstructionFailure):
        estimate_constants(make_params(t=0.0), 64)


def test_settings_validation():
    with pytest.raises(ValidationError):
        ConstructionSettings(mode="heuristic")
    with pytest.raises(ValidationError):
        ConstructionSettings(forced_constants=(1.0,))
    with pytest.raises(ValidationError):
        ConstructionSettings(n_stages=0)


def test_empirical_construction_passes_the_audit(small_run):
    _, stages = small_run
    assert [s.m for s in stages] == [1, 2]
    assert stages[0].beta == ExactDyadic(1)
    assert stages[1].beta == stages[0].beta_next
    assert stages[1].T >= 2 * stages[0].T
    assert all(s.verified for s in stages)
    assert len(stages[0].persistence) == 2 and not stages[1].persistence
    report = audit_stages(stages)
    assert report.ok, report.to_frame()


def test_audit_detects_tampering(small_run):
    _, stages = small_run
    moved = replace(stages[1], beta=stages[1].beta + ExactDyadic.pow2(3))
    tampered = [stages[0], moved]
    report = audit_stages(tampered)
    assert not report.ok
    failed = {f.check for f in report.findings if not f.passed}
    assert "chain" in failed


def test_stage_records_survive_json(small_run):
    _, stages = small_run
    for stage in stages:
        data = json.loads(json.dumps(stage.to_dict()))
        restored = BetaStage.from_dict(data)
        assert restored.beta == stage.beta and restored.beta_next == stage.beta_next
        assert restored.series_sum == stage.series_sum
        assert restored.verified == stage.verified
    assert stages[0].to_dict()["kappa_factorial"] == math.factorial(stages[0].kappa)


def test_resumed_construction_matches(small_run):
    params, stages = small_run
    seen = []
    resumed = run_construction(
        params, SMALL_RUN, resume=stages[:1], on_stage=seen.append
    )
    assert len(seen) == 1
    assert [json.dumps(s.to_dict()) for s in resumed] == [
        json.dumps(s.to_dict()) for s in stages
    ]
    with pytest.raises(ValidationError):
        run_construction(params, SMALL_RUN, resume=stages[1:])


def test_rigorous_mode_reports_the_budget():
    settings = ConstructionSettings(
        mode="rigorous", forced_constants=(1.0, 0.0), max_T=4096
    )
    with pytest.raises(BudgetExceededError) as info:
        run_construction(make_params(t=T_HALF), settings)
    assert info.value.partial == []


def test_rigorous_mode_with_small_constants_threshold():
    # c2 = 0 and a large c1 make T = 2 admissible
    settings = ConstructionSettings(
        mode="rigorous",
        n_stages=1,
        n_samples=2,
        forced_constants=(4.0, 0.0),
        check_persistence=False,
    )
    stages = run_construction(make_params(t=1.0), settings)
    assert stages[0].T == 2
    assert stages[0].constants.forced
    assert stages[0].verified
    assert np.isclose(stages[0].c1, 4.0)


def test_empirical_T_is_the_first_passing_scale(small_run):
    params, stages = small_run
    t_min = 2
    for stage in stages:
        samples = [(s.theta, s.lam) for s in stage.verification.samples]
        if stage.T - 1 >= t_min:
            earlier = verify_stage(params, stage.beta, stage.T - 1, samples)
            assert not earlier.verified
        at_T = verify_stage(params, stage.beta, stage.T, samples)
        for direct, scanned in zip(at_T.samples, stage.verification.samples):
            assert direct.lhs == pytest.approx(scanned.lhs, rel=1e-12)
        t_min = 2 * stage.T


def test_scan_stops_at_the_dimension_budget():
    settings = ConstructionSettings(n_stages=1, n_samples=2, max_dim=16)
    with pytest.raises(BudgetExceededError) as info:
        run_construction(make_params(t=0.0), settings)
    assert "[2, 3]" in str(info.value)


@pytest.mark.parametrize(
    "ratios,drops",
    [([], []), ([1.0], []), ([1.0, 2.0, 2.0, 5.0], []), ([1.0, 2.0, 1.5, 3.0], [2])],
)
def test_ratio_decreases(ratios, drops):
    assert ratio_decreases(ratios) == drops
