import math

import numpy as np
import pytest

from src.components.errors import FitError, ValidationError
from src.components.model import ExactDyadic, make_params
from src.models.cocycle import (
    CocycleAccumulator,
    CoefficientSequence,
    boundary_vector,
    decay_rate,
    lower_bound,
    lyapunov,
    lyapunov_grid,
    pair_envelope,
    periodic_spectral_radius,
    solve_backward,
    solve_forward,
    solve_full_line,
    transfer_det,
    transfer_matrix,
    transfer_matrix_from_blocks,
)
from src.models.operator import assemble_half
from src.models.phases import AlmostPeriodic, ExplicitArrays
from src.models.spectral import eigensystem
from tests.conftest import T_HALF, random_params


def test_determinant_on_a_grid():
    ts = np.linspace(0.05, 0.95, 8)
    betas = [ExactDyadic(int(p), 6) for p in range(0, 64, 8)]
    for t in ts:
        for beta in betas:
            params = make_params(t=float(t), alpha=0.3, theta=1.1, beta=beta)
            phases = AlmostPeriodic.from_params(params)
            expected = np.exp(4j * math.pi * beta.to_float())
            for k in (-3, 1, 7):
                for E in np.linspace(0.0, 2 * math.pi, 8, endpoint=False):
                    det = transfer_matrix(phases, params, k, float(E)).det()
                    assert abs(det - expected) < 1e-12
                assert abs(transfer_det(phases, k) - expected) < 1e-12


def test_determinant_for_generic_phases(rng):
    params = random_params(rng)
    phases = ExplicitArrays.random(rng, -10, 40)
    for k in range(-3, 10):
        det = transfer_matrix(phases, params, k, 0.7).det()
        assert abs(det - transfer_det(phases, k)) < 1e-12
        assert abs(abs(det) - 1.0) < 1e-12


def test_closed_form_matches_block_solution(rng):
    for _ in range(50):
        params = random_params(rng)
        phases = ExplicitArrays.random(rng, -10, 40)
        k = int(rng.integers(-3, 10))
        E = float(rng.uniform(0.0, 2 * math.pi))
        np.testing.assert_allclose(
            transfer_matrix(phases, params, k, E).matrix,
            transfer_matrix_from_blocks(phases, params, k, E),
            atol=1e-10,
        )


def test_singular_at_zero_transmission():
    params = make_params(t=0.0)
    phases = AlmostPeriodic.from_params(params)
    with pytest.raises(ValidationError):
        transfer_matrix(phases, params, 1, 0.0)
    with pytest.raises(ValidationError):
        lower_bound(params)


def test_eigenvectors_solve_the_recursion():
    params = make_params(t=T_HALF, theta=0.4, beta=ExactDyadic(1, 2))
    phases = AlmostPeriodic.from_params(params)
    u = assemble_half(params, 256, boundary="unitary")
    system = eigensystem(u)
    in_band = [
        j
        for j, E in enumerate(system.phases)
        if periodic_spectral_radius(phases, params, float(E), 4) <= 1.0 + 1e-6
    ]
    in_band.sort(key=lambda j: -abs(system.vectors[0, j]))
    assert len(in_band) >= 20
    for j in in_band[:20]:
        v = system.vectors[:, j]
        coeffs = solve_forward(phases, params, float(system.phases[j]), v[0], 25)
        assert coeffs.first_site == 2
        expected = v[1:51]
        error = np.linalg.norm(coeffs.values - expected) / np.linalg.norm(expected)
        assert error < 1e-6


def test_forward_then_backward_roundtrip():
    params = make_params(t=math.sqrt(0.999), theta=0.2, beta=ExactDyadic(3, 5))
    phases = AlmostPeriodic.from_params(params)
    E = 1.3
    coeffs = solve_forward(phases, params, E, 1.0 + 0.5j, 100)
    top = (coeffs.at(200), coeffs.at(201))
    back = solve_backward(phases, params, E, top, 100, 99)
    np.testing.assert_allclose(back[-1], [coeffs.at(2), coeffs.at(3)], rtol=1e-8)


def test_full_line_solution_is_consistent():
    params = make_params(t=0.9, theta=0.5, beta=ExactDyadic(1, 3))
    phases = AlmostPeriodic.from_params(params)
    coeffs = solve_full_line(phases, params, 0.8, 1.0, 0.3j, 10)
    assert coeffs.first_site == -20
    assert coeffs.at(0) == 1.0 and coeffs.at(1) == 0.3j
    t_0 = transfer_matrix(phases, params, 0, 0.8).matrix
    pair = t_0 @ [coeffs.at(-2), coeffs.at(-1)]
    np.testing.assert_allclose(pair, [coeffs.at(0), coeffs.at(1)], atol=1e-10)


def test_decay_rate_of_synthetic_envelope():
    sites = np.arange(1, 201)
    values = np.exp(-0.3 * sites)
    assert decay_rate(values) == pytest.approx(-0.3, abs=1e-9)
    shifted = CoefficientSequence(0, np.exp(-0.3 * np.arange(0, 200)))
    assert decay_rate(shifted) == pytest.approx(-0.3, abs=1e-9)


def test_decay_rate_failures():
    with pytest.raises(FitError):
        decay_rate(np.ones(20))
    with pytest.raises(FitError):
        decay_rate(np.zeros(100))


def test_pair_envelope_uses_complete_pairs():
    sites, envelope = pair_envelope(np.array([5.0, 3.0, 4.0, 1.0]))
    np.testing.assert_array_equal(sites, [2])
    assert envelope[0] == pytest.approx(5.0)


def test_accumulator_matches_plain_product(rng):
    accumulator = CocycleAccumulator(rescale_every=3)
    product = np.eye(2, dtype=complex)
    for _ in range(40):
        factor = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        accumulator.push(factor)
        product = factor @ product
    expected = math.log(np.max(np.abs(product)))
    assert accumulator.log_norm() == pytest.approx(expected, rel=1e-10)
    with pytest.raises(ValidationError):
        CocycleAccumulator(0)


def test_lyapunov_exponent_exceeds_lower_bound(golden_params):
    phases_rng = np.random.default_rng(5)
    bound = lower_bound(golden_params)
    assert bound == pytest.approx(math.log(2.0))
    above = 0
    for _ in range(20):
        params = golden_params.replace(theta=float(phases_rng.uniform(0, 2 * math.pi)))
        E = float(phases_rng.uniform(0, 2 * math.pi))
        result = lyapunov(AlmostPeriodic.from_params(params), params, E, 10**5)
        assert result.stderr >= 0.0
        above += result.gamma >= bound - 0.05
    assert above >= 19


def test_lyapunov_validation(golden_params):
    phases = AlmostPeriodic.from_params(golden_params)
    with pytest.raises(ValidationError):
        lyapunov(phases, golden_params, 0.0, 999)


def test_lyapunov_grid_keeps_order(golden_params):
    phases = AlmostPeriodic.from_params(golden_params)
    energies = np.array([0.1, 2.0, 4.0])
    results = lyapunov_grid(phases, golden_params, energies, 2000)
    assert [r.E for r in results] == list(energies)
    assert results[1].gamma == lyapunov(phases, golden_params, 2.0, 2000).gamma


def test_periodic_radius_is_at_least_one():
    params = make_params(t=0.6, theta=0.9, beta=ExactDyadic(1, 2))
    phases = AlmostPeriodic.from_params(params)
    for E in np.linspace(0, 2 * math.pi, 50, endpoint=False):
        assert periodic_spectral_radius(phases, params, float(E), 4) >= 1.0 - 1e-9


def test_boundary_vector_without_reflection():
    params = make_params(t=1.0, alpha=0.2, theta=0.7, beta=ExactDyadic(3, 4))
    phases = AlmostPeriodic.from_params(params)
    th0, _, _ = phases.at(0)
    th1, _, ga1 = phases.at(1)
    E = 0.9
    a1, _ = boundary_vector(phases, params, E)
    assert a1 == pytest.approx(1j * np.exp(-1j * (E + ga1 + th1 + th0)), abs=1e-14)


def test_boundary_vector_is_periodic_in_energy(rng):
    params = random_params(rng)
    phases = AlmostPeriodic.from_params(params)
    for E in rng.uniform(0.0, 2 * math.pi, 5):
        here = boundary_vector(phases, params, float(E))
        there = boundary_vector(phases, params, float(E) + 2 * math.pi)
        np.testing.assert_allclose(here, there, atol=1e-13)
    with pytest.raises(ValidationError):
        boundary_vector(phases, make_params(t=0.0), 0.0)


def test_forward_solution_base_case_and_linearity(half_params):
    phases = AlmostPeriodic.from_params(half_params)
    a1, a2 = boundary_vector(phases, half_params, 2.1)
    base = solve_forward(phases, half_params, 2.1, 0.5, 1)
    np.testing.assert_array_equal(base.values, [0.5 * a1, 0.5 * a2])
    single = solve_forward(phases, half_params, 2.1, 1.0 - 1j, 30)
    double = solve_forward(phases, half_params, 2.1, 2.0 - 2j, 30)
    np.testing.assert_array_equal(double.values, 2 * single.values)
