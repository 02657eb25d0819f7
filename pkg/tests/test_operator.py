import math

import numpy as np
import pytest

from src.components.errors import GeometryError, ValidationError
from src.components.model import ExactDyadic, make_params
from src.models.operator import (
    FullLine,
    HalfLine,
    assemble_full,
    assemble_half,
    assemble_perturbed,
    build_blocks,
    factorization_defect,
    perturb_rank_one,
    theta_covariance_check,
    unitarity_defect,
)
from src.models.phases import AlmostPeriodic, ExplicitArrays, ThetaZeroShift
from tests.conftest import random_params

N_DRAWS = 100


def generic_phases(rng, half_width):
    return ExplicitArrays.random(rng, -half_width - 6, 2 * half_width + 14)


def test_geometry_validation():
    with pytest.raises(ValidationError):
        HalfLine(7)
    with pytest.raises(ValidationError):
        HalfLine(6)
    with pytest.raises(ValidationError):
        FullLine(3)
    window = FullLine(10)
    assert window.n_dim == 21
    assert FullLine(4).n_dim == 9 and FullLine(4).sites()[0] == -4
    assert window.index(-10) == 0 and window.index(0) == 10
    assert HalfLine(8).index(1) == 0


def test_blocks_are_unitary(rng):
    params = random_params(rng)
    blocks = build_blocks(AlmostPeriodic.from_params(params), params, range(-3, 9))
    for block in blocks.blocks:
        np.testing.assert_allclose(block.conj().T @ block, np.eye(2), atol=1e-14)
    assert set(blocks.parity_blocks(0)) == {-2, 0, 2, 4, 6, 8}


def test_interior_unitarity_of_all_three_operators(rng):
    worst = 0.0
    for i in range(N_DRAWS):
        params = random_params(rng, exact=i % 2 == 0)
        for u in (
            assemble_full(params, FullLine(512)),
            assemble_half(params, 1024),
            assemble_perturbed(params, 1024),
        ):
            worst = max(worst, unitarity_defect(u).interior)
    assert worst < 1e-12


def test_open_cut_is_not_unitary_at_the_edge(half_params):
    defect = unitarity_defect(assemble_half(half_params, 64))
    assert defect.boundary > 1e-3


@pytest.mark.parametrize("full_line", [False, True])
def test_unitary_closure_is_exactly_unitary(rng, full_line):
    for _ in range(10):
        params = random_params(rng)
        if full_line:
            u = assemble_full(params, FullLine(40), boundary="unitary")
        else:
            u = perturb_rank_one(
                assemble_half(params, 80, boundary="unitary"), params.lam
            )
        defect = unitarity_defect(u)
        assert max(defect.interior, defect.boundary) < 1e-12
        dense = u.to_dense()
        np.testing.assert_allclose(dense.conj().T @ dense, np.eye(u.n_dim), atol=1e-12)


def test_closed_form_matches_factor_product(rng):
    worst = 0.0
    for i in range(N_DRAWS):
        params = random_params(rng, exact=i % 2 == 0)
        worst = max(
            worst,
            factorization_defect(params, FullLine(32)),
            factorization_defect(params, HalfLine(64)),
        )
    assert worst < 1e-13


def test_closed_form_matches_factor_product_for_generic_phases(rng):
    for _ in range(20):
        params = random_params(rng)
        phases = generic_phases(rng, 32)
        assert factorization_defect(params, FullLine(32), phases) < 1e-13
        assert factorization_defect(params, HalfLine(32), phases) < 1e-13


def test_half_line_first_column(rng):
    params = random_params(rng)
    phases = generic_phases(rng, 16)
    u = assemble_half(params, 16, phases=phases)
    th0 = phases.at(0)[0]
    th1, al1, ga1 = phases.at(1)
    lead = np.exp(-1j * (th0 + th1))
    column = u.column(0)
    expected = [
        params.r * lead * np.exp(-1j * al1),
        1j * params.t * lead * np.exp(-1j * ga1),
    ]
    np.testing.assert_allclose(column[:2], expected, atol=1e-14)
    assert np.all(column[2:] == 0)


def test_half_line_columns_agree_with_full_line(half_params):
    n = 40
    half = assemble_half(half_params, n)
    full = assemble_full(half_params, FullLine(n))
    start = full.geometry.index(2)
    np.testing.assert_allclose(
        half.bands[:, 1 : n - 3], full.bands[:, start : start + n - 4], atol=1e-15
    )


def test_theta_covariance_on_a_grid():
    base = make_params(t=0.6, alpha=0.4, lam=0.9, beta=ExactDyadic(5, 7))
    for theta in 2 * math.pi * np.arange(32) / 32:
        assert theta_covariance_check(base.replace(theta=float(theta)), 64) < 1e-13


def test_rank_one_perturbation_is_a_theta_zero_shift(rng):
    for _ in range(10):
        params = random_params(rng)
        perturbed = assemble_perturbed(params, 64)
        shift = ThetaZeroShift(AlmostPeriodic.from_params(params), params.lam)
        shifted = assemble_half(params, 64, phases=shift)
        assert np.max(np.abs(perturbed.bands - shifted.bands)) < 1e-13


def test_rank_one_perturbation_geometry(half_params):
    u = assemble_half(half_params, 32)
    assert perturb_rank_one(u, 0.0) is u
    full = assemble_full(half_params, FullLine(16))
    with pytest.raises(GeometryError):
        perturb_rank_one(full, 0.5)
    perturbed = perturb_rank_one(full, 0.5, allow_full_line=True)
    col = full.geometry.index(1)
    np.testing.assert_allclose(perturbed.column(col), full.column(col) * np.exp(0.5j))
    np.testing.assert_array_equal(perturbed.column(col + 1), full.column(col + 1))


def test_matvec_matches_dense(rng, half_params):
    u = assemble_full(half_params, FullLine(20))
    x = rng.normal(size=u.n_dim) + 1j * rng.normal(size=u.n_dim)
    np.testing.assert_allclose(u.matvec(x), u.to_dense() @ x, atol=1e-13)
    with pytest.raises(GeometryError):
        u.matvec(x[:-1])


def test_extreme_transmissions():
    reflecting = assemble_half(make_params(t=0.0, theta=0.2), 16)
    assert np.all(reflecting.bands[[0, 1, 3, 4]] == 0)
    transmitting = assemble_half(make_params(t=1.0, theta=0.2), 16)
    # φ_1 -> φ_2 and φ_{2k} -> φ_{2k+2}
    assert abs(transmitting.entry(1, 0)) == pytest.approx(1.0)
    assert abs(transmitting.entry(3, 1)) == pytest.approx(1.0)


def test_unknown_boundary_and_method(half_params):
    with pytest.raises(ValidationError):
        assemble_half(half_params, 16, boundary="periodic")
    with pytest.raises(ValidationError):
        assemble_half(half_params, 16, method="lanczos")
