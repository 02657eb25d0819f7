"""Banded unitary truncations of the Floquet operator U = U_o U_e.

Three operators are built on finite windows of sites:

- U(β,θ) on a full-line window of sites −N..N,
- U(β,θ)⁺ on the half line, sites 1..N,
- U_λ(β,θ)⁺ = U⁺(I + (e^{iλ}−1)P_{φ1}), the rank-one perturbation.

Matrices are stored as five diagonals. `bands[o + 2, col]` holds the entry
in row `col + o` (storage indices), so column semantics are direct and the
matrix-vector product is O(N).

The closed-form columns are the default build; the product of the two
block-diagonal factors is kept as an independent cross-check. With
``boundary="unitary"`` the factor blocks leaving the window are replaced by
1×1 phases, which makes the finite matrix exactly unitary; with the default
``boundary="open"`` the window is a plain cut of the infinite matrix.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import sparse

from src.components.errors import GeometryError, ValidationError
from src.components.model import ModelParams
from src.models.phases import AlmostPeriodic, PhaseSequence

logger = logging.getLogger(__name__)

# Band offsets (row - col) of the pentadiagonal storage.
OFFSETS = (-2, -1, 0, 1, 2)

# Columns next to each cut excluded from the interior unitarity check.
EDGE_COLUMNS = 2

BOUNDARIES = ("open", "unitary")


@dataclass(frozen=True)
class HalfLine:
    """Sites 1..n_dim; storage index = site − 1."""

    n_dim: int

    kind = "half"

    def __post_init__(self):
        if self.n_dim < 8 or self.n_dim % 2:
            raise ValidationError(
                f"Half-line dimension must be even and >= 8, got {self.n_dim}",
                "n_dim",
            )

    @property
    def first_site(self) -> int:
        return 1

    @property
    def last_site(self) -> int:
        return self.n_dim

    def sites(self) -> np.ndarray:
        return np.arange(self.first_site, self.last_site + 1)

    def index(self, site: int) -> int:
        return site - self.first_site


@dataclass(frozen=True)
class FullLine:
    """Sites −N..N, so n_dim = 2N + 1 for window size 2N.

    The 1-based storage index is site + N + 1 (0-based `index` is site + N).
    """

    half_width: int

    kind = "full"

    def __post_init__(self):
        if self.half_width < 4:
            raise ValidationError(
                f"Full-line window size must be >= 8, got {2 * self.half_width}",
                "half_width",
            )

    @property
    def n_dim(self) -> int:
        return 2 * self.half_width + 1

    @property
    def first_site(self) -> int:
        return -self.half_width

    @property
    def last_site(self) -> int:
        return self.half_width

    def sites(self) -> np.ndarray:
        return np.arange(self.first_site, self.last_site + 1)

    def index(self, site: int) -> int:
        return site - self.first_site


Geometry = Union[HalfLine, FullLine]


@dataclass(frozen=True)
class UnitarityDefect:
    """Max-norm defects of U†U − I inside the window and at its cuts."""

    interior: float
    boundary: float


@dataclass(frozen=True)
class BandedUnitary:
    """Pentadiagonal truncation of a Floquet operator."""

    geometry: Geometry
    bands: np.ndarray
    params_digest: str
    boundary: str = "open"

    @property
    def n_dim(self) -> int:
        return self.geometry.n_dim

    def entry(self, row: int, col: int) -> complex:
        """Entry at storage indices (row, col)."""
        offset = row - col
        if abs(offset) > 2:
            return 0j
        return complex(self.bands[offset + 2, col])

    def column(self, col: int) -> np.ndarray:
        """Dense copy of one column (storage index)."""
        out = np.zeros(self.n_dim, dtype=complex)
        for offset in OFFSETS:
            row = col + offset
            if 0 <= row < self.n_dim:
                out[row] = self.bands[offset + 2, col]
        return out

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Returns U·x in O(N)."""
        n = self.n_dim
        if x.shape[0] != n:
            raise GeometryError(f"Vector of length {x.shape[0]} for dimension {n}")
        y = np.zeros(x.shape, dtype=complex)
        for offset in OFFSETS:
            band = self.bands[offset + 2]
            if offset >= 0:
                y[offset:] += band[: n - offset] * x[: n - offset]
            else:
                y[: n + offset] += band[-offset:] * x[-offset:]
        return y

    def to_sparse(self) -> sparse.dia_array:
        # scipy stores A[j - k, j] in data[k, j], i.e. offsets are col - row
        return sparse.dia_array(
            (self.bands, [-o for o in OFFSETS]), shape=(self.n_dim, self.n_dim)
        )

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def with_bands(self, bands: np.ndarray) -> "BandedUnitary":
        return BandedUnitary(self.geometry, bands, self.params_digest, self.boundary)


@dataclass(frozen=True)
class BlockPair:
    """Scattering blocks S_k for k = k_start, k_start + 1, ...

    Blocks with even k make up U_e (acting on sites 2k, 2k+1), blocks with
    odd k make up U_o.
    """

    k_start: int
    blocks: np.ndarray

    def block(self, k: int) -> np.ndarray:
        return self.blocks[k - self.k_start]

    def parity_blocks(self, parity: int) -> dict[int, np.ndarray]:
        """Blocks of U_e (parity 0) or U_o (parity 1) keyed by k."""
        return {
            self.k_start + i: b
            for i, b in enumerate(self.blocks)
            if (self.k_start + i) % 2 == parity
        }


def build_blocks(
    phases: PhaseSequence, params: ModelParams, k_range: range
) -> BlockPair:
    """Builds S_k = e^{−iθ_k}[[r e^{−iα_k}, i t e^{iγ_k}], [i t e^{−iγ_k}, r e^{iα_k}]].

    Args:
        phases: Provider of θ_k, α_k, γ_k.
        params: Supplies the amplitudes r and t.
        k_range: Consecutive range of block indices.

    Returns:
        The blocks as a (len(k_range), 2, 2) array.
    """
    if len(k_range) == 0 or k_range.step != 1:
        raise ValidationError(f"Invalid block range: {k_range}", "k_range")
    ks = np.arange(k_range.start, k_range.stop)
    theta, alpha, gamma = phases.angles(ks)
    r, t = params.r, params.t
    lead = np.exp(-1j * theta)
    blocks = np.empty((len(ks), 2, 2), dtype=complex)
    blocks[:, 0, 0] = lead * r * np.exp(-1j * alpha)
    blocks[:, 0, 1] = lead * 1j * t * np.exp(1j * gamma)
    blocks[:, 1, 0] = lead * 1j * t * np.exp(-1j * gamma)
    blocks[:, 1, 1] = lead * r * np.exp(1j * alpha)
    return BlockPair(k_range.start, blocks)


def _phases_for(params: ModelParams, phases: Optional[PhaseSequence]) -> PhaseSequence:
    return phases if phases is not None else AlmostPeriodic.from_params(params)


def _closed_form_bands(
    phases: PhaseSequence, params: ModelParams, geometry: Geometry
) -> np.ndarray:
    """Columns of U from the explicit matrix elements, cut to the window."""
    sites = geometry.sites()
    lo = geometry.first_site
    n = geometry.n_dim
    window = np.arange(lo - 2, geometry.last_site + 3)
    th, al, ga = phases.angles(window)

    def at(values: np.ndarray, shift: int, cols: np.ndarray) -> np.ndarray:
        return values[cols - (lo - 2) + shift]

    r, t = params.r, params.t
    bands = np.zeros((5, n), dtype=complex)
    col_index = sites - lo

    even = sites[sites % 2 == 0]
    e_idx = even - lo
    left = np.exp(-1j * (at(th, 0, even) + at(th, -1, even)))
    right = np.exp(-1j * (at(th, 0, even) + at(th, 1, even)))
    al_0, al_l, al_r = at(al, 0, even), at(al, -1, even), at(al, 1, even)
    ga_0, ga_l, ga_r = at(ga, 0, even), at(ga, -1, even), at(ga, 1, even)
    bands[1, e_idx] = 1j * r * t * left * np.exp(-1j * (al_0 - ga_l))
    bands[2, e_idx] = r * r * left * np.exp(-1j * (al_0 - al_l))
    bands[3, e_idx] = 1j * r * t * right * np.exp(-1j * (ga_0 + al_r))
    bands[4, e_idx] = -t * t * right * np.exp(-1j * (ga_0 + ga_r))

    odd = sites[sites % 2 != 0]
    o_idx = odd - lo
    left = np.exp(-1j * (at(th, -1, odd) + at(th, -2, odd)))
    right = np.exp(-1j * (at(th, -1, odd) + at(th, 0, odd)))
    al_p, al_pp, al_0 = at(al, -1, odd), at(al, -2, odd), at(al, 0, odd)
    ga_p, ga_pp, ga_0 = at(ga, -1, odd), at(ga, -2, odd), at(ga, 0, odd)
    bands[0, o_idx] = -t * t * left * np.exp(1j * (ga_p + ga_pp))
    bands[1, o_idx] = 1j * r * t * left * np.exp(1j * (ga_p + al_pp))
    bands[2, o_idx] = r * r * right * np.exp(1j * (al_p - al_0))
    bands[3, o_idx] = 1j * r * t * right * np.exp(1j * (al_p - ga_0))

    if isinstance(geometry, HalfLine):
        # column 1 couples only to sites 1 and 2
        th0, th1 = th[1], th[2]
        lead = np.exp(-1j * (th0 + th1))
        bands[:, 0] = 0.0
        bands[2, 0] = r * lead * np.exp(-1j * al[2])
        bands[3, 0] = 1j * t * lead * np.exp(-1j * ga[2])

    _cut_outside(bands, col_index, n)
    return bands


def _cut_outside(bands: np.ndarray, col_index: np.ndarray, n: int) -> None:
    for offset in OFFSETS:
        rows = col_index + offset
        bands[offset + 2, (rows < 0) | (rows >= n)] = 0.0


def _factor(
    blocks: BlockPair, phases: PhaseSequence, lo: int, hi: int, parity: int
) -> sparse.csr_array:
    """Block-diagonal factor on sites lo..hi.

    Blocks of the given parity that fit the window are placed as 2×2 blocks;
    a site whose partner lies outside gets the 1×1 phase e^{−iθ_k} of its
    pair start k.
    """
    n = hi - lo + 1
    rows, cols, vals = [], [], []
    site = lo
    while site <= hi:
        k = site if site % 2 == parity else site - 1
        if k >= lo and k + 1 <= hi:
            block = blocks.block(k)
            for a in range(2):
                for b in range(2):
                    rows.append(k + a - lo)
                    cols.append(k + b - lo)
                    vals.append(block[a, b])
            site = k + 2
        else:
            theta_k = phases.at(k)[0]
            rows.append(site - lo)
            cols.append(site - lo)
            vals.append(np.exp(-1j * theta_k))
            site += 1
    return sparse.csr_array((vals, (rows, cols)), shape=(n, n), dtype=complex)


def _bands_of(matrix: sparse.csr_array, n: int) -> np.ndarray:
    bands = np.zeros((5, n), dtype=complex)
    for offset in OFFSETS:
        diagonal = matrix.diagonal(-offset)
        if offset >= 0:
            bands[offset + 2, : n - offset] = diagonal
        else:
            bands[offset + 2, -offset:] = diagonal
    return bands


def _factorized_bands(
    phases: PhaseSequence, params: ModelParams, geometry: Geometry, boundary: str
) -> np.ndarray:
    """U_o·U_e, either cut from a wider window or closed on the window."""
    pad = 2 if boundary == "open" else 0
    lo = geometry.first_site
    if isinstance(geometry, FullLine):
        lo -= pad
    hi = geometry.last_site + pad
    blocks = build_blocks(phases, params, range(lo - 1, hi + 1))
    u_e = _factor(blocks, phases, lo, hi, 0)
    u_o = _factor(blocks, phases, lo, hi, 1)
    product = (u_o @ u_e).tocsr()
    start = geometry.first_site - lo
    n = geometry.n_dim
    cropped = product[start : start + n, start : start + n]
    return _bands_of(sparse.csr_array(cropped), n)


def _assemble(
    params: ModelParams,
    geometry: Geometry,
    method: str,
    boundary: str,
    phases: Optional[PhaseSequence],
) -> BandedUnitary:
    if boundary not in BOUNDARIES:
        raise ValidationError(f"Unknown boundary: {boundary}", "boundary")
    phases = _phases_for(params, phases)
    if boundary == "unitary" or method == "factorized":
        bands = _factorized_bands(phases, params, geometry, boundary)
    elif method == "closed":
        bands = _closed_form_bands(phases, params, geometry)
    else:
        raise ValidationError(f"Unknown assembly method: {method}", "method")
    return BandedUnitary(geometry, bands, params.digest(), boundary)


def assemble_full(
    params: ModelParams,
    window: FullLine,
    method: str = "closed",
    boundary: str = "open",
    phases: Optional[PhaseSequence] = None,
) -> BandedUnitary:
    """Builds U(β,θ) on the full-line window of sites −N..N.

    Args:
        params: Model parameters (λ is ignored here).
        window: The full-line window.
        method: "closed" for the explicit columns, "factorized" for U_o·U_e.
        boundary: "open" cut or "unitary" closure.
        phases: Phase provider; defaults to the almost-periodic sequence.

    Returns:
        The banded truncation.
    """
    if not isinstance(window, FullLine):
        raise GeometryError("assemble_full expects a FullLine window")
    return _assemble(params, window, method, boundary, phases)


def assemble_half(
    params: ModelParams,
    n_dim: int,
    method: str = "closed",
    boundary: str = "open",
    phases: Optional[PhaseSequence] = None,
) -> BandedUnitary:
    """Builds the half-line operator U(β,θ)⁺ on sites 1..n_dim.

    Column 1 is r e^{−i(θ_0+θ_1)}e^{−iα_1}φ_1 + i t e^{−i(θ_0+θ_1)}e^{−iγ_1}φ_2,
    all other columns coincide with those of the full-line operator.
    """
    return _assemble(params, HalfLine(n_dim), method, boundary, phases)


def perturb_rank_one(
    u_plus: BandedUnitary, lam: float, allow_full_line: bool = False
) -> BandedUnitary:
    """Returns U·(I + (e^{iλ}−1)P_{φ1}): column of site 1 times e^{iλ}.

    Raises:
        GeometryError: For full-line input unless `allow_full_line` is set.
    """
    if isinstance(u_plus.geometry, FullLine) and not allow_full_line:
        raise GeometryError("Rank-one perturbation is defined on the half line")
    if lam == 0.0:
        return u_plus
    col = u_plus.geometry.index(1)
    bands = u_plus.bands.copy()
    bands[:, col] = bands[:, col] * np.exp(1j * lam)
    return u_plus.with_bands(bands)


def assemble_perturbed(
    params: ModelParams,
    n_dim: int,
    boundary: str = "open",
    phases: Optional[PhaseSequence] = None,
) -> BandedUnitary:
    """Builds U_λ(β,θ)⁺ with λ taken from the parameters."""
    return perturb_rank_one(
        assemble_half(params, n_dim, boundary=boundary, phases=phases), params.lam
    )


def gram_bands(u: BandedUnitary) -> np.ndarray:
    """Upper bands of U†U: `gram[d, i]` = (U†U)[i, i + d], d = 0..4."""
    n = u.n_dim
    b = u.bands
    gram = np.zeros((5, n), dtype=complex)
    for d in range(5):
        for o2 in OFFSETS:
            o1 = o2 + d
            if o1 > 2:
                continue
            gram[d, : n - d] += np.conj(b[o1 + 2, : n - d]) * b[o2 + 2, d:]
    return gram


def unitarity_defect(u: BandedUnitary) -> UnitarityDefect:
    """Max-norm of U†U − I on the interior and on the edge columns.

    The interior excludes the last two columns, and for a full-line window
    also the first two.
    """
    n = u.n_dim
    gram = gram_bands(u)
    gram[0] -= 1.0
    edge = np.zeros(n, dtype=bool)
    edge[n - EDGE_COLUMNS :] = True
    if isinstance(u.geometry, FullLine):
        edge[:EDGE_COLUMNS] = True
    interior, boundary = 0.0, 0.0
    for d in range(5):
        values = np.abs(gram[d, : n - d])
        touches_edge = edge[: n - d] | edge[d:]
        if np.any(~touches_edge):
            interior = max(interior, float(values[~touches_edge].max()))
        if np.any(touches_edge):
            boundary = max(boundary, float(values[touches_edge].max()))
    return UnitarityDefect(interior, boundary)


def factorization_defect(
    params: ModelParams,
    geometry: Geometry,
    phases: Optional[PhaseSequence] = None,
) -> float:
    """Entrywise max difference of the closed-form and U_o·U_e builds."""
    closed = _assemble(params, geometry, "closed", "open", phases)
    factorized = _assemble(params, geometry, "factorized", "open", phases)
    return float(np.max(np.abs(closed.bands - factorized.bands)))


def theta_covariance_check(params: ModelParams, n_dim: int = 64) -> float:
    """Returns ‖U(β,θ)⁺ − e^{−2iθ}U(β,0)⁺‖_max."""
    shifted = assemble_half(params, n_dim)
    base = assemble_half(params.replace(theta=0.0), n_dim)
    rotated = np.exp(-2j * params.theta) * base.bands
    return float(np.max(np.abs(shifted.bands - rotated)))
