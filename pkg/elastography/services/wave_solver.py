"""
Frequency-domain forward model for anti-plane shear waves.

Solves ``div(mu* grad u) + rho * omega^2 * u = 0`` on the phantom's node grid
with a five-point finite-difference stencil. Face coefficients are harmonic
means of the neighbouring complex moduli; boundary nodes carry prescribed
(Dirichlet) displacement and are folded into the right-hand side. The result
is the complex first-harmonic displacement in mm.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as sparse_linalg

from ..exceptions import NumericalError, ValidationError
from ..fields import ComplexField, ScalarField, discrete_laplacian, resample
from .performance_monitor import monitor_performance
from .phantom_service import DAMPING_RANGE, Edge, Excitation, PhantomSpec, render_stiffness

logger = logging.getLogger(__name__)

DEFAULT_FREQUENCY_HZ = 60.0
DEFAULT_DENSITY = 1000.0
RESIDUAL_TOLERANCE = 1e-8
MIN_GRID = 16
MIN_REAL_MODULUS = 1000.0  # Pa
_REFINEMENT_STEPS = 3


def angular_frequency(frequency: float) -> float:
    return 2.0 * math.pi * frequency


@dataclass(frozen=True, eq=False)
class ComplexModulusField:
    """Complex shear modulus ``mu * (1 + i*eta)`` in Pa on a node grid."""

    values: np.ndarray
    spacing: float

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.complex128, copy=True)
        if arr.ndim != 2:
            raise ValidationError(f"Modulus grid must be 2D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("Modulus grid contains non-finite values")
        if np.any(arr.real < MIN_REAL_MODULUS - 1e-6):
            raise ValidationError(f"Re(mu*) below {MIN_REAL_MODULUS} Pa")
        eta = arr.imag / arr.real
        if np.any(eta < DAMPING_RANGE[0] - 1e-9) or np.any(eta > DAMPING_RANGE[1] + 1e-9):
            raise ValidationError(f"Loss factor outside {DAMPING_RANGE}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_maps(cls, mu: ScalarField, damping: ScalarField) -> "ComplexModulusField":
        if mu.shape != damping.shape:
            raise ValidationError(f"Stiffness {mu.shape} and damping {damping.shape} grids differ")
        return cls(mu.values * (1.0 + 1j * damping.values), mu.spacing)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class EdgeCondition:
    """Prescribed displacement along one edge; ``values is None`` means Fixed (zero)."""

    values: Optional[np.ndarray] = None

    @property
    def is_fixed(self) -> bool:
        return self.values is None or not np.any(self.values)


@dataclass(frozen=True)
class BoundaryCondition:
    edges: Dict[Edge, EdgeCondition] = field(default_factory=dict)

    @classmethod
    def fixed(cls) -> "BoundaryCondition":
        return cls({edge: EdgeCondition() for edge in Edge})

    @classmethod
    def from_excitation(cls, excitation: Excitation, shape: Tuple[int, int], spacing: float) -> "BoundaryCondition":
        """Driver on one edge (optionally a segment of it), every other edge Fixed."""
        length = shape[0] if excitation.edge in (Edge.LEFT, Edge.RIGHT) else shape[1]
        coords = np.arange(length) * spacing
        profile = np.full(length, excitation.amplitude, dtype=np.complex128)
        if excitation.segment_mm is not None:
            start, end = excitation.segment_mm
            profile[(coords < start) | (coords > end)] = 0.0
        edges = {edge: EdgeCondition() for edge in Edge}
        edges[excitation.edge] = EdgeCondition(profile)
        return cls(edges)

    @classmethod
    def from_values(cls, values: np.ndarray) -> "BoundaryCondition":
        """Dirichlet on all four edges, taken from the border of a full grid."""
        values = np.asarray(values, dtype=np.complex128)
        return cls({
            Edge.LEFT: EdgeCondition(values[:, 0].copy()),
            Edge.RIGHT: EdgeCondition(values[:, -1].copy()),
            Edge.TOP: EdgeCondition(values[0, :].copy()),
            Edge.BOTTOM: EdgeCondition(values[-1, :].copy()),
        })

    def excited_edges(self):
        return [edge for edge, cond in self.edges.items() if not cond.is_fixed]

    def boundary_values(self, shape: Tuple[int, int]) -> np.ndarray:
        grid = np.zeros(shape, dtype=np.complex128)
        for edge, cond in self.edges.items():
            if cond.is_fixed:
                continue
            expected = shape[0] if edge in (Edge.LEFT, Edge.RIGHT) else shape[1]
            if cond.values.shape != (expected,):
                raise ValidationError(f"{edge.value} edge has {cond.values.shape[0]} values, grid needs {expected}")
            if edge == Edge.LEFT:
                grid[:, 0] = cond.values
            elif edge == Edge.RIGHT:
                grid[:, -1] = cond.values
            elif edge == Edge.TOP:
                grid[0, :] = cond.values
            else:
                grid[-1, :] = cond.values
        return grid


@dataclass(frozen=True, eq=False)
class SparseSystem:
    matrix: sparse.csr_matrix
    rhs: np.ndarray
    shape: Tuple[int, int]
    spacing: float
    boundary: np.ndarray

    @property
    def size(self) -> int:
        return self.rhs.shape[0]


def _harmonic_mean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 2.0 * a * b / (a + b)


def assemble(
    mu_star: ComplexModulusField,
    density: float,
    frequency: float,
    bc: BoundaryCondition,
) -> SparseSystem:
    """Five-point discretisation over interior nodes; boundary nodes go to the RHS."""
    n_rows, n_cols = mu_star.shape
    if n_rows < MIN_GRID or n_cols < MIN_GRID:
        raise ValidationError(f"Grid {n_rows}x{n_cols} is below the {MIN_GRID}x{MIN_GRID} minimum")
    if not (mu_star.spacing > 0 and density > 0 and frequency > 0):
        raise ValidationError("spacing, density and frequency must be positive")

    h = mu_star.spacing * 1e-3  # mm -> m
    inv_h2 = 1.0 / (h * h)
    mass = density * angular_frequency(frequency) ** 2
    m = mu_star.values
    boundary = bc.boundary_values((n_rows, n_cols))

    ii, jj = np.meshgrid(np.arange(1, n_rows - 1), np.arange(1, n_cols - 1), indexing="ij")
    ii = ii.ravel()
    jj = jj.ravel()
    n_inner_cols = n_cols - 2
    unknown = (ii - 1) * n_inner_cols + (jj - 1)
    size = unknown.size

    rows = [unknown]
    cols = [unknown]
    diagonal = np.full(size, mass, dtype=np.complex128)
    data = [diagonal]
    rhs = np.zeros(size, dtype=np.complex128)

    for di, dj in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        ni = ii + di
        nj = jj + dj
        coef = _harmonic_mean(m[ii, jj], m[ni, nj]) * inv_h2
        diagonal -= coef
        inner = (ni >= 1) & (ni <= n_rows - 2) & (nj >= 1) & (nj <= n_cols - 2)
        rows.append(unknown[inner])
        cols.append((ni[inner] - 1) * n_inner_cols + (nj[inner] - 1))
        data.append(coef[inner])
        rhs[~inner] -= coef[~inner] * boundary[ni[~inner], nj[~inner]]

    values = np.concatenate(data)
    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(rhs))):
        raise NumericalError("Assembled system has non-finite coefficients")

    matrix = sparse.coo_matrix(
        (values, (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    ).tocsr()
    logger.debug(f"Assembled {n_rows}x{n_cols} Helmholtz system: {size} unknowns, nnz={matrix.nnz}")
    return SparseSystem(matrix=matrix, rhs=rhs, shape=(n_rows, n_cols), spacing=mu_star.spacing, boundary=boundary)


def relative_residual(system: SparseSystem, x: np.ndarray) -> float:
    norm_b = np.linalg.norm(system.rhs)
    return float(np.linalg.norm(system.matrix @ x - system.rhs) / norm_b)


@monitor_performance("wave_solve")
def solve(system: SparseSystem, rtol: float = RESIDUAL_TOLERANCE) -> ComplexField:
    """Sparse LU solve with a few steps of iterative refinement."""
    u = system.boundary.copy()
    if not np.any(system.rhs):
        return ComplexField(u, system.spacing)

    try:
        lu = sparse_linalg.splu(system.matrix.tocsc())
    except RuntimeError as e:
        raise NumericalError(f"Helmholtz matrix is singular: {e}") from e

    x = lu.solve(system.rhs)
    residual = relative_residual(system, x) if np.all(np.isfinite(x)) else math.inf
    for _ in range(_REFINEMENT_STEPS):
        if residual <= rtol:
            break
        x = x + lu.solve(system.rhs - system.matrix @ x)
        residual = relative_residual(system, x) if np.all(np.isfinite(x)) else math.inf

    if not residual <= rtol:
        raise NumericalError(f"Solve residual {residual:.3e} exceeds {rtol:.1e}", residual=residual)

    n_rows, n_cols = system.shape
    u[1:-1, 1:-1] = x.reshape(n_rows - 2, n_cols - 2)
    logger.debug(f"Solved {n_rows}x{n_cols} system, relative residual {residual:.2e}")
    return ComplexField(u, system.spacing)


@monitor_performance("simulate")
def simulate(
    spec: PhantomSpec,
    frequency: float = DEFAULT_FREQUENCY_HZ,
    density: float = DEFAULT_DENSITY,
    output_spacing: float = 1.0,
    rtol: float = RESIDUAL_TOLERANCE,
) -> Tuple[ComplexField, ScalarField]:
    """Render, assemble, solve and resample one phantom to ``output_spacing`` mm."""
    mu, damping = render_stiffness(spec)
    mu_star = ComplexModulusField.from_maps(mu, damping)
    bc = BoundaryCondition.from_excitation(spec.excitation, mu.shape, spec.spacing_mm)
    u = solve(assemble(mu_star, density, frequency, bc), rtol)
    logger.info(
        f"Simulated {spec.phantom_class.value} phantom seed={spec.seed} "
        f"({mu.height}x{mu.width} at {spec.spacing_mm} mm, {frequency} Hz)"
    )
    if output_spacing != spec.spacing_mm:
        u = resample(u, output_spacing)
        mu = resample(mu, output_spacing)
    return u, mu


def local_wavelength(u: ComplexField, scale: int = 2, amplitude_floor: float = 0.05) -> np.ndarray:
    """Local shear wavelength (mm) from the Helmholtz ratio ``-lap(u)/u``.

    NaN where the stencil is incomplete, the amplitude is below
    ``amplitude_floor`` of the maximum, or the ratio is not wave-like.
    """
    values = u.values
    lap, valid = discrete_laplacian(values, scale, u.spacing)
    amp = np.abs(values)
    wavelength = np.full(values.shape, np.nan)
    if amp.max() == 0:
        return wavelength
    valid &= amp > amplitude_floor * amp.max()
    k2 = np.zeros_like(values)
    k2[valid] = -lap[valid] / values[valid]
    valid &= k2.real > 0
    k = np.sqrt(k2)
    wavelength[valid] = 2.0 * math.pi / k.real[valid]
    return wavelength


def median_wavelength(u: ComplexField, mask: Optional[np.ndarray] = None, scale: int = 2) -> float:
    wavelength = local_wavelength(u, scale=scale)
    if mask is not None:
        wavelength = np.where(mask, wavelength, np.nan)
    if np.all(np.isnan(wavelength)):
        raise NumericalError("No valid pixels for wavelength estimation")
    return float(np.nanmedian(wavelength))


def zero_crossing_wavelength(profile: np.ndarray, spacing: float) -> float:
    """Wavelength (mm) of a real 1-D profile from the mean spacing of its zero crossings."""
    profile = np.asarray(profile, dtype=float)
    sign_change = np.nonzero(np.signbit(profile[:-1]) != np.signbit(profile[1:]))[0]
    if sign_change.size < 2:
        raise ValidationError("Need at least two zero crossings to measure a wavelength")
    left = profile[sign_change]
    right = profile[sign_change + 1]
    positions = sign_change + left / (left - right)
    half_wave = (positions[-1] - positions[0]) / (positions.size - 1)
    return float(2.0 * half_wave * spacing)
