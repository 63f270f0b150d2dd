"""
MMDI-like baseline inversion.

Pipeline: zero buffer around the field -> radial Butterworth bandpass
(waves/FOV) -> four cos^2 directional windows -> crop -> algebraic Helmholtz
inversion ``mu = rho*omega^2*|u| / |lap u|`` at several stencil spacings ->
amplitude x curvature weighted combination over scales and directions.

Directions are angles of the spatial-frequency vector of ``exp(+i k.r)``
(0 deg = +x/columns, 90 deg = +y/rows).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from ..exceptions import NumericalError, ValidationError
from ..fields import ComplexField, ScalarField, discrete_laplacian
from .performance_cache import cache_filter, get_cached_filter
from .performance_monitor import monitor_performance

logger = logging.getLogger(__name__)

MIN_FILTER_GRID = 16


@dataclass(frozen=True)
class FilterBankConfig:
    low_cut: float = 2.0  # waves/FOV
    high_cut: float = 128.0  # waves/FOV
    butterworth_order: int = 4
    directions: Tuple[float, ...] = (0.0, 90.0, 180.0, 270.0)  # degrees
    angular_half_width: float = 90.0  # degrees, cos^2 profile
    buffer_fraction: float = 0.5  # zero border per side, as a fraction of the field size

    def __post_init__(self):
        if not (0 < self.low_cut < self.high_cut):
            raise ValidationError(f"Need 0 < low_cut < high_cut, got {self.low_cut}, {self.high_cut}")
        if self.butterworth_order < 1:
            raise ValidationError(f"butterworth_order must be >= 1, got {self.butterworth_order}")
        if not (0.0 <= self.buffer_fraction <= 2.0):
            raise ValidationError(f"buffer_fraction must be in [0, 2], got {self.buffer_fraction}")
        if self.angular_half_width != 90.0:
            raise ValidationError("Only the 90 degree cos^2 window partitions angle space")
        object.__setattr__(self, "directions", tuple(float(d) for d in self.directions))
        steps = np.diff(np.sort(np.mod(self.directions, 360.0)))
        if len(self.directions) != 4 or not np.allclose(steps, 90.0):
            raise ValidationError(f"Directions must be four angles 90 degrees apart, got {self.directions}")


@dataclass(frozen=True)
class InversionConfig:
    density: float = 1000.0  # kg/m^3
    frequency: float = 60.0  # Hz
    laplacian_scales: Tuple[int, ...] = (1, 2)  # stencil arm in pixels
    amplitude_floor: float = 1e-3  # fraction of max |u|

    def __post_init__(self):
        if not (self.density > 0 and self.frequency > 0):
            raise ValidationError("density and frequency must be positive")
        object.__setattr__(self, "laplacian_scales", tuple(int(s) for s in self.laplacian_scales))
        if not self.laplacian_scales or min(self.laplacian_scales) < 1:
            raise ValidationError(f"laplacian_scales must be >= 1, got {self.laplacian_scales}")
        if not (0 <= self.amplitude_floor < 1):
            raise ValidationError(f"amplitude_floor must be in [0, 1), got {self.amplitude_floor}")

    @property
    def stiffness_scale(self) -> float:
        """rho * omega^2 in Pa/m^2."""
        return self.density * (2.0 * math.pi * self.frequency) ** 2


@dataclass(frozen=True, eq=False)
class MMDIResult:
    stiffness: ScalarField  # Pa, invalid pixels filled from the nearest valid one
    valid: np.ndarray  # False where no direction/scale produced an estimate


def _frequency_grid(shape: Tuple[int, int], fov: Optional[Tuple[int, int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Spatial frequencies along rows (fy) and columns (fx) in waves per ``fov`` pixels."""
    fov = fov or shape
    fy = np.fft.fftfreq(shape[0]) * fov[0]
    fx = np.fft.fftfreq(shape[1]) * fov[1]
    return np.meshgrid(fy, fx, indexing="ij")


def butterworth_response(
    shape: Tuple[int, int],
    cfg: FilterBankConfig,
    fov: Optional[Tuple[int, int]] = None,
) -> np.ndarray:
    """Radial response on an FFT grid of ``shape``; cutoffs in waves per ``fov`` (default: the grid itself)."""
    fov = tuple(fov or shape)
    params = {"low": cfg.low_cut, "high": cfg.high_cut, "order": cfg.butterworth_order, "fov": list(fov)}
    cached = get_cached_filter("butterworth", shape, params)
    if cached is not None:
        return cached

    fy, fx = _frequency_grid(shape, fov)
    r = np.hypot(fy, fx)
    n2 = 2 * cfg.butterworth_order
    lowpass = 1.0 / np.sqrt(1.0 + (r / cfg.high_cut) ** n2)
    highpass = np.zeros_like(r)
    nonzero = r > 0
    highpass[nonzero] = 1.0 / np.sqrt(1.0 + (cfg.low_cut / r[nonzero]) ** n2)
    response = highpass * lowpass
    cache_filter("butterworth", shape, params, response)
    return response


def directional_windows(shape: Tuple[int, int], cfg: FilterBankConfig) -> List[np.ndarray]:
    params = {"directions": list(cfg.directions), "half_width": cfg.angular_half_width}
    cached = get_cached_filter("directional", shape, params)
    if cached is not None:
        return list(cached)

    # angle of the wavevector in cycles/pixel, so padding does not skew it
    fy, fx = _frequency_grid(shape, (1, 1))
    theta = np.arctan2(fy, fx)
    windows = []
    for direction in cfg.directions:
        delta = np.angle(np.exp(1j * (theta - math.radians(direction))))
        window = np.where(np.abs(delta) < math.pi / 2, np.cos(delta) ** 2, 0.0)
        windows.append(window)
    cache_filter("directional", shape, params, np.stack(windows))
    return windows


def buffer_width(shape: Tuple[int, int], cfg: FilterBankConfig) -> Tuple[int, int]:
    return int(round(cfg.buffer_fraction * shape[0])), int(round(cfg.buffer_fraction * shape[1]))


def add_buffer(values: np.ndarray, width: Tuple[int, int]) -> np.ndarray:
    """Zero border of ``width`` pixels so FFT wrap-around cannot couple opposite edges."""
    return np.pad(values, ((width[0], width[0]), (width[1], width[1])), mode="constant")


def remove_buffer(values: np.ndarray, width: Tuple[int, int]) -> np.ndarray:
    return values[width[0]:values.shape[0] - width[0], width[1]:values.shape[1] - width[1]]


def _check_grid(u: ComplexField) -> None:
    if min(u.shape) < MIN_FILTER_GRID:
        raise ValidationError(f"Filtering needs at least {MIN_FILTER_GRID}x{MIN_FILTER_GRID}, got {u.shape}")


def bandpass(
    u: ComplexField,
    cfg: FilterBankConfig = FilterBankConfig(),
    buffer: Tuple[int, int] = (0, 0),
) -> ComplexField:
    """Radial Butterworth bandpass between ``low_cut`` and ``high_cut`` waves/FOV.

    With the default zero ``buffer`` the field is treated as periodic.
    """
    _check_grid(u)
    padded = add_buffer(u.values, buffer)
    spectrum = np.fft.fft2(padded) * butterworth_response(padded.shape, cfg, fov=u.shape)
    return u.with_values(remove_buffer(np.fft.ifft2(spectrum), buffer))


def directional_split(
    u: ComplexField,
    cfg: FilterBankConfig = FilterBankConfig(),
    buffer: Tuple[int, int] = (0, 0),
) -> List[ComplexField]:
    """Split ``u`` into one component per direction; the components sum to ``u``."""
    _check_grid(u)
    padded = add_buffer(u.values, buffer)
    spectrum = np.fft.fft2(padded)
    return [
        u.with_values(remove_buffer(np.fft.ifft2(spectrum * window), buffer))
        for window in directional_windows(padded.shape, cfg)
    ]


def filtered_components(u: ComplexField, cfg: FilterBankConfig = FilterBankConfig()) -> List[ComplexField]:
    """Bandpass and directional split in one buffered FFT pass.

    The components sum to ``bandpass(u, cfg, buffer_width(u.shape, cfg))``.
    """
    _check_grid(u)
    width = buffer_width(u.shape, cfg)
    padded = add_buffer(u.values, width)
    spectrum = np.fft.fft2(padded) * butterworth_response(padded.shape, cfg, fov=u.shape)
    return [
        u.with_values(remove_buffer(np.fft.ifft2(spectrum * window), width))
        for window in directional_windows(padded.shape, cfg)
    ]


def invert_direction(u_d: ComplexField, cfg: InversionConfig = InversionConfig()) -> Tuple[ScalarField, ScalarField]:
    """Algebraic Helmholtz inversion of one directional component.

    Returns the weight-combined stiffness estimate (Pa) and the total weight;
    pixels with zero weight carry estimate 0 and are invalid.
    """
    h = u_d.spacing * 1e-3
    amp = np.abs(u_d.values)
    peak = amp.max()
    numerator = np.zeros(u_d.shape)
    total_weight = np.zeros(u_d.shape)
    if peak > 0:
        above_floor = amp > cfg.amplitude_floor * peak
        for scale in cfg.laplacian_scales:
            lap, valid = discrete_laplacian(u_d.values, scale, h)
            curvature = np.abs(lap)
            mask = valid & above_floor & (curvature > 0)
            weight = np.where(mask, amp * curvature, 0.0)
            estimate = np.zeros(u_d.shape)
            estimate[mask] = cfg.stiffness_scale * amp[mask] / curvature[mask]
            numerator += weight * estimate
            total_weight += weight

    mu = np.zeros(u_d.shape)
    has_weight = total_weight > 0
    mu[has_weight] = numerator[has_weight] / total_weight[has_weight]
    return ScalarField(mu, u_d.spacing), ScalarField(total_weight, u_d.spacing)


def fill_invalid(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid pixels by their nearest valid neighbour."""
    if valid.all():
        return values.copy()
    indices = ndimage.distance_transform_edt(~valid, return_distances=False, return_indices=True)
    return values[tuple(indices)]


@monitor_performance("mmdi_invert")
def mmdi_invert(
    u: ComplexField,
    fcfg: FilterBankConfig = FilterBankConfig(),
    icfg: InversionConfig = InversionConfig(),
) -> MMDIResult:
    """Buffered bandpass and directional split, per-direction inversion, weighted combination."""
    numerator = np.zeros(u.shape)
    total_weight = np.zeros(u.shape)
    for component in filtered_components(u, fcfg):
        mu_d, weight_d = invert_direction(component, icfg)
        numerator += weight_d.values * mu_d.values
        total_weight += weight_d.values

    valid = total_weight > 0
    if not valid.any():
        raise NumericalError("MMDI produced no valid pixels (zero or fully masked input)")
    mu = np.zeros(u.shape)
    mu[valid] = numerator[valid] / total_weight[valid]
    mu = fill_invalid(mu, valid)
    logger.debug(f"MMDI inversion: {int(valid.sum())}/{valid.size} valid pixels")
    return MMDIResult(stiffness=ScalarField(mu, u.spacing), valid=valid)


def discrete_plane_wave_bias(mu: float, cfg: InversionConfig, spacing_mm: float) -> float:
    """Closed-form factor mu_hat/mu for a discretised plane wave along a grid axis.

    A scale-``s`` stencil sees ``|lap u| = (2 - 2cos(k s h)) / (s h)^2``; scale
    estimates are combined with weight ``|u| * |lap u|``.
    """
    k = math.sqrt(cfg.stiffness_scale / mu)
    h = spacing_mm * 1e-3
    curvatures = [(2.0 - 2.0 * math.cos(k * s * h)) / (s * h) ** 2 for s in cfg.laplacian_scales]
    mu_hat = cfg.stiffness_scale * len(curvatures) / sum(curvatures)
    return mu_hat / mu
