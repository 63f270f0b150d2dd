"""
Phantom generation: declarative specs for the square phantom classes and
their rendered stiffness/damping maps.

Coordinates are millimetres with the origin at the top-left node; ``x`` runs
along columns and ``y`` along rows.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from ..exceptions import ValidationError
from ..fields import PhantomClass, ScalarField, make_rng

logger = logging.getLogger(__name__)

MU_RANGE = (1000.0, 8000.0)  # Pa
DAMPING_RANGE = (0.05, 0.3)
AMPLITUDE_RANGE = (0.3, 0.9)  # mm
RADIUS_RANGE = (5.0, 20.0)  # mm
SEGMENT_FRACTION_RANGE = (0.25, 0.5)
MAX_PLACEMENT_FAILURES = 1000
DEFAULT_SIDE_MM = 128.0
DEFAULT_SPACING_MM = 1.0

_RANGE_SLACK = 1e-9


class Edge(str, Enum):
    LEFT = "left"
    TOP = "top"
    RIGHT = "right"
    BOTTOM = "bottom"


EDGES: Tuple[Edge, ...] = (Edge.LEFT, Edge.TOP, Edge.RIGHT, Edge.BOTTOM)


@dataclass(frozen=True)
class Inclusion:
    center: Tuple[float, float]  # (x, y) in mm
    radius: float
    mu: float
    damping: float


@dataclass(frozen=True)
class Gradient:
    axis: str  # "x" or "y"
    mu_start: float
    mu_end: float


@dataclass(frozen=True)
class Excitation:
    edge: Edge
    amplitude: float
    segment_mm: Optional[Tuple[float, float]] = None  # sub-range along the edge; None = whole edge


@dataclass(frozen=True)
class PhantomSpec:
    side_mm: float
    spacing_mm: float
    background_mu: float
    background_damping: float
    excitation: Excitation
    inclusions: Tuple[Inclusion, ...] = ()
    gradient: Optional[Gradient] = None
    seed: int = 0
    phantom_class: PhantomClass = PhantomClass.HOMOGENEOUS

    def __post_init__(self):
        self.validate()

    @property
    def grid_size(self) -> int:
        return int(round(self.side_mm / self.spacing_mm)) + 1

    def validate(self) -> None:
        if not (self.side_mm > 0 and self.spacing_mm > 0):
            raise ValidationError("side_mm and spacing_mm must be positive")
        if self.grid_size < 16:
            raise ValidationError(f"Phantom grid {self.grid_size} is below the 16-node minimum")
        _check_range("background_mu", self.background_mu, MU_RANGE)
        _check_range("background_damping", self.background_damping, DAMPING_RANGE)
        _check_range("excitation amplitude", self.excitation.amplitude, AMPLITUDE_RANGE)
        if self.excitation.segment_mm is not None:
            start, end = self.excitation.segment_mm
            if not (0.0 <= start < end <= self.side_mm):
                raise ValidationError(f"Excitation segment {self.excitation.segment_mm} outside the edge")
        if self.gradient is not None:
            if self.gradient.axis not in ("x", "y"):
                raise ValidationError(f"Gradient axis must be 'x' or 'y', got {self.gradient.axis!r}")
            _check_range("gradient mu_start", self.gradient.mu_start, MU_RANGE)
            _check_range("gradient mu_end", self.gradient.mu_end, MU_RANGE)
        for inc in self.inclusions:
            _check_range("inclusion mu", inc.mu, MU_RANGE)
            _check_range("inclusion damping", inc.damping, DAMPING_RANGE)
            if inc.radius <= 0:
                raise ValidationError(f"Inclusion radius must be positive, got {inc.radius}")
            if not _disc_inside(inc.center, inc.radius, self.side_mm):
                raise ValidationError(f"Inclusion at {inc.center} r={inc.radius} leaves the domain")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["excitation"]["edge"] = self.excitation.edge.value
        data["phantom_class"] = self.phantom_class.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PhantomSpec":
        exc = data["excitation"]
        segment = exc.get("segment_mm")
        gradient = data.get("gradient")
        return cls(
            side_mm=float(data["side_mm"]),
            spacing_mm=float(data["spacing_mm"]),
            background_mu=float(data["background_mu"]),
            background_damping=float(data["background_damping"]),
            excitation=Excitation(
                edge=Edge(exc["edge"]),
                amplitude=float(exc["amplitude"]),
                segment_mm=tuple(segment) if segment is not None else None,
            ),
            inclusions=tuple(
                Inclusion(
                    center=tuple(inc["center"]),
                    radius=float(inc["radius"]),
                    mu=float(inc["mu"]),
                    damping=float(inc["damping"]),
                )
                for inc in data.get("inclusions", [])
            ),
            gradient=Gradient(**gradient) if gradient else None,
            seed=int(data.get("seed", 0)),
            phantom_class=PhantomClass.parse(data.get("phantom_class", PhantomClass.HOMOGENEOUS.value)),
        )


def _check_range(name: str, value: float, bounds: Tuple[float, float]) -> None:
    low, high = bounds
    if not (low - _RANGE_SLACK <= value <= high + _RANGE_SLACK):
        raise ValidationError(f"{name}={value} outside [{low}, {high}]")


def _disc_inside(center: Tuple[float, float], radius: float, side: float) -> bool:
    x, y = center
    return radius <= x <= side - radius and radius <= y <= side - radius


def _overlaps(a: Inclusion, b: Inclusion) -> bool:
    return math.dist(a.center, b.center) <= a.radius + b.radius


def _place_random_inclusions(rng: np.random.Generator, count: int, side: float) -> List[Inclusion]:
    placed: List[Inclusion] = []
    failures = 0
    max_radius = min(RADIUS_RANGE[1], side / 2.0)
    if max_radius < RADIUS_RANGE[0]:
        raise ValidationError(f"Domain of {side} mm cannot hold a {RADIUS_RANGE[0]} mm inclusion")
    while len(placed) < count:
        radius = float(rng.uniform(RADIUS_RANGE[0], max_radius))
        center = (float(rng.uniform(radius, side - radius)), float(rng.uniform(radius, side - radius)))
        candidate = Inclusion(
            center=center,
            radius=radius,
            mu=float(rng.uniform(*MU_RANGE)),
            damping=float(rng.uniform(*DAMPING_RANGE)),
        )
        if any(_overlaps(candidate, other) for other in placed):
            failures += 1
            if failures >= MAX_PLACEMENT_FAILURES:
                raise ValidationError(
                    f"Could not place {count} non-overlapping inclusions after {failures} attempts"
                )
            continue
        placed.append(candidate)
    return placed


def _place_fixed_inclusions(rng: np.random.Generator, side: float) -> List[Inclusion]:
    # quadrant midpoints; radius capped so neighbours never touch
    max_radius = min(RADIUS_RANGE[1], 0.95 * side / 4.0)
    if max_radius < RADIUS_RANGE[0]:
        raise ValidationError(f"Domain of {side} mm is too small for four fixed inclusions")
    centers = [(side / 4, side / 4), (3 * side / 4, side / 4), (side / 4, 3 * side / 4), (3 * side / 4, 3 * side / 4)]
    return [
        Inclusion(
            center=c,
            radius=float(rng.uniform(RADIUS_RANGE[0], max_radius)),
            mu=float(rng.uniform(*MU_RANGE)),
            damping=float(rng.uniform(*DAMPING_RANGE)),
        )
        for c in centers
    ]


def sample_spec(
    phantom_class: Union[PhantomClass, str],
    seed: int,
    side_mm: float = DEFAULT_SIDE_MM,
    spacing_mm: float = DEFAULT_SPACING_MM,
) -> PhantomSpec:
    """Draw a phantom of ``phantom_class`` deterministically from ``seed``."""
    if not isinstance(phantom_class, PhantomClass):
        phantom_class = PhantomClass.parse(phantom_class)
    rng = make_rng(seed)

    background_mu = float(rng.uniform(*MU_RANGE))
    background_damping = float(rng.uniform(*DAMPING_RANGE))
    amplitude = float(rng.uniform(*AMPLITUDE_RANGE))
    edge = EDGES[int(rng.integers(len(EDGES)))]

    segment = None
    gradient = None
    inclusions: List[Inclusion] = []
    if phantom_class == PhantomClass.LINEAR_GRADIENT:
        axis = "x" if rng.integers(2) == 0 else "y"
        gradient = Gradient(axis=axis, mu_start=float(rng.uniform(*MU_RANGE)), mu_end=float(rng.uniform(*MU_RANGE)))
    elif phantom_class == PhantomClass.FOUR_RANDOM_INCLUSIONS:
        inclusions = _place_random_inclusions(rng, 4, side_mm)
    elif phantom_class == PhantomClass.TWO_RANDOM_INCLUSIONS:
        inclusions = _place_random_inclusions(rng, 2, side_mm)
    elif phantom_class == PhantomClass.FOUR_FIXED_INCLUSIONS:
        inclusions = _place_fixed_inclusions(rng, side_mm)
    elif phantom_class == PhantomClass.OFF_CENTER_EXCITATION:
        length = float(rng.uniform(*SEGMENT_FRACTION_RANGE)) * side_mm
        start = float(rng.uniform(0.0, side_mm - length))
        segment = (start, start + length)

    spec = PhantomSpec(
        side_mm=side_mm,
        spacing_mm=spacing_mm,
        background_mu=background_mu,
        background_damping=background_damping,
        excitation=Excitation(edge=edge, amplitude=amplitude, segment_mm=segment),
        inclusions=tuple(inclusions),
        gradient=gradient,
        seed=int(seed),
        phantom_class=phantom_class,
    )
    logger.debug(f"Sampled {phantom_class.value} phantom seed={seed} with {len(inclusions)} inclusions")
    return spec


def node_coordinates(spec: PhantomSpec) -> Tuple[np.ndarray, np.ndarray]:
    """(x, y) coordinate grids in mm for every node of the phantom."""
    coords = np.arange(spec.grid_size) * spec.spacing_mm
    y, x = np.meshgrid(coords, coords, indexing="ij")
    return x, y


def inclusion_masks(spec: PhantomSpec) -> List[np.ndarray]:
    x, y = node_coordinates(spec)
    return [
        (x - inc.center[0]) ** 2 + (y - inc.center[1]) ** 2 <= inc.radius ** 2
        for inc in spec.inclusions
    ]


def render_stiffness(spec: PhantomSpec) -> Tuple[ScalarField, ScalarField]:
    """Rasterise ``spec`` into hard-edged shear modulus (Pa) and damping maps."""
    x, y = node_coordinates(spec)
    if spec.gradient is not None:
        coord = x if spec.gradient.axis == "x" else y
        g = spec.gradient
        mu = g.mu_start + (g.mu_end - g.mu_start) * coord / spec.side_mm
    else:
        mu = np.full(x.shape, spec.background_mu)
    damping = np.full(x.shape, spec.background_damping)

    for inc, mask in zip(spec.inclusions, inclusion_masks(spec)):
        mu[mask] = inc.mu
        damping[mask] = inc.damping
    return ScalarField(mu, spec.spacing_mm), ScalarField(damping, spec.spacing_mm)


def save_spec(spec: PhantomSpec, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_spec(path: Union[str, Path]) -> PhantomSpec:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return PhantomSpec.from_dict(data)
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ValidationError(f"{path}: not a phantom spec ({e})") from e
