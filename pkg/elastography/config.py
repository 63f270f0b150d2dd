"""
Run configuration: a TOML file with one table per pipeline stage.

    seed = 7
    output_dir = "runs/desk"

    [solver]
    frequency = 60.0
    snr_db = 30.0

    [train]
    epochs = 40
    base_channels = 16

Missing keys take their defaults; unknown tables or keys are rejected.
"""

import hashlib
import json
import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple, Union

from .exceptions import ValidationError
from .fields import PhantomClass
from .services.dime_service import TrainConfig
from .services.evaluation_service import DEFAULT_EROSION_PX
from .services.mmdi_service import FilterBankConfig, InversionConfig
from .services.patch_service import (
    EXCLUSION_THRESHOLD,
    INFER_PATCH_SIZE,
    INFER_STRIDE,
    TRAIN_PATCH_SIZE,
    TRAIN_STRIDE,
)
from .services.phantom_service import DEFAULT_SIDE_MM, DEFAULT_SPACING_MM
from .services.wave_solver import DEFAULT_DENSITY, DEFAULT_FREQUENCY_HZ, RESIDUAL_TOLERANCE

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhantomConfig:
    side_mm: float = DEFAULT_SIDE_MM
    spacing_mm: float = DEFAULT_SPACING_MM
    phantom_class: str = PhantomClass.HOMOGENEOUS.value
    count: int = 1

    def __post_init__(self):
        PhantomClass.parse(self.phantom_class)
        if self.count < 1:
            raise ValidationError(f"phantom count must be >= 1, got {self.count}")


@dataclass(frozen=True)
class SolverConfig:
    frequency: float = DEFAULT_FREQUENCY_HZ
    density: float = DEFAULT_DENSITY
    output_spacing: float = 1.0  # mm
    snr_db: float = math.inf
    rtol: float = RESIDUAL_TOLERANCE

    def __post_init__(self):
        if not (self.frequency > 0 and self.density > 0 and self.output_spacing > 0 and self.rtol > 0):
            raise ValidationError("frequency, density, output_spacing and rtol must be positive")
        if math.isnan(self.snr_db):
            raise ValidationError("snr_db must be a number or inf")


@dataclass(frozen=True)
class MMDIConfig:
    low_cut: float = 2.0
    high_cut: float = 128.0
    butterworth_order: int = 4
    directions: Tuple[float, ...] = (0.0, 90.0, 180.0, 270.0)
    angular_half_width: float = 90.0
    buffer_fraction: float = 0.5
    laplacian_scales: Tuple[int, ...] = (1, 2)
    amplitude_floor: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "directions", tuple(self.directions))
        object.__setattr__(self, "laplacian_scales", tuple(self.laplacian_scales))
        self.filter_bank()

    def filter_bank(self) -> FilterBankConfig:
        return FilterBankConfig(
            low_cut=self.low_cut,
            high_cut=self.high_cut,
            butterworth_order=self.butterworth_order,
            directions=self.directions,
            angular_half_width=self.angular_half_width,
            buffer_fraction=self.buffer_fraction,
        )

    def inversion(self, solver: SolverConfig) -> InversionConfig:
        return InversionConfig(
            density=solver.density,
            frequency=solver.frequency,
            laplacian_scales=self.laplacian_scales,
            amplitude_floor=self.amplitude_floor,
        )


@dataclass(frozen=True)
class PatchConfig:
    train_size: int = TRAIN_PATCH_SIZE
    train_stride: int = TRAIN_STRIDE
    infer_size: int = INFER_PATCH_SIZE
    infer_stride: int = INFER_STRIDE
    exclusion_threshold: float = EXCLUSION_THRESHOLD
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)  # train, val, test

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(f) for f in self.split))
        if len(self.split) != 3 or any(f < 0 for f in self.split):
            raise ValidationError(f"split must be three non-negative fractions, got {self.split}")
        if not math.isclose(sum(self.split), 1.0, abs_tol=1e-9):
            raise ValidationError(f"split fractions must sum to 1, got {sum(self.split)}")
        if not (0.0 <= self.exclusion_threshold <= 1.0):
            raise ValidationError(f"exclusion_threshold must be in [0, 1], got {self.exclusion_threshold}")


@dataclass(frozen=True)
class EvalConfig:
    erosion_px: int = DEFAULT_EROSION_PX

    def __post_init__(self):
        if self.erosion_px < 0:
            raise ValidationError(f"erosion_px must be >= 0, got {self.erosion_px}")


SECTIONS = {
    "phantom": PhantomConfig,
    "solver": SolverConfig,
    "mmdi": MMDIConfig,
    "patch": PatchConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}
# the global seed drives training; [train] may not override it
_EXCLUDED_KEYS = {"train": {"seed"}}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: Optional[str] = None
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    mmdi: MMDIConfig = field(default_factory=MMDIConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.seed))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["train"].pop("seed")
        return data

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form of the resolved configuration."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None) -> "RunConfig":
        return replace(
            self,
            seed=self.seed if seed is None else seed,
            output_dir=self.output_dir if output_dir is None else output_dir,
        )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], source: str = "<config>") -> "RunConfig":
        unknown = set(data) - set(SECTIONS) - {"seed", "output_dir"}
        if unknown:
            raise ValidationError(f"{source}: unknown keys {sorted(unknown)}")
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ValidationError(f"{source}: seed must be a non-negative integer, got {seed!r}")
        output_dir = data.get("output_dir")
        if output_dir is not None and not isinstance(output_dir, str):
            raise ValidationError(f"{source}: output_dir must be a string")

        sections = {}
        for name, section_cls in SECTIONS.items():
            table = data.get(name, {})
            if not isinstance(table, Mapping):
                raise ValidationError(f"{source}: [{name}] must be a table")
            sections[name] = _build_section(section_cls, name, table, source, seed)
        return cls(seed=seed, output_dir=output_dir, **sections)


def _allowed_keys(section_cls: type, name: str) -> Iterable[str]:
    excluded = _EXCLUDED_KEYS.get(name, set())
    return [f.name for f in fields(section_cls) if f.name not in excluded]


def _build_section(section_cls: type, name: str, table: Mapping[str, Any], source: str, seed: int):
    allowed = set(_allowed_keys(section_cls, name))
    unknown = set(table) - allowed
    if unknown:
        raise ValidationError(f"{source}: unknown keys in [{name}]: {sorted(unknown)}")
    kwargs = dict(table)
    if name == "train":
        kwargs["seed"] = seed
    try:
        return section_cls(**kwargs)
    except TypeError as e:
        raise ValidationError(f"{source}: bad value in [{name}]: {e}") from e


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Parse a TOML run configuration; no path means all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Config file {path} does not exist")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ValidationError(f"{path}: not valid TOML ({e})") from e
    config = RunConfig.from_dict(data, source=str(path))
    logger.debug(f"Loaded run config {path} (hash {config.config_hash()[:12]})")
    return config
