"""
Core grid types and the MREG field container.

Fields are node-based regular grids: row ``i`` sits at ``y = i * spacing`` and
column ``j`` at ``x = j * spacing`` (millimetres). Values are held as
read-only float64/complex128 arrays; the MREG container stores float32, so a
field round-trips bit-exactly whenever its values are float32-representable
(everything produced by ``read_field`` is).
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
from scipy import ndimage

from .exceptions import FieldFormatError, ValidationError

logger = logging.getLogger(__name__)

MREG_MAGIC = b"MREG"
MREG_VERSION = 1
DTYPE_REAL = 1
DTYPE_COMPLEX = 2
_HEADER = struct.Struct("<4sIIIIf")

POISSON_RATIO = 0.499  # recorded in sidecars only; the scalar shear model ignores it


class PhantomClass(str, Enum):
    HOMOGENEOUS = "Homogeneous"
    LINEAR_GRADIENT = "LinearGradient"
    FOUR_RANDOM_INCLUSIONS = "FourRandomInclusions"
    TWO_RANDOM_INCLUSIONS = "TwoRandomInclusions"
    FOUR_FIXED_INCLUSIONS = "FourFixedInclusions"
    OFF_CENTER_EXCITATION = "OffCenterExcitation"

    @classmethod
    def parse(cls, name: str) -> "PhantomClass":
        for member in cls:
            if name in (member.value, member.name) or name.lower() == member.value.lower():
                return member
        raise ValidationError(f"Unknown phantom class: {name!r}")


def _frozen_array(values: Any, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_grid(arr: np.ndarray, spacing: float, kind: str) -> None:
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{kind} must be a non-empty 2D grid, got shape {arr.shape}")
    if not (math.isfinite(spacing) and spacing > 0):
        raise ValidationError(f"{kind} spacing must be positive, got {spacing}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{kind} contains non-finite values")


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real-valued map (Pa for stiffness, dimensionless for masks and damping)."""

    values: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        arr = _frozen_array(self.values, np.float64)
        _check_grid(arr, float(self.spacing), "ScalarField")
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(values, self.spacing)


@dataclass(frozen=True, eq=False)
class ComplexField:
    """Complex first-harmonic displacement (mm)."""

    values: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        arr = _frozen_array(self.values, np.complex128)
        _check_grid(arr, float(self.spacing), "ComplexField")
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray) -> "ComplexField":
        return ComplexField(values, self.spacing)


Field = Union[ScalarField, ComplexField]


@dataclass(frozen=True)
class FieldMetadata:
    frequency: float = 60.0
    density: float = 1000.0
    phantom_class: PhantomClass = PhantomClass.HOMOGENEOUS
    seed: int = 0
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not (math.isfinite(self.frequency) and self.frequency > 0):
            raise ValidationError(f"frequency must be > 0 Hz, got {self.frequency}")
        if not (math.isfinite(self.density) and self.density > 0):
            raise ValidationError(f"density must be > 0 kg/m^3, got {self.density}")
        if self.seed < 0:
            raise ValidationError(f"seed must be unsigned, got {self.seed}")
        if not isinstance(self.phantom_class, PhantomClass):
            object.__setattr__(self, "phantom_class", PhantomClass.parse(str(self.phantom_class)))

    def to_json(self) -> Dict[str, Any]:
        return {
            "frequency_hz": self.frequency,
            "density_kg_m3": self.density,
            "phantom_class": self.phantom_class.value,
            "seed": int(self.seed),
            "poisson_ratio": POISSON_RATIO,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "FieldMetadata":
        return cls(
            frequency=float(data.get("frequency_hz", 60.0)),
            density=float(data.get("density_kg_m3", 1000.0)),
            phantom_class=PhantomClass.parse(data.get("phantom_class", PhantomClass.HOMOGENEOUS.value)),
            seed=int(data.get("seed", 0)),
            provenance=dict(data.get("provenance", {})),
        )


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_sidecar(path: Union[str, Path], data: Dict[str, Any]) -> Path:
    """Write ``data`` as the JSON sidecar of the artifact at ``path``."""
    side = sidecar_path(path)
    side.parent.mkdir(parents=True, exist_ok=True)
    with open(side, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return side


def write_field(field_: Field, meta: FieldMetadata, path: Union[str, Path]) -> None:
    """Write ``field_`` as MREG plus its JSON metadata sidecar."""
    path = Path(path)
    if isinstance(field_, ComplexField):
        dtype = DTYPE_COMPLEX
        payload = np.stack([field_.values.real, field_.values.imag], axis=-1).astype("<f4")
    elif isinstance(field_, ScalarField):
        dtype = DTYPE_REAL
        payload = field_.values.astype("<f4")
    else:
        raise FieldFormatError(f"Unsupported field type: {type(field_).__name__}")

    if not np.all(np.isfinite(payload)):
        raise ValidationError("Field values overflow float32")

    header = _HEADER.pack(MREG_MAGIC, MREG_VERSION, dtype, field_.height, field_.width, field_.spacing)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes(order="C"))
    write_sidecar(path, meta.to_json())
    logger.debug(f"Wrote {path.name}: {field_.height}x{field_.width} dtype={dtype}")


def read_field(path: Union[str, Path]) -> Tuple[Field, FieldMetadata]:
    """Inverse of ``write_field``."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FieldFormatError(f"{path.name}: truncated header ({len(data)} bytes)")
    magic, version, dtype, height, width, spacing = _HEADER.unpack_from(data, 0)
    if magic != MREG_MAGIC:
        raise FieldFormatError(f"{path.name}: bad magic {magic!r}")
    if version != MREG_VERSION:
        raise FieldFormatError(f"{path.name}: version {version} not supported (expected {MREG_VERSION})")
    if dtype not in (DTYPE_REAL, DTYPE_COMPLEX):
        raise FieldFormatError(f"{path.name}: unsupported dtype code {dtype}")

    per_value = 1 if dtype == DTYPE_REAL else 2
    expected = height * width * per_value
    payload_bytes = len(data) - _HEADER.size
    if payload_bytes != expected * 4:
        raise FieldFormatError(
            f"{path.name}: header claims {height}x{width} but payload holds {payload_bytes // (4 * per_value)} values"
        )
    raw = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)

    if dtype == DTYPE_REAL:
        field_: Field = ScalarField(raw.reshape(height, width), float(spacing))
    else:
        pairs = raw.reshape(height, width, 2).astype(np.float64)
        field_ = ComplexField(pairs[..., 0] + 1j * pairs[..., 1], float(spacing))

    side = sidecar_path(path)
    if side.exists():
        meta = FieldMetadata.from_json(json.loads(side.read_text(encoding="utf-8")))
    else:
        logger.warning(f"{path.name}: no metadata sidecar, using defaults")
        meta = FieldMetadata()
    return field_, meta


def resampled_shape(shape: Tuple[int, int], spacing_in: float, spacing_out: float) -> Tuple[int, int]:
    return tuple(int(round((n - 1) * spacing_in / spacing_out)) + 1 for n in shape)  # type: ignore[return-value]


def resample(field_: Field, target_spacing: float) -> Field:
    """Bilinear resampling onto a grid with ``target_spacing`` (mm)."""
    if not (math.isfinite(target_spacing) and target_spacing > 0):
        raise ValidationError(f"target spacing must be positive, got {target_spacing}")
    out_shape = resampled_shape(field_.shape, field_.spacing, target_spacing)
    if min(out_shape) < 2:
        raise ValidationError(f"Resampling to {target_spacing} mm degenerates to shape {out_shape}")

    ratio = target_spacing / field_.spacing
    rows = np.minimum(np.arange(out_shape[0]) * ratio, field_.height - 1)
    cols = np.minimum(np.arange(out_shape[1]) * ratio, field_.width - 1)
    grid = np.meshgrid(rows, cols, indexing="ij")

    def _interp(values: np.ndarray) -> np.ndarray:
        return ndimage.map_coordinates(values, grid, order=1, mode="nearest")

    if isinstance(field_, ComplexField):
        values = _interp(field_.values.real) + 1j * _interp(field_.values.imag)
        return ComplexField(values, target_spacing)
    return ScalarField(_interp(field_.values), target_spacing)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator so datasets are bit-reproducible across platforms."""
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(seed: int, *keys: int) -> int:
    """Stable child seed for the ``keys``-th item of a seeded batch."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1, dtype=np.uint32)[0])


def add_noise(u: ComplexField, snr_db: float, seed: int) -> ComplexField:
    """Add circular complex Gaussian noise at ``snr_db``; ``+inf`` disables noise."""
    if snr_db == math.inf:
        return u
    if not math.isfinite(snr_db):
        raise ValidationError(f"snr_db must be finite or +inf, got {snr_db}")
    signal_power = float(np.mean(np.abs(u.values) ** 2))
    if signal_power == 0.0:
        raise ValidationError("SNR is undefined for an all-zero field")

    noise_power = signal_power / (10.0 ** (snr_db / 10.0))
    rng = make_rng(seed)
    scale = math.sqrt(noise_power / 2.0)
    noise = rng.normal(0.0, scale, size=u.shape) + 1j * rng.normal(0.0, scale, size=u.shape)
    return u.with_values(u.values + noise)


def discrete_laplacian(values: np.ndarray, scale: int, spacing: float) -> Tuple[np.ndarray, np.ndarray]:
    """Five-point Laplacian with stencil arm ``scale`` nodes at node ``spacing``.

    Returns ``(laplacian, valid)``; nodes closer than ``scale`` to the border
    have no full stencil and are reported invalid (value 0).
    """
    if scale < 1:
        raise ValidationError(f"Laplacian scale must be >= 1, got {scale}")
    s = int(scale)
    lap = np.zeros_like(values)
    valid = np.zeros(values.shape, dtype=bool)
    if values.shape[0] <= 2 * s or values.shape[1] <= 2 * s:
        return lap, valid
    center = values[s:-s, s:-s]
    lap[s:-s, s:-s] = (
        values[s:-s, 2 * s:] + values[s:-s, :-2 * s] + values[2 * s:, s:-s] + values[:-2 * s, s:-s] - 4.0 * center
    ) / (s * spacing) ** 2
    valid[s:-s, s:-s] = True
    return lap, valid
