"""
Patch extraction for training, overlapping tiling for inference and
overlap-averaged reassembly, plus the MREP patch-set container.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..exceptions import FieldFormatError, ValidationError
from ..fields import ComplexField, ScalarField, sidecar_path

logger = logging.getLogger(__name__)

TRAIN_PATCH_SIZE = 30
TRAIN_STRIDE = 30
INFER_PATCH_SIZE = 20
INFER_STRIDE = 3
EXCLUSION_THRESHOLD = 0.5
MIN_PATCH_SIZE = 8

MREP_MAGIC = b"MREP"
MREP_VERSION = 1
# magic | version | count | height | width | has_target | stride | threshold
_MREP_HEADER = struct.Struct("<4sIIIIIIf")
_RECORD_HEAD = struct.Struct("<iiI")  # origin row, origin col, source index


@dataclass(frozen=True, eq=False)
class Patch:
    input: np.ndarray  # (2, h, w): Re u, Im u in mm
    origin: Tuple[int, int]
    source_id: str
    target: Optional[np.ndarray] = None  # (h, w) in Pa

    @property
    def size(self) -> Tuple[int, int]:
        return self.input.shape[1], self.input.shape[2]


@dataclass
class PatchSet:
    patches: List[Patch] = field(default_factory=list)
    patch_size: int = TRAIN_PATCH_SIZE
    stride: int = TRAIN_STRIDE
    exclusion_threshold: float = EXCLUSION_THRESHOLD

    def __len__(self) -> int:
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    @property
    def has_targets(self) -> bool:
        return bool(self.patches) and all(p.target is not None for p in self.patches)

    @property
    def source_ids(self) -> List[str]:
        return sorted({p.source_id for p in self.patches})

    def inputs(self) -> np.ndarray:
        return np.stack([p.input for p in self.patches])

    def targets(self) -> np.ndarray:
        if not self.has_targets:
            raise ValidationError("PatchSet has no targets")
        return np.stack([p.target for p in self.patches])

    def extend(self, other: "PatchSet") -> None:
        self.patches.extend(other.patches)


def _validate_tiling(shape: Tuple[int, int], size: int, stride: int) -> None:
    if size < MIN_PATCH_SIZE:
        raise ValidationError(f"Patch size must be >= {MIN_PATCH_SIZE}, got {size}")
    if stride < 1:
        raise ValidationError(f"Stride must be >= 1, got {stride}")
    if shape[0] < size or shape[1] < size:
        raise ValidationError(f"Field {shape[0]}x{shape[1]} is smaller than patch size {size}")


def _split_channels(values: np.ndarray) -> np.ndarray:
    return np.stack([values.real, values.imag])


def training_origins(length: int, size: int, stride: int) -> List[int]:
    return list(range(0, length - size + 1, stride))


def inference_origins(length: int, size: int, stride: int) -> List[int]:
    """Stride steps plus a final origin clamped to touch the far edge."""
    origins = list(range(0, length - size + 1, stride))
    if origins[-1] + size < length:
        origins.append(length - size)
    return origins


def keep_patch(target: np.ndarray, threshold: float) -> bool:
    """Patches with fewer than ``threshold`` nonzero target pixels are dropped."""
    return np.count_nonzero(target) / target.size >= threshold


def extract_training(
    u: ComplexField,
    mu: ScalarField,
    size: int = TRAIN_PATCH_SIZE,
    stride: int = TRAIN_STRIDE,
    source_id: str = "",
    exclusion_threshold: float = EXCLUSION_THRESHOLD,
) -> PatchSet:
    """Regular tiling of a (displacement, stiffness) pair into training patches."""
    if u.shape != mu.shape or u.spacing != mu.spacing:
        raise ValidationError(f"Displacement {u.shape}@{u.spacing} and stiffness {mu.shape}@{mu.spacing} differ")
    _validate_tiling(u.shape, size, stride)

    channels = _split_channels(u.values)
    patches = []
    dropped = 0
    for row in training_origins(u.height, size, stride):
        for col in training_origins(u.width, size, stride):
            target = mu.values[row:row + size, col:col + size]
            if not keep_patch(target, exclusion_threshold):
                dropped += 1
                continue
            patches.append(Patch(
                input=channels[:, row:row + size, col:col + size].copy(),
                origin=(row, col),
                source_id=source_id,
                target=target.copy(),
            ))
    if dropped:
        logger.debug(f"{source_id}: dropped {dropped} patches below {exclusion_threshold:.0%} nonzero")
    return PatchSet(patches, patch_size=size, stride=stride, exclusion_threshold=exclusion_threshold)


def extract_inference(
    u: ComplexField,
    size: int = INFER_PATCH_SIZE,
    stride: int = INFER_STRIDE,
    source_id: str = "",
) -> PatchSet:
    """Overlapping tiling with edge-clamped origins so every pixel is covered."""
    _validate_tiling(u.shape, size, stride)
    channels = _split_channels(u.values)
    patches = [
        Patch(input=channels[:, row:row + size, col:col + size].copy(), origin=(row, col), source_id=source_id)
        for row in inference_origins(u.height, size, stride)
        for col in inference_origins(u.width, size, stride)
    ]
    return PatchSet(patches, patch_size=size, stride=stride, exclusion_threshold=0.0)


def aggregate(
    predictions: Iterable[Tuple[Tuple[int, int], np.ndarray]],
    out_shape: Tuple[int, int],
    spacing: float = 1.0,
) -> Tuple[ScalarField, np.ndarray]:
    """Per-pixel mean of all covering predictions and the coverage mask."""
    total = np.zeros(out_shape)
    count = np.zeros(out_shape)
    seen = 0
    for (row, col), values in predictions:
        h, w = values.shape
        if row < 0 or col < 0 or row + h > out_shape[0] or col + w > out_shape[1]:
            raise ValidationError(f"Prediction at {(row, col)} of size {h}x{w} leaves {out_shape}")
        total[row:row + h, col:col + w] += values
        count[row:row + h, col:col + w] += 1
        seen += 1
    if seen == 0:
        raise ValidationError("No predictions to aggregate")
    covered = count > 0
    mean = np.zeros(out_shape)
    mean[covered] = total[covered] / count[covered]
    return ScalarField(mean, spacing), covered


def write_patchset(patch_set: PatchSet, path: Union[str, Path], extra: Optional[dict] = None) -> None:
    """MREP container: header, then per patch origin/source index and f32 payload."""
    path = Path(path)
    if not patch_set.patches:
        raise ValidationError("Refusing to write an empty PatchSet")
    sources = patch_set.source_ids
    source_index = {sid: i for i, sid in enumerate(sources)}
    has_target = patch_set.has_targets
    h, w = patch_set.patches[0].size

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MREP_HEADER.pack(
            MREP_MAGIC, MREP_VERSION, len(patch_set), h, w, int(has_target),
            patch_set.stride, patch_set.exclusion_threshold,
        ))
        for patch in patch_set:
            if patch.size != (h, w):
                raise ValidationError(f"Mixed patch sizes {patch.size} and {(h, w)}")
            fh.write(_RECORD_HEAD.pack(patch.origin[0], patch.origin[1], source_index[patch.source_id]))
            fh.write(patch.input.astype("<f4").tobytes())
            if has_target:
                fh.write(patch.target.astype("<f4").tobytes())

    sidecar = {"sources": sources, "patch_size": patch_set.patch_size, "count": len(patch_set)}
    sidecar.update(extra or {})
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_patchset(path: Union[str, Path]) -> PatchSet:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _MREP_HEADER.size:
        raise FieldFormatError(f"{path.name}: truncated header")
    magic, version, count, h, w, has_target, stride, threshold = _MREP_HEADER.unpack_from(data, 0)
    if magic != MREP_MAGIC:
        raise FieldFormatError(f"{path.name}: bad magic {magic!r}")
    if version != MREP_VERSION:
        raise FieldFormatError(f"{path.name}: version {version} not supported")

    side = sidecar_path(path)
    sources: Sequence[str] = json.loads(side.read_text(encoding="utf-8"))["sources"] if side.exists() else []
    values_per_patch = 2 * h * w + (h * w if has_target else 0)
    record_size = _RECORD_HEAD.size + 4 * values_per_patch
    if len(data) != _MREP_HEADER.size + count * record_size:
        raise FieldFormatError(f"{path.name}: payload does not hold {count} patches of {h}x{w}")

    patches = []
    offset = _MREP_HEADER.size
    for _ in range(count):
        row, col, src = _RECORD_HEAD.unpack_from(data, offset)
        offset += _RECORD_HEAD.size
        payload = np.frombuffer(data, dtype="<f4", count=values_per_patch, offset=offset).astype(np.float64)
        offset += 4 * values_per_patch
        patches.append(Patch(
            input=payload[:2 * h * w].reshape(2, h, w),
            origin=(row, col),
            source_id=sources[src] if src < len(sources) else str(src),
            target=payload[2 * h * w:].reshape(h, w) if has_target else None,
        ))
    return PatchSet(patches, patch_size=h, stride=stride, exclusion_threshold=float(threshold))
