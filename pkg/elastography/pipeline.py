"""
Pipeline stages behind the ``elastolab`` command.

Every stage reads and writes files under one run directory:

    phantoms/<case>.json            phantom spec
    phantoms/<case>_mu.mreg         rendered stiffness on the phantom grid
    fields/<case>_u.mreg            simulated displacement at the output spacing
    fields/<case>_mu.mreg           ground-truth stiffness at the output spacing
    dataset/{train,val,test}.mrep   patch sets, plus manifest.json
    model/dime.dimc                 trained network, plus history.csv
    maps/<case>_{mmdi,dime}.mreg    inverted stiffness maps
    maps/<case>_<method>_valid.mreg 1 where the inversion estimated, 0 where filled
    reports/evaluation.csv          per-case and ALL rows
    reports/figures/                PNG maps and per-pair SVG plots

Fields, CSVs and figures carry a <file>.json provenance sidecar.

Each case is written by exactly one worker, so stages parallelise over cases.
"""

import json
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from django.conf import settings

from .config import RunConfig
from .exceptions import FieldFormatError, NumericalError, TrainingDiverged, ValidationError
from .fields import (
    ComplexField,
    FieldMetadata,
    PhantomClass,
    ScalarField,
    add_noise,
    derive_seed,
    make_rng,
    read_field,
    write_field,
    write_sidecar,
)
from .jobs import run_parallel
from .services.dime_model import UNet, load_checkpoint, save_checkpoint
from .services.dime_service import dime_invert, train, write_history
from .services.evaluation_service import (
    SUMMARY_CASE_ID,
    evaluate_case,
    phantom_roi_masks,
    read_report,
    roi_stats,
    summarize_cases,
    write_report,
)
from .services.mmdi_service import mmdi_invert
from .services.patch_service import PatchSet, extract_training, read_patchset, write_patchset
from .services.phantom_service import load_spec, render_stiffness, sample_spec, save_spec
from .services.report_builder import build_report
from .services.wave_solver import median_wavelength, simulate

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
METHODS = ("mmdi", "dime")
CHECKPOINT_NAME = "dime.dimc"
REPORT_NAME = "evaluation.csv"
HISTORY_NAME = "history.csv"
# child-seed streams derived from the global seed
_NOISE_STREAM = 1
_SPLIT_STREAM = 2


def output_root(config: RunConfig, out: Optional[Union[str, Path]] = None) -> Path:
    if out is not None:
        return Path(out)
    if config.output_dir is not None:
        return Path(config.output_dir)
    return Path(settings.ELASTOLAB_OUTPUT_DIR)


def provenance(config: RunConfig, command: str, **extra: Any) -> Dict[str, Any]:
    return {"command": command, "config_hash": config.config_hash(), "seed": config.seed, **extra}


def _metadata(config: RunConfig, phantom_class: PhantomClass, seed: int, command: str, **extra) -> FieldMetadata:
    return FieldMetadata(
        frequency=config.solver.frequency,
        density=config.solver.density,
        phantom_class=phantom_class,
        seed=seed,
        provenance=provenance(config, command, **extra),
    )


def case_id(path: Union[str, Path]) -> str:
    """``homogeneous_0003`` from any of that case's files."""
    stem = Path(path).name.split(".")[0]
    for suffix in ("_mmdi_valid", "_dime_valid", "_u", "_mu", "_mmdi", "_dime"):
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def _class_slug(phantom_class: PhantomClass) -> str:
    return "".join(f"_{c.lower()}" if c.isupper() else c for c in phantom_class.value).lstrip("_")


def cmd_phantom(
    config: RunConfig,
    phantom_class: Optional[str] = None,
    count: Optional[int] = None,
    out: Optional[Union[str, Path]] = None,
) -> List[Path]:
    """Sample ``count`` phantoms of one class; writes spec JSON and stiffness MREG per case."""
    cls = PhantomClass.parse(phantom_class or config.phantom.phantom_class)
    count = config.phantom.count if count is None else count
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    root = output_root(config, out) / "phantoms"
    slug = _class_slug(cls)

    def make(index: int) -> Path:
        seed = derive_seed(config.seed, index)
        spec = sample_spec(cls, seed, side_mm=config.phantom.side_mm, spacing_mm=config.phantom.spacing_mm)
        name = f"{slug}_{index:04d}"
        spec_path = root / f"{name}.json"
        save_spec(spec, spec_path)
        mu, _ = render_stiffness(spec)
        write_field(mu, _metadata(config, cls, seed, "phantom", spec=spec_path.name), root / f"{name}_mu.mreg")
        return spec_path

    paths = run_parallel(make, range(count))
    logger.info(f"Wrote {count} {cls.value} phantoms to {root}")
    return paths


def _median_wavelength(u: ComplexField) -> Optional[float]:
    """Median local wavelength (mm) of the noise-free field, or None when no pixel is wave-like."""
    try:
        return round(median_wavelength(u), 6)
    except NumericalError:
        return None


def cmd_simulate(
    config: RunConfig,
    spec_files: Sequence[Union[str, Path]],
    out: Optional[Union[str, Path]] = None,
) -> List[Tuple[Path, Path]]:
    """Solve every phantom; writes displacement and resampled ground truth per case."""
    if not spec_files:
        raise ValidationError("No phantom specs to simulate")
    root = output_root(config, out) / "fields"
    solver = config.solver

    def run(spec_file: Union[str, Path]) -> Tuple[Path, Path]:
        spec_file = Path(spec_file)
        if not spec_file.exists():
            raise ValidationError(f"Phantom spec {spec_file} does not exist")
        spec = load_spec(spec_file)
        u, mu = simulate(spec, solver.frequency, solver.density, solver.output_spacing, solver.rtol)
        wavelength = _median_wavelength(u)
        u = add_noise(u, solver.snr_db, derive_seed(spec.seed, _NOISE_STREAM))
        name = case_id(spec_file)
        extra = {"spec": spec_file.name, "snr_db": solver.snr_db if math.isfinite(solver.snr_db) else "inf"}
        u_path, mu_path = root / f"{name}_u.mreg", root / f"{name}_mu.mreg"
        u_meta = _metadata(config, spec.phantom_class, spec.seed, "simulate", median_wavelength_mm=wavelength, **extra)
        write_field(u, u_meta, u_path)
        write_field(mu, _metadata(config, spec.phantom_class, spec.seed, "simulate", **extra), mu_path)
        return u_path, mu_path

    return run_parallel(run, list(spec_files))


def _floor_share(n: int, fraction: float) -> int:
    """``floor(n * fraction)`` with the fraction taken as written, so 100 * 0.29 is 29."""
    return math.floor(n * Fraction(repr(float(fraction))))


def split_sources(sources: Sequence[str], fractions: Sequence[float], seed: int) -> Dict[str, List[str]]:
    """Assign whole source fields to train/val/test.

    val and test get ``floor(n * f)`` fields each, train keeps the remainder;
    any split with a positive fraction must receive at least one field.
    """
    ordered = sorted(sources)
    n = len(ordered)
    order = make_rng(derive_seed(seed, _SPLIT_STREAM)).permutation(n)
    shuffled = [ordered[i] for i in order]
    n_val = _floor_share(n, fractions[1])
    n_test = _floor_share(n, fractions[2])
    n_train = n - n_val - n_test
    counts = {"train": n_train, "val": n_val, "test": n_test}
    for split, fraction in zip(SPLITS, fractions):
        if fraction > 0 and counts[split] < 1:
            raise ValidationError(f"{n} fields are too few for split {tuple(fractions)}: {split} would be empty")
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val:]),
    }


def cmd_dataset(
    config: RunConfig,
    field_pairs: Sequence[Tuple[Union[str, Path], Union[str, Path]]],
    out: Optional[Union[str, Path]] = None,
) -> Dict[str, Path]:
    """Tile (displacement, stiffness) pairs into per-split patch sets, split by source field."""
    root = output_root(config, out) / "dataset"
    by_case = {case_id(u_path): (Path(u_path), Path(mu_path)) for u_path, mu_path in field_pairs}
    if len(by_case) != len(field_pairs):
        raise ValidationError("Duplicate case ids among the field pairs")
    assignment = split_sources(list(by_case), config.patch.split, config.seed)
    patch = config.patch

    outputs = {}
    for split in SPLITS:
        patch_set = PatchSet(patch_size=patch.train_size, stride=patch.train_stride,
                             exclusion_threshold=patch.exclusion_threshold)
        for name in assignment[split]:
            u, _ = read_field(by_case[name][0])
            mu, _ = read_field(by_case[name][1])
            if not isinstance(u, ComplexField) or not isinstance(mu, ScalarField):
                raise FieldFormatError(f"{name}: expected complex displacement and real stiffness")
            patch_set.extend(extract_training(
                u, mu, size=patch.train_size, stride=patch.train_stride,
                source_id=name, exclusion_threshold=patch.exclusion_threshold,
            ))
        if not assignment[split]:
            continue
        if not len(patch_set):
            raise ValidationError(f"Split {split} has no patches above the exclusion threshold")
        path = root / f"{split}.mrep"
        write_patchset(patch_set, path, extra={"provenance": provenance(config, "dataset", split=split)})
        outputs[split] = path
        logger.info(f"{split}: {len(patch_set)} patches from {len(assignment[split])} fields")

    manifest = {
        "splits": assignment,
        "fields": {name: [str(p) for p in paths] for name, paths in sorted(by_case.items())},
        "provenance": provenance(config, "dataset"),
    }
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return outputs


def cmd_train(config: RunConfig, dataset_dir: Optional[Union[str, Path]] = None,
              out: Optional[Union[str, Path]] = None) -> Path:
    root = output_root(config, out)
    dataset_dir = Path(dataset_dir) if dataset_dir is not None else root / "dataset"
    train_path = dataset_dir / "train.mrep"
    if not train_path.exists():
        raise ValidationError(f"No training set at {train_path}; run `elastolab dataset` first")
    train_set = read_patchset(train_path)
    val_path = dataset_dir / "val.mrep"
    val_set = read_patchset(val_path) if val_path.exists() else None

    model_dir = root / "model"
    meta = {
        "train": config.train.to_dict(),
        "normalize_patches": config.train.normalize_patches,
        "provenance": provenance(config, "train"),
    }
    try:
        result = train(train_set, val_set, config.train)
    except TrainingDiverged as e:
        if e.params is not None:
            model = UNet(config.train.unet)
            model.load_state_dict(e.params)
            save_checkpoint(model_dir / CHECKPOINT_NAME, model, {**meta, "diverged": True})
            write_history(e.history or [], model_dir / HISTORY_NAME)
            write_sidecar(model_dir / HISTORY_NAME, {**meta["provenance"], "diverged": True})
            logger.error(f"Training diverged; last good state written to {model_dir / CHECKPOINT_NAME}")
        raise

    path = model_dir / CHECKPOINT_NAME
    save_checkpoint(path, result.model, {**meta, "best_epoch": result.best_epoch})
    write_history(result.history, model_dir / HISTORY_NAME)
    write_sidecar(model_dir / HISTORY_NAME, {**meta["provenance"], "best_epoch": result.best_epoch})
    logger.info(f"Best validation loss {result.best_val_loss:.5g} at epoch {result.best_epoch}")
    return path


@dataclass(frozen=True)
class InversionSummary:
    case: str
    method: str
    path: Path
    roi_mean: float  # Pa
    roi_std: float


def validity_path(map_path: Union[str, Path]) -> Path:
    """``maps/<case>_<method>_valid.mreg``: 1 where the inversion produced an estimate, 0 where it was filled."""
    map_path = Path(map_path)
    return map_path.with_name(map_path.name.replace(".mreg", "_valid.mreg"))


def _central_roi(shape: Tuple[int, int], erosion_px: int) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[erosion_px:shape[0] - erosion_px, erosion_px:shape[1] - erosion_px] = True
    return mask


def cmd_invert(
    config: RunConfig,
    method: str,
    field_files: Sequence[Union[str, Path]],
    checkpoint: Optional[Union[str, Path]] = None,
    out: Optional[Union[str, Path]] = None,
) -> List[InversionSummary]:
    """Invert displacement fields with MMDI or the trained network; one map per case."""
    if method not in METHODS:
        raise ValidationError(f"Unknown method {method!r}; choose from {METHODS}")
    if not field_files:
        raise ValidationError("No displacement fields to invert")
    root = output_root(config, out)

    model = None
    normalize = config.train.normalize_patches
    if method == "dime":
        checkpoint = Path(checkpoint) if checkpoint is not None else root / "model" / CHECKPOINT_NAME
        if not checkpoint.exists():
            raise ValidationError(
                f"No trained model at {checkpoint}. Run `elastolab train` first or pass --checkpoint <file>."
            )
        model, stored = load_checkpoint(checkpoint)
        normalize = stored.get("normalize_patches", normalize)

    fbank = config.mmdi.filter_bank()
    inversion = config.mmdi.inversion(config.solver)

    def run(field_file: Union[str, Path]) -> InversionSummary:
        u, meta = read_field(field_file)
        if not isinstance(u, ComplexField):
            raise FieldFormatError(f"{field_file}: expected a complex displacement field")
        if method == "mmdi":
            result = mmdi_invert(u, fbank, inversion)
            stiffness, valid = result.stiffness, result.valid
        else:
            # dime_invert rejects tilings that leave pixels uncovered
            stiffness = dime_invert(model, u, config.patch.infer_size, config.patch.infer_stride, normalize)
            valid = np.ones(stiffness.shape, dtype=bool)
        name = case_id(field_file)
        path = root / "maps" / f"{name}_{method}.mreg"
        map_meta = _metadata(config, meta.phantom_class, meta.seed, "invert", method=method)
        write_field(stiffness, map_meta, path)
        write_field(ScalarField(valid.astype(float), stiffness.spacing), map_meta, validity_path(path))
        mean, std = roi_stats(stiffness, _central_roi(stiffness.shape, config.eval.erosion_px))
        return InversionSummary(name, method, path, mean, std)

    # torch inference shares one model; keep it on a single thread
    workers = 1 if method == "dime" else None
    return run_parallel(run, list(field_files), workers)


def _optional_map(path: Path) -> Optional[ScalarField]:
    if not path.exists():
        return None
    stiffness, _ = read_field(path)
    return stiffness


def cmd_evaluate(
    config: RunConfig,
    cases: Optional[Sequence[str]] = None,
    out: Optional[Union[str, Path]] = None,
) -> Path:
    """Compare inverted maps against ground truth per ROI; writes the CSV report."""
    root = output_root(config, out)
    if cases is None:
        cases = sorted({case_id(p) for method in METHODS for p in (root / "maps").glob(f"*_{method}.mreg")})
    if not cases:
        raise ValidationError(f"No inverted maps under {root / 'maps'}; run `elastolab invert` first")

    rows = []
    for name in cases:
        gt_path = root / "fields" / f"{name}_mu.mreg"
        if not gt_path.exists():
            raise ValidationError(f"{name}: ground truth {gt_path} is missing")
        gt, _ = read_field(gt_path)
        dime_map = _optional_map(root / "maps" / f"{name}_dime.mreg")
        mmdi_map = _optional_map(root / "maps" / f"{name}_mmdi.mreg")
        if dime_map is None and mmdi_map is None:
            raise ValidationError(f"{name}: no inverted maps")
        spec_path = root / "phantoms" / f"{name}.json"
        if spec_path.exists():
            rois = phantom_roi_masks(load_spec(spec_path), gt.shape, gt.spacing, config.eval.erosion_px, gt)
        else:
            rois = {"whole": _central_roi(gt.shape, config.eval.erosion_px)}
        rows.extend(evaluate_case(dime_map, mmdi_map, gt, rois, case_id=name))

    rows.extend(summarize_cases(rows))
    path = root / "reports" / REPORT_NAME
    write_report(rows, path)
    write_sidecar(path, provenance(config, "evaluate", cases=list(cases)))
    logger.info(f"Evaluated {len(cases)} cases into {path}")
    return path


def cmd_report(
    config: RunConfig,
    report_path: Optional[Union[str, Path]] = None,
    out: Optional[Union[str, Path]] = None,
) -> List[Path]:
    """Render maps and per-pair comparison plots next to the evaluation CSV."""
    root = output_root(config, out)
    report_path = Path(report_path) if report_path is not None else root / "reports" / REPORT_NAME
    if not report_path.exists():
        raise ValidationError(f"No evaluation report at {report_path}; run `elastolab evaluate` first")
    rows = read_report(report_path)
    cases = sorted({r.case_id for r in rows} - {SUMMARY_CASE_ID})

    maps = {}
    for name in cases:
        for path in (
            root / "fields" / f"{name}_u.mreg",
            root / "fields" / f"{name}_mu.mreg",
            root / "maps" / f"{name}_mmdi.mreg",
            root / "maps" / f"{name}_dime.mreg",
        ):
            if path.exists():
                field_, _ = read_field(path)
                maps[path.name.split(".")[0]] = field_
    artifacts = build_report(rows, maps, report_path.parent / "figures")
    for artifact in artifacts:
        write_sidecar(artifact, provenance(config, "report", report=report_path.name))
    return artifacts
