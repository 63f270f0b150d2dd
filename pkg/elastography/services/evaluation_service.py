"""
Evaluation statistics: ROI means and inter-pixel variability, Pearson /
Spearman / OLS agreement, Bland-Altman limits, per-case report rows and
cross-case summaries.

All reported stiffness values are in kPa; maps come in as Pa.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage, stats

from ..exceptions import ValidationError
from ..fields import ScalarField
from .phantom_service import PhantomSpec

logger = logging.getLogger(__name__)

PA_PER_KPA = 1000.0
LOA_FACTOR = 1.96
DEFAULT_EROSION_PX = 2
SUMMARY_CASE_ID = "ALL"
METHOD_PAIRS: Tuple[Tuple[str, str, str], ...] = (
    ("dime_vs_gt", "dime", "gt"),
    ("mmdi_vs_gt", "mmdi", "gt"),
    ("dime_vs_mmdi", "dime", "mmdi"),
)

Mask = Union[np.ndarray, ScalarField]


@dataclass(frozen=True)
class EvalPair:
    estimate: float  # kPa
    reference: float  # kPa
    label: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.estimate) and math.isfinite(self.reference)):
            raise ValidationError(f"Non-finite pair {self.label!r}: ({self.estimate}, {self.reference})")


@dataclass(frozen=True)
class Correlations:
    pearson_r: float
    spearman_rho: float
    slope: float
    intercept: float
    r_squared: float

    @classmethod
    def undefined(cls) -> "Correlations":
        return cls(*([math.nan] * 5))


@dataclass(frozen=True)
class BlandAltman:
    bias: float  # kPa
    loa_low: float
    loa_high: float
    n: int

    @classmethod
    def undefined(cls, n: int = 0) -> "BlandAltman":
        return cls(math.nan, math.nan, math.nan, n)


@dataclass(frozen=True)
class ReportRow:
    case_id: str
    roi_id: str
    method_pair: str
    n: int
    mean_est: float
    mean_ref: float
    std_est: float
    pearson_r: float
    spearman_rho: float
    slope: float
    intercept: float
    r2: float
    ba_bias: float
    ba_lo: float
    ba_hi: float


REPORT_COLUMNS = [f.name for f in fields(ReportRow)]


def _as_mask(mask: Mask) -> np.ndarray:
    values = mask.values if isinstance(mask, ScalarField) else np.asarray(mask)
    if values.dtype != bool and not np.isin(values, (0, 1)).all():
        raise ValidationError("ROI mask must be binary")
    return values.astype(bool)


def roi_stats(stiffness: ScalarField, mask: Mask) -> Tuple[float, float]:
    """Mean and sample standard deviation of ``stiffness`` over ``mask``."""
    selected = _as_mask(mask)
    if selected.shape != stiffness.shape:
        raise ValidationError(f"Mask {selected.shape} does not match map {stiffness.shape}")
    values = stiffness.values[selected]
    if values.size < 2:
        raise ValidationError(f"ROI selects {values.size} pixels; need at least 2")
    return float(values.mean()), float(values.std(ddof=1))


def _split(pairs: Sequence[EvalPair]) -> Tuple[np.ndarray, np.ndarray]:
    return (
        np.array([p.estimate for p in pairs], dtype=float),
        np.array([p.reference for p in pairs], dtype=float),
    )


def correlations(pairs: Sequence[EvalPair]) -> Correlations:
    """Pearson r, Spearman rho and the OLS fit of estimate on reference."""
    if len(pairs) < 3:
        raise ValidationError(f"Correlations need at least 3 pairs, got {len(pairs)}")
    est, ref = _split(pairs)
    if np.ptp(est) == 0 or np.ptp(ref) == 0:
        raise ValidationError("Correlations are undefined for a constant variable")

    pearson_r = stats.pearsonr(ref, est)[0]
    spearman_rho = stats.spearmanr(ref, est)[0]
    fit = stats.linregress(ref, est)
    residual = est - (fit.intercept + fit.slope * ref)
    r_squared = 1.0 - np.sum(residual ** 2) / np.sum((est - est.mean()) ** 2)
    return Correlations(float(pearson_r), float(spearman_rho), float(fit.slope), float(fit.intercept), float(r_squared))


def bland_altman(pairs: Sequence[EvalPair]) -> BlandAltman:
    if len(pairs) < 3:
        raise ValidationError(f"Bland-Altman needs at least 3 pairs, got {len(pairs)}")
    est, ref = _split(pairs)
    diff = est - ref
    bias = float(diff.mean())
    spread = LOA_FACTOR * float(diff.std(ddof=1))
    return BlandAltman(bias=bias, loa_low=bias - spread, loa_high=bias + spread, n=len(pairs))


def _safe_correlations(pairs: Sequence[EvalPair], label: str) -> Correlations:
    try:
        return correlations(pairs)
    except ValidationError as e:
        logger.debug(f"{label}: correlations undefined ({e})")
        return Correlations.undefined()


def _safe_bland_altman(pairs: Sequence[EvalPair], label: str) -> BlandAltman:
    try:
        return bland_altman(pairs)
    except ValidationError as e:
        logger.debug(f"{label}: Bland-Altman undefined ({e})")
        return BlandAltman.undefined(len(pairs))


def _pixel_pairs(estimate: np.ndarray, reference: np.ndarray, label: str) -> List[EvalPair]:
    return [EvalPair(e, r, label) for e, r in zip(estimate / PA_PER_KPA, reference / PA_PER_KPA)]


def evaluate_case(
    dime_map: Optional[ScalarField],
    mmdi_map: Optional[ScalarField],
    gt_map: ScalarField,
    rois: Union[Mask, Mapping[str, Mask]],
    case_id: str = "",
) -> List[ReportRow]:
    """Pixel-level agreement per ROI for every method pair whose maps are present.

    Each ROI is intersected with the nonzero support of the ground truth.
    """
    maps = {"dime": dime_map, "mmdi": mmdi_map, "gt": gt_map}
    for name, stiffness in maps.items():
        if stiffness is not None and (stiffness.shape != gt_map.shape or stiffness.spacing != gt_map.spacing):
            raise ValidationError(
                f"{case_id}: {name} map {stiffness.shape}@{stiffness.spacing} is not co-registered "
                f"with ground truth {gt_map.shape}@{gt_map.spacing}"
            )
    if not isinstance(rois, Mapping):
        rois = {"whole": rois}
    support = gt_map.values != 0

    rows = []
    for roi_id, roi in rois.items():
        mask = _as_mask(roi)
        if mask.shape != gt_map.shape:
            raise ValidationError(f"{case_id}/{roi_id}: mask {mask.shape} does not match {gt_map.shape}")
        mask = mask & support
        if mask.sum() < 3:
            raise ValidationError(f"{case_id}/{roi_id}: ROI and ground-truth support share {int(mask.sum())} pixels")
        for pair_name, est_name, ref_name in METHOD_PAIRS:
            est_map, ref_map = maps[est_name], maps[ref_name]
            if est_map is None or ref_map is None:
                continue
            label = f"{case_id}/{roi_id}/{pair_name}"
            pairs = _pixel_pairs(est_map.values[mask], ref_map.values[mask], label)
            mean_est, std_est = roi_stats(est_map, mask)
            mean_ref, _ = roi_stats(ref_map, mask)
            corr = _safe_correlations(pairs, label)
            ba = _safe_bland_altman(pairs, label)
            rows.append(ReportRow(
                case_id=case_id, roi_id=roi_id, method_pair=pair_name, n=len(pairs),
                mean_est=mean_est / PA_PER_KPA, mean_ref=mean_ref / PA_PER_KPA, std_est=std_est / PA_PER_KPA,
                pearson_r=corr.pearson_r, spearman_rho=corr.spearman_rho, slope=corr.slope,
                intercept=corr.intercept, r2=corr.r_squared,
                ba_bias=ba.bias, ba_lo=ba.loa_low, ba_hi=ba.loa_high,
            ))
    return rows


def _erode(mask: np.ndarray, erosion_px: int) -> np.ndarray:
    if erosion_px <= 0:
        return mask
    return ndimage.binary_erosion(mask, iterations=erosion_px, border_value=0)


def phantom_roi_masks(
    spec: PhantomSpec,
    shape: Tuple[int, int],
    spacing: float,
    erosion_px: int = DEFAULT_EROSION_PX,
    gt: Optional[ScalarField] = None,
) -> Dict[str, np.ndarray]:
    """``whole``, ``background`` and ``R1..Rk`` masks on a ``shape`` grid at ``spacing`` mm.

    Every mask is eroded by ``erosion_px`` pixels; masks that erode away are
    left out.
    """
    rows = np.arange(shape[0]) * spacing
    cols = np.arange(shape[1]) * spacing
    y, x = np.meshgrid(rows, cols, indexing="ij")
    support = gt.values != 0 if gt is not None else np.ones(shape, dtype=bool)
    discs = [(x - inc.center[0]) ** 2 + (y - inc.center[1]) ** 2 <= inc.radius ** 2 for inc in spec.inclusions]

    candidates = {"whole": support}
    if discs:
        candidates["background"] = support & ~np.logical_or.reduce(discs)
        for index, disc in enumerate(discs, start=1):
            candidates[f"R{index}"] = support & disc

    masks = {}
    for roi_id, mask in candidates.items():
        eroded = _erode(mask, erosion_px)
        if eroded.sum() < 3:
            logger.warning(f"ROI {roi_id} of phantom seed={spec.seed} vanishes after {erosion_px}px erosion")
            continue
        masks[roi_id] = eroded
    return masks


def roi_kind(roi_id: str) -> str:
    return "inclusion" if roi_id.startswith("R") and roi_id[1:].isdigit() else roi_id


def summarize_cases(rows: Iterable[ReportRow]) -> List[ReportRow]:
    """Per-case ROI means turned into cross-case ``ALL`` rows, per ROI kind and method pair."""
    frame = report_frame([r for r in rows if r.case_id != SUMMARY_CASE_ID])
    if frame.empty:
        return []
    frame["roi_kind"] = frame["roi_id"].map(roi_kind)
    summary = []
    for (kind, pair_name), group in frame.groupby(["roi_kind", "method_pair"], sort=True):
        label = f"{SUMMARY_CASE_ID}/{kind}/{pair_name}"
        pairs = [
            EvalPair(est, ref, f"{case}/{roi}")
            for est, ref, case, roi in zip(group["mean_est"], group["mean_ref"], group["case_id"], group["roi_id"])
        ]
        corr = _safe_correlations(pairs, label)
        ba = _safe_bland_altman(pairs, label)
        summary.append(ReportRow(
            case_id=SUMMARY_CASE_ID, roi_id=kind, method_pair=pair_name, n=len(pairs),
            mean_est=float(group["mean_est"].mean()), mean_ref=float(group["mean_ref"].mean()),
            std_est=float(group["mean_est"].std(ddof=1)) if len(pairs) > 1 else math.nan,
            pearson_r=corr.pearson_r, spearman_rho=corr.spearman_rho, slope=corr.slope,
            intercept=corr.intercept, r2=corr.r_squared,
            ba_bias=ba.bias, ba_lo=ba.loa_low, ba_hi=ba.loa_high,
        ))
    return summary


def report_frame(rows: Iterable[ReportRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in rows], columns=REPORT_COLUMNS)


def write_report(rows: Iterable[ReportRow], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report_frame(rows).to_csv(path, index=False, float_format="%.10g", na_rep="nan")


def read_report(path: Union[str, Path]) -> List[ReportRow]:
    frame = pd.read_csv(path, dtype={"case_id": str, "roi_id": str, "method_pair": str})
    missing = set(REPORT_COLUMNS) - set(frame.columns)
    if missing:
        raise ValidationError(f"{path}: report lacks columns {sorted(missing)}")
    return [
        ReportRow(**{col: (int(rec[col]) if col == "n" else rec[col]) for col in REPORT_COLUMNS})
        for rec in frame.to_dict("records")
    ]
