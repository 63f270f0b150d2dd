"""
Figures for an evaluation run: stiffness maps and wave fields as PNG images,
and one SVG per method pair with a scatter plot against the reference and a
Bland-Altman plot.
"""

import logging
import math
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import matplotlib
import numpy as np
from matplotlib import image as mpimg
from matplotlib.figure import Figure

from ..fields import ComplexField, Field
from .evaluation_service import (
    METHOD_PAIRS,
    SUMMARY_CASE_ID,
    EvalPair,
    ReportRow,
    bland_altman,
    correlations,
)

logger = logging.getLogger(__name__)

# fixed ids and no timestamps so reruns produce identical SVG bytes
matplotlib.rcParams["svg.hashsalt"] = "elastolab"
_SVG_METADATA = {"Date": None}

STIFFNESS_CMAP = "viridis"
WAVE_CMAP = "gray"


def render_map_png(field_: Field, path: Union[str, Path]) -> Path:
    """Stiffness in kPa on a colormap; displacement as the real part in grayscale."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(field_, ComplexField):
        values = field_.values.real
        limit = float(np.abs(values).max()) or 1.0
        mpimg.imsave(path, values, cmap=WAVE_CMAP, vmin=-limit, vmax=limit, origin="upper")
    else:
        values = field_.values / 1000.0
        low, high = float(values.min()), float(values.max())
        if high <= low:
            high = low + 1.0
        mpimg.imsave(path, values, cmap=STIFFNESS_CMAP, vmin=low, vmax=high, origin="upper")
    return path


def pair_points(rows: Sequence[ReportRow], method_pair: str, roi_id: str = "whole") -> List[EvalPair]:
    """Per-case ROI means of one method pair, skipping cross-case summary rows."""
    return [
        EvalPair(r.mean_est, r.mean_ref, r.case_id)
        for r in rows
        if r.method_pair == method_pair and r.roi_id == roi_id and r.case_id != SUMMARY_CASE_ID
    ]


def _axis_labels(method_pair: str) -> Tuple[str, str]:
    for name, est, ref in METHOD_PAIRS:
        if name == method_pair:
            return est.upper(), ref.upper()
    return "estimate", "reference"


def render_pair_svg(points: Sequence[EvalPair], method_pair: str, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    est = np.array([p.estimate for p in points])
    ref = np.array([p.reference for p in points])
    est_label, ref_label = _axis_labels(method_pair)

    fig = Figure(figsize=(9.0, 4.0))
    scatter, agreement = fig.subplots(1, 2)

    scatter.scatter(ref, est, s=14, color="tab:blue")
    if len(points):
        lo = float(min(est.min(), ref.min()))
        hi = float(max(est.max(), ref.max()))
        scatter.plot([lo, hi], [lo, hi], color="0.5", linestyle="--", linewidth=1, label="identity")
    if len(points) >= 3 and np.ptp(est) > 0 and np.ptp(ref) > 0:
        corr = correlations(points)
        xs = np.array([ref.min(), ref.max()])
        scatter.plot(xs, corr.intercept + corr.slope * xs, color="tab:red", linewidth=1,
                     label=f"OLS  R$^2$={corr.r_squared:.3f}")
        scatter.legend(loc="upper left", fontsize=8)
    scatter.set_xlabel(f"{ref_label} mean stiffness (kPa)")
    scatter.set_ylabel(f"{est_label} mean stiffness (kPa)")
    scatter.set_title(method_pair)

    mean = (est + ref) / 2.0
    agreement.scatter(mean, est - ref, s=14, color="tab:blue")
    if len(points) >= 3:
        ba = bland_altman(points)
        for value, style in ((ba.bias, "-"), (ba.loa_low, "--"), (ba.loa_high, "--")):
            if math.isfinite(value):
                agreement.axhline(value, color="tab:red", linestyle=style, linewidth=1)
        agreement.set_title(f"bias {ba.bias:.2f} kPa, LoA [{ba.loa_low:.2f}, {ba.loa_high:.2f}]")
    agreement.set_xlabel("mean of methods (kPa)")
    agreement.set_ylabel(f"{est_label} - {ref_label} (kPa)")

    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    return path


def build_report(rows: Sequence[ReportRow], maps: Dict[str, Field], out_dir: Union[str, Path]) -> List[Path]:
    """Render every map and one comparison SVG per method pair present in ``rows``."""
    out_dir = Path(out_dir)
    artifacts = []
    for name in sorted(maps):
        artifacts.append(render_map_png(maps[name], out_dir / "maps" / f"{name}.png"))

    pairs_present = [name for name, _, _ in METHOD_PAIRS if any(r.method_pair == name for r in rows)]
    for method_pair in pairs_present:
        points = pair_points(rows, method_pair)
        artifacts.append(render_pair_svg(points, method_pair, out_dir / f"{method_pair}.svg"))
    logger.info(f"Report: {len(maps)} maps, {len(pairs_present)} comparison plots in {out_dir}")
    return artifacts
