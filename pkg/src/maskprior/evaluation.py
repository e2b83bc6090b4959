"""Mask IoU and PSNR metrics plus report rendering.

IoU is computed on the transient masks (the complement of the static
prior), matching how transient-mask quality is judged; two empty masks
count as perfect agreement.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MaskPriorError
from .prior_assembly import PriorMask


@dataclass
class EvalRow:
    scene: str
    view: int
    entity_count: int
    iou: float | None
    psnr: float | None


@dataclass
class EvalReport:
    rows: list[EvalRow]
    mean_iou: float | None
    mean_psnr: float | None
    score_threshold: str
    cd_threshold: float


def iou(pred_transient: np.ndarray, gt_transient: np.ndarray) -> float:
    """Intersection over union of two binary maps; 1.0 when both are empty."""
    if pred_transient.shape != gt_transient.shape:
        raise MaskPriorError(
            f"shape mismatch {pred_transient.shape} vs {gt_transient.shape}"
        )
    pred = pred_transient.astype(bool)
    gt = gt_transient.astype(bool)
    union = int((pred | gt).sum())
    if union == 0:
        return 1.0
    return int((pred & gt).sum()) / union


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over 8-bit images; inf when identical."""
    if a.shape != b.shape:
        raise MaskPriorError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def report(
    scene_name: str,
    priors: list[PriorMask],
    gt_transient_masks: dict[int, np.ndarray] | None = None,
    renders: dict[int, tuple[np.ndarray, np.ndarray]] | None = None,
    score_frac: float = 0.5,
    cd_threshold: float = 0.2,
) -> EvalReport:
    """Per-view IoU/PSNR rows plus means; metrics without inputs stay None."""
    rows = []
    for prior in priors:
        row_iou = None
        if gt_transient_masks is not None and prior.view in gt_transient_masks:
            row_iou = iou(~prior.static_map, gt_transient_masks[prior.view])
        row_psnr = None
        if renders is not None and prior.view in renders:
            row_psnr = psnr(*renders[prior.view])
        rows.append(
            EvalRow(
                scene=scene_name,
                view=prior.view,
                entity_count=len(prior.per_entity),
                iou=row_iou,
                psnr=row_psnr,
            )
        )
    ious = [r.iou for r in rows if r.iou is not None]
    psnrs = [r.psnr for r in rows if r.psnr is not None]
    return EvalReport(
        rows=rows,
        mean_iou=float(np.mean(ious)) if ious else None,
        mean_psnr=float(np.mean(psnrs)) if psnrs else None,
        score_threshold=f"{score_frac:g}*N",
        cd_threshold=cd_threshold,
    )


def _fmt(value: float | None) -> str:
    if value is None:
        return "n/a"
    if math.isinf(value):
        return "inf"
    return f"{value:.4f}"


def render_csv(rep: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["scene", "view", "entity_count", "iou", "psnr", "score_threshold", "cd_threshold"]
    )
    for row in rep.rows:
        writer.writerow(
            [
                row.scene,
                row.view,
                row.entity_count,
                _fmt(row.iou),
                _fmt(row.psnr),
                rep.score_threshold,
                f"{rep.cd_threshold:g}",
            ]
        )
    return buf.getvalue()


def render_table(rep: EvalReport) -> str:
    """Aligned plain-text table with a mean row."""
    header = ["view", "entities", "iou", "psnr"]
    body = [
        [str(r.view), str(r.entity_count), _fmt(r.iou), _fmt(r.psnr)] for r in rep.rows
    ]
    body.append(["mean", "", _fmt(rep.mean_iou), _fmt(rep.mean_psnr)])
    widths = [max(len(h), *(len(row[c]) for row in body)) for c, h in enumerate(header)]
    lines = [
        "  ".join(h.ljust(widths[c]) for c, h in enumerate(header)),
        "  ".join("-" * widths[c] for c in range(len(header))),
    ]
    for row in body:
        lines.append("  ".join(row[c].ljust(widths[c]) for c in range(len(header))))
    return "\n".join(lines) + "\n"
