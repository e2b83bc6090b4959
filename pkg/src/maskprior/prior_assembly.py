"""Score accumulation, entity classification and final prior composition.

Per reference view only the best accepted pair contributes, capping each
view's contribution at 1.0 so the score threshold of score_frac * N keeps
its majority-of-views meaning. Pixels belonging to no entity mask default
to static: entity maps rarely cover every pixel, and the prior masks
entities, not background.
"""

from dataclasses import dataclass

import numpy as np

from .attention_match import MatchRecord
from .errors import MaskPriorError
from .geometry import PointSet
from .scene_io import SceneBundle

CLASS_STATIC = "static"
CLASS_TRANSIENT_CANDIDATE = "transient-candidate"
CLASS_VLM_STATIC = "vlm-static"
CLASS_VLM_TRANSIENT = "vlm-transient"

_STATIC_CLASSES = (CLASS_STATIC, CLASS_VLM_STATIC)


@dataclass
class EntityDecision:
    classification: str
    score_sum: float
    records: list[MatchRecord]


@dataclass
class PriorMask:
    """Per-view static map (True = static) plus per-entity audit trail."""

    view: int
    static_map: np.ndarray
    per_entity: dict[int, EntityDecision]


def match_score(cd: float, threshold_cd: float) -> float | None:
    """Normalized confidence (threshold - cd) / threshold, or None if rejected.

    Only pairs strictly below the Chamfer threshold score; cd == threshold
    is rejected.
    """
    if cd < 0:
        raise MaskPriorError(f"negative Chamfer distance {cd}")
    if threshold_cd <= 0:
        raise MaskPriorError("threshold_cd must be positive")
    if cd >= threshold_cd:
        return None
    return (threshold_cd - cd) / threshold_cd


def classify(records: list[MatchRecord], n_views: int, score_frac: float = 0.5) -> tuple[str, float]:
    """Sum the best accepted score per reference view and threshold it.

    Static iff score_sum is strictly above score_frac * n_views; otherwise
    transient candidate. Returns (classification, score_sum).
    """
    best_per_view: dict[int, float] = {}
    for record in records:
        if record.status != "accepted":
            continue
        prev = best_per_view.get(record.ref_view)
        if prev is None or record.score > prev:
            best_per_view[record.ref_view] = record.score
    score_sum = float(sum(best_per_view.values()))
    if score_sum > score_frac * n_views:
        return CLASS_STATIC, score_sum
    return CLASS_TRANSIENT_CANDIDATE, score_sum


def assemble_priors(
    scene: SceneBundle,
    match_records: dict[tuple[int, int], list[MatchRecord]],
    verdicts: dict[int, dict[int, str]] | None = None,
    score_frac: float = 0.5,
) -> list[PriorMask]:
    """Compose per-view PriorMasks from match records and VLM verdicts.

    ``match_records`` must hold a (possibly empty) record list for every
    (view, entity) in the scene; a missing key is an error naming the pair.
    ``verdicts`` maps view -> {entity_id: "static"|"transient"} for entities
    the VLM adjudicated; a static verdict promotes a transient candidate,
    never the reverse.
    """
    verdicts = verdicts or {}
    priors = []
    H, W = scene.image_size
    for i, view in enumerate(scene.views):
        static_map = np.ones((H, W), dtype=bool)
        per_entity: dict[int, EntityDecision] = {}
        view_verdicts = verdicts.get(i, {})
        for mask in view.entity_masks:
            key = (i, mask.entity_id)
            if key not in match_records:
                raise MaskPriorError(f"missing classification for view {i}, entity {mask.entity_id}")
            records = match_records[key]
            classification, score_sum = classify(records, scene.N, score_frac)
            if classification == CLASS_TRANSIENT_CANDIDATE:
                verdict = view_verdicts.get(mask.entity_id)
                if verdict == "static":
                    classification = CLASS_VLM_STATIC
                elif verdict == "transient":
                    classification = CLASS_VLM_TRANSIENT
            if classification not in _STATIC_CLASSES:
                static_map[mask.pixels] = False
            per_entity[mask.entity_id] = EntityDecision(classification, score_sum, records)
        priors.append(PriorMask(view=i, static_map=static_map, per_entity=per_entity))
    return priors


def filter_points(
    points: PointSet, provenance: np.ndarray, priors: list[PriorMask]
) -> PointSet:
    """Keep points whose source pixel is static in that view's prior.

    ``provenance`` is Mx3 int (view, v, u), one row per point.
    """
    provenance = np.asarray(provenance)
    if provenance.shape != (len(points), 3):
        raise MaskPriorError(
            f"provenance shape {provenance.shape} does not match {len(points)} points"
        )
    by_view = {p.view: p.static_map for p in priors}
    keep = np.zeros(len(points), dtype=bool)
    for row, (view, v, u) in enumerate(provenance):
        static_map = by_view.get(int(view))
        if static_map is None:
            raise MaskPriorError(f"no prior for view {view}")
        keep[row] = bool(static_map[int(v), int(u)])
    return PointSet(points=points.points[keep], source=points.source)
