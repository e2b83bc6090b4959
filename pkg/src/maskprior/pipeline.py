"""End-to-end orchestration: load -> tokenize -> match -> score/classify ->
VLM on large candidates -> assemble priors -> filter points -> save + report.

Match work items (one per query mask and reference view) and per-view VLM
queries run on a bounded worker pool; results are merged by key so output
is identical regardless of the jobs setting. A run manifest echoes the
effective config and seeds for auditability.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .attention_match import MatchRecord, candidate_pairs, recall
from .config import PipelineConfig
from .errors import AttentionUnavailableError, MaskPriorError
from .evaluation import render_csv, render_table, report
from .geometry import PointSet, chamfer, subsample_points, unproject
from .prior_assembly import (
    CLASS_TRANSIENT_CANDIDATE,
    assemble_priors,
    classify,
    filter_points,
    match_score,
)
from .scene_io import AttentionRepository, SceneBundle, load_scene, save_prior_masks
from .tokenizer import TokenSet, mask_for_tokens
from .vlm import (
    VLM_DISABLED_SENTINEL,
    annotate,
    build_prompt,
    parse_verdict,
    query_vlm,
    select_regions,
)
from .errors import VlmParseError

logger = logging.getLogger(__name__)


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _match_one(
    scene: SceneBundle,
    repo: AttentionRepository,
    i: int,
    mask_id: int,
    config: PipelineConfig,
) -> list[MatchRecord]:
    """All match records for one query mask: accepted, rejected, or skipped."""
    records = []
    matched_views = set()
    candidates = candidate_pairs(
        scene,
        repo,
        i,
        mask_id,
        recall_threshold=config.recall_threshold,
        occupancy_frac=config.occupancy_frac,
        max_query_tokens=config.max_query_tokens,
    )
    for j, pr, ref_mask_id in candidates:
        matched_views.add(j)
        rec = recall(pr)
        cd = _token_chamfer(scene, i, j, pr, mask_id, config)
        score = None if math.isinf(cd) else match_score(cd, config.cd_threshold)
        records.append(
            MatchRecord(
                query_view=i,
                query_mask_id=mask_id,
                ref_view=j,
                ref_mask_id=ref_mask_id,
                recall=rec,
                chamfer=cd,
                score=score,
                status="accepted" if score is not None else "rejected_cd",
            )
        )
    for j in range(scene.N):
        if j == i or j in matched_views:
            continue
        records.append(
            MatchRecord(
                query_view=i,
                query_mask_id=mask_id,
                ref_view=j,
                ref_mask_id=None,
                recall=0.0,
                chamfer=math.nan,
                score=None,
                status="rejected_recall",
            )
        )
    return records


def _token_chamfer(
    scene: SceneBundle,
    i: int,
    j: int,
    pr,
    mask_id: int,
    config: PipelineConfig,
) -> float:
    """Chamfer distance between the valid query and projected token patches.

    Returns inf when either side unprojects to nothing (all-zero depth), so
    the caller rejects the pair instead of crashing.
    """
    q_tokens = TokenSet(
        view=i,
        grid_indices=pr.valid_query_tokens,
        patch_size=scene.patch_size,
        grid_shape=scene.grid_size,
    )
    p_tokens = TokenSet(
        view=j,
        grid_indices=pr.valid_projected_tokens,
        patch_size=scene.patch_size,
        grid_shape=scene.grid_size,
    )
    P = unproject(scene.views[i], mask_for_tokens(q_tokens), source=(i, mask_id))
    Q = unproject(scene.views[j], mask_for_tokens(p_tokens), source=(j, mask_id))
    if len(P) == 0 or len(Q) == 0:
        return math.inf
    P = subsample_points(P, config.cd_max_points, _derive_seed(config.seed, i, mask_id, j, 0))
    Q = subsample_points(Q, config.cd_max_points, _derive_seed(config.seed, i, mask_id, j, 1))
    return chamfer(P, Q)


def _query_vlm_for_view(
    scene: SceneBundle,
    i: int,
    candidate_ids: list[int],
    config: PipelineConfig,
    out_dir: Path,
    session=None,
) -> dict[int, str]:
    """One request covering all of a view's large candidates; {} on parse failure."""
    masks = [scene.views[i].mask_by_id(mid) for mid in candidate_ids]
    regions = select_regions(masks, config.min_region_pixels)
    if not regions:
        return {}
    query = annotate(scene.views[i].image, regions, seed=_derive_seed(config.seed, i))
    prompt, image_png = build_prompt(query)
    audit_dir = out_dir / "vlm"
    response = query_vlm(config.vlm, prompt, image_png, audit_dir=str(audit_dir), session=session)
    if response == VLM_DISABLED_SENTINEL:
        return {}
    expected = {m.entity_id for m in regions}
    try:
        verdict = parse_verdict(response, expected)
    except VlmParseError as exc:
        logger.warning("view %d: %s; keeping candidates transient", i, exc)
        return {}
    return verdict.verdicts


def _initial_point_cloud(
    scene: SceneBundle, stride: int
) -> tuple[PointSet, np.ndarray]:
    """Dense-ish cloud from every view's depth map with (view, v, u) provenance."""
    pts_chunks, prov_chunks = [], []
    H, W = scene.image_size
    region = np.zeros((H, W), dtype=bool)
    region[stride // 2 :: stride, stride // 2 :: stride] = True
    for i, view in enumerate(scene.views):
        usable = region & (view.depth > 0)
        ps = unproject(view, usable, source=(i, "depth-grid"))
        vs, us = np.nonzero(usable)
        pts_chunks.append(ps.points)
        prov_chunks.append(
            np.stack([np.full(vs.shape, i), vs, us], axis=1)
        )
    points = np.concatenate(pts_chunks) if pts_chunks else np.zeros((0, 3))
    prov = np.concatenate(prov_chunks) if prov_chunks else np.zeros((0, 3), dtype=int)
    return PointSet(points=points, source=("depth-grid", stride)), prov


def run_pipeline(
    scene_dir: str | Path,
    out_dir: str | Path,
    config: PipelineConfig,
    vlm_session=None,
) -> dict:
    """Run the full mask-prior pipeline and write all artifacts.

    Returns the run manifest (also written as ``run_manifest.json``).
    ``vlm_session`` injects an HTTP session for testing.
    """
    config.validate()
    scene_dir = Path(scene_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    stage = "load"
    try:
        scene = load_scene(scene_dir)
        repo = AttentionRepository(scene_dir)

        stage = "attention"
        if scene.N > 1 and not repo.has_any():
            raise AttentionUnavailableError(
                "scene has no attention dumps; nothing to match"
            )

        stage = "match"
        work = [
            (i, mask.entity_id)
            for i in range(scene.N)
            for mask in scene.views[i].entity_masks
        ]
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            results = list(
                pool.map(lambda item: _match_one(scene, repo, *item, config), work)
            )
        match_records = {key: recs for key, recs in zip(work, results)}

        stage = "classify"
        classifications = {
            key: classify(recs, scene.N, config.score_frac)
            for key, recs in match_records.items()
        }

        stage = "vlm"
        verdicts: dict[int, dict[int, str]] = {}
        if config.vlm.mode != "off":
            per_view_candidates = {
                i: [
                    mask_id
                    for (vi, mask_id), (cls, _) in sorted(classifications.items())
                    if vi == i and cls == CLASS_TRANSIENT_CANDIDATE
                ]
                for i in range(scene.N)
            }
            with ThreadPoolExecutor(max_workers=config.jobs) as pool:
                vlm_results = list(
                    pool.map(
                        lambda i: _query_vlm_for_view(
                            scene, i, per_view_candidates[i], config, out_dir, vlm_session
                        ),
                        range(scene.N),
                    )
                )
            verdicts = {i: v for i, v in enumerate(vlm_results) if v}

        stage = "assemble"
        priors = assemble_priors(scene, match_records, verdicts, config.score_frac)

        stage = "points"
        cloud, provenance = _initial_point_cloud(scene, config.point_stride)
        kept = filter_points(cloud, provenance, priors)
        kept.points.astype("<f4").tofile(out_dir / "points_filtered.bin")

        stage = "save"
        save_prior_masks(out_dir / "priors", priors)
        gt_masks = _load_gt_transient(scene_dir, scene.N)
        rep = report(
            scene_name=scene_dir.name,
            priors=priors,
            gt_transient_masks=gt_masks,
            score_frac=config.score_frac,
            cd_threshold=config.cd_threshold,
        )
        (out_dir / "report.csv").write_text(render_csv(rep), encoding="utf-8")
        (out_dir / "report.txt").write_text(render_table(rep), encoding="utf-8")

        manifest = {
            "package_version": __version__,
            "scene": scene_dir.name,
            "n_views": scene.N,
            "config": config.to_dict(),
            "classifications": {
                f"{prior.view}:{entity_id}": decision.classification
                for prior in priors
                for entity_id, decision in sorted(prior.per_entity.items())
            },
            "vlm_promotions": {
                str(i): dict(sorted(v.items())) for i, v in sorted(verdicts.items())
            },
            "points_total": len(cloud),
            "points_kept": len(kept),
            "load_warnings": list(scene.load_warnings),
        }
        with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return manifest
    except Exception as exc:
        if not getattr(exc, "pipeline_stage", None):
            exc.pipeline_stage = stage  # type: ignore[attr-defined]
        raise


def _load_gt_transient(scene_dir: Path, n_views: int) -> dict[int, np.ndarray] | None:
    gt_dir = scene_dir / "gt_transient"
    if not gt_dir.is_dir():
        return None
    masks = {}
    for i in range(n_views):
        path = gt_dir / f"{i:04d}.png"
        if path.is_file():
            masks[i] = np.asarray(Image.open(path)) > 0
    return masks or None
