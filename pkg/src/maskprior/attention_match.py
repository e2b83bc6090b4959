"""Attention-guided cross-view entity matching.

For a query mask's tokens in view i, the aggregated attention against view j
projects each token to its best-matching grid cell; projecting those cells
back and requiring the round trip to land inside the query mask's token set
yields a per-token validity flag. The fraction of valid tokens (recall)
separates static entities (high recall in other views) from transients.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import AttentionUnavailableError, MaskPriorError
from .scene_io import AttentionRepository, AttentionStack, SceneBundle
from .tokenizer import TokenSet, subsample_tokens, tokens_for_mask

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProjectionResult:
    """One query mask's projection into a reference view and back.

    ``projected_tokens[s]`` pairs query token s with its best cell in the
    reference view; ``reprojected_tokens`` maps each distinct projected cell
    to where it lands back in the query view; ``valid_flags[s]`` is True iff
    that round trip ends inside the query token set.
    """

    query_view: int
    reference_view: int
    query_tokens: TokenSet
    projected_tokens: tuple[tuple[tuple[int, int], tuple[int, int]], ...]
    reprojected_tokens: tuple[tuple[tuple[int, int], tuple[int, int]], ...]
    valid_flags: tuple[bool, ...]

    def __post_init__(self):
        if len(self.projected_tokens) != len(self.query_tokens):
            raise MaskPriorError("projected_tokens must cover every query token")
        if len(self.valid_flags) != len(self.projected_tokens):
            raise MaskPriorError("valid_flags length mismatch")

    @property
    def valid_query_tokens(self) -> tuple[tuple[int, int], ...]:
        return tuple(
            q for (q, _), ok in zip(self.projected_tokens, self.valid_flags) if ok
        )

    @property
    def valid_projected_tokens(self) -> tuple[tuple[int, int], ...]:
        seen = []
        for (_, p), ok in zip(self.projected_tokens, self.valid_flags):
            if ok and p not in seen:
                seen.append(p)
        return tuple(seen)


@dataclass
class MatchRecord:
    """Outcome of validating one (query mask, reference view) candidate."""

    query_view: int
    query_mask_id: int
    ref_view: int
    ref_mask_id: int | None
    recall: float
    chamfer: float
    score: float | None
    status: str  # rejected_recall | rejected_cd | accepted

    def __post_init__(self):
        if not 0.0 <= self.recall <= 1.0:
            raise MaskPriorError(f"recall {self.recall} outside [0, 1]")
        if (self.status == "accepted") != (self.score is not None):
            raise MaskPriorError("score must be present iff status is accepted")

    def to_dict(self) -> dict:
        return {
            "query_view": self.query_view,
            "query_mask_id": self.query_mask_id,
            "ref_view": self.ref_view,
            "ref_mask_id": self.ref_mask_id,
            "recall": self.recall,
            "chamfer": self.chamfer,
            "score": self.score,
            "status": self.status,
        }


def aggregate_attention(stack: AttentionStack) -> np.ndarray:
    """Average the layer dimension: S x L x h x w -> S x h x w."""
    if stack.L == 0:
        raise MaskPriorError("attention stack has zero layers")
    agg = stack.tensor.mean(axis=1)
    if not np.isfinite(agg).all():
        raise MaskPriorError("non-finite aggregated attention")
    return agg


def project_tokens(aggregated: np.ndarray) -> list[tuple[int, int]]:
    """Per query token, the (row, col) of the highest attention value.

    Ties break toward the lowest row-major flat index.
    """
    S, h, w = aggregated.shape
    flat = aggregated.reshape(S, h * w).argmax(axis=1)
    return [(int(f) // w, int(f) % w) for f in flat]


def recall(pr: ProjectionResult) -> float:
    """Fraction of projected tokens whose round trip stays inside the mask."""
    if len(pr.projected_tokens) == 0:
        raise MaskPriorError("empty token set")
    return sum(pr.valid_flags) / len(pr.valid_flags)


def query_token_set(
    scene: SceneBundle,
    i: int,
    mask_id: int,
    occupancy_frac: float = 0.5,
    max_query_tokens: int = 256,
) -> TokenSet:
    """The capped token set used as query for (view i, mask_id)."""
    mask = scene.views[i].mask_by_id(mask_id)
    tokens = tokens_for_mask(mask, scene.patch_size, occupancy_frac, view=i)
    return subsample_tokens(tokens, max_query_tokens)


def cycle_project(
    scene: SceneBundle,
    repo: AttentionRepository,
    i: int,
    mask_id: int,
    j: int,
    occupancy_frac: float = 0.5,
    max_query_tokens: int = 256,
) -> ProjectionResult:
    """Project a query mask's tokens into view j and back.

    Raises AttentionUnavailableError when either direction lacks coverage,
    so callers can skip the pair and record it.
    """
    qset = query_token_set(scene, i, mask_id, occupancy_frac, max_query_tokens)
    if len(qset) == 0:
        raise MaskPriorError("empty token set")
    forward = repo.rows(i, j, list(qset.grid_indices))
    projected = project_tokens(aggregate_attention(forward))

    needed = sorted(set(projected))
    reverse = repo.rows(j, i, needed)
    rep_targets = project_tokens(aggregate_attention(reverse))
    rep_map = dict(zip(needed, rep_targets))

    valid = tuple(rep_map[p] in qset for p in projected)
    return ProjectionResult(
        query_view=i,
        reference_view=j,
        query_tokens=qset,
        projected_tokens=tuple(zip(qset.grid_indices, projected)),
        reprojected_tokens=tuple((p, rep_map[p]) for p in needed),
        valid_flags=valid,
    )


def assign_reference_mask(
    scene: SceneBundle, j: int, pr: ProjectionResult
) -> int | None:
    """Entity mask in view j holding the plurality of valid projected centers.

    Centers falling in no mask are not counted; plurality ties break toward
    the lowest entity id; None when no mask contains any center.
    """
    p = scene.patch_size
    votes: dict[int, int] = {}
    for (_, (r, c)), ok in zip(pr.projected_tokens, pr.valid_flags):
        if not ok:
            continue
        v = r * p + p // 2
        u = c * p + p // 2
        for mask in scene.views[j].entity_masks:
            if mask.pixels[v, u]:
                votes[mask.entity_id] = votes.get(mask.entity_id, 0) + 1
                break
    if not votes:
        return None
    best = max(votes.values())
    return min(eid for eid, n in votes.items() if n == best)


def candidate_pairs(
    scene: SceneBundle,
    repo: AttentionRepository,
    i: int,
    mask_id: int,
    recall_threshold: float = 0.5,
    occupancy_frac: float = 0.5,
    max_query_tokens: int = 256,
) -> list[tuple[int, ProjectionResult, int | None]]:
    """Reference views where the query mask's recall clears the threshold.

    Inclusive comparison (recall == threshold is kept). Views with missing
    attention are skipped and logged, never fatal.
    """
    candidates = []
    for j in range(scene.N):
        if j == i:
            continue
        try:
            pr = cycle_project(
                scene, repo, i, mask_id, j, occupancy_frac, max_query_tokens
            )
        except AttentionUnavailableError as exc:
            logger.info("skipping pair (%d->%d, mask %d): %s", i, j, mask_id, exc)
            continue
        if recall(pr) >= recall_threshold:
            candidates.append((j, pr, assign_reference_mask(scene, j, pr)))
    return candidates
