"""VLM adjudication of large transient-candidate regions.

Candidates below the pixel floor are dropped outright; the rest are drawn
onto the image as colored overlays with numeric identifiers at their
centroids, packed into a single scene-agnostic prompt per view, and sent to
a generic chat-completion endpoint. Replies must follow a rigid
one-line-per-ID grammar; anything the parser cannot attribute stays
transient, so a silent or confused model can only leave candidates masked,
never unmask a distractor.
"""

import base64
import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass

import numpy as np

from .config import VlmConfig
from .errors import MaskPriorError, VlmError, VlmParseError
from .scene_io import EntityMask

logger = logging.getLogger(__name__)

VLM_DISABLED_SENTINEL = "vlm-disabled"

OVERLAY_ALPHA = 0.4

# 5x7 bitmap digits, drawn at 2x scale for the identifier labels.
_DIGITS = {
    "0": ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    "1": ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    "2": ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    "3": ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    "4": ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    "5": ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    "6": ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    "7": ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    "8": ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    "9": ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}
_GLYPH_SCALE = 2

_VERDICT_RE = re.compile(
    r"\b(?:id\s*)?(\d+)\s*[:.\-]\s*(static|transient)\b", re.IGNORECASE
)


@dataclass(frozen=True)
class RegionQuery:
    """One view's annotated image plus the regions drawn onto it."""

    view: int
    regions: tuple[tuple[int, tuple[int, int], int, tuple[int, int, int]], ...]
    annotated_image: np.ndarray


@dataclass(frozen=True)
class VlmVerdict:
    """Per-entity static/transient calls with the model's one-line rationale."""

    verdicts: dict[int, str]
    rationale: dict[int, str]


def select_regions(
    candidates: list[EntityMask], min_region_pixels: int = 20000
) -> list[EntityMask]:
    """Keep only candidates at or above the pixel floor."""
    return [m for m in candidates if m.pixel_count >= min_region_pixels]


def _seeded_palette(n: int, seed: int) -> list[tuple[int, int, int]]:
    """n visually distinct colors: evenly spaced hues, seeded shuffle."""
    rng = np.random.default_rng(seed)
    hues = (np.arange(n) / max(n, 1) + rng.uniform()) % 1.0
    rng.shuffle(hues)
    colors = []
    for h in hues:
        i = int(h * 6) % 6
        f = h * 6 - int(h * 6)
        v, p, q, t = 255, 25, int(255 * (1 - 0.9 * f)), int(255 * (1 - 0.9 * (1 - f)))
        rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
        colors.append(tuple(int(c) for c in rgb))
    return colors


def _centroid_anchor(mask: EntityMask) -> tuple[int, int]:
    """Mask centroid, nudged to the nearest interior pixel if it falls outside."""
    vs, us = np.nonzero(mask.pixels)
    cv, cu = int(round(vs.mean())), int(round(us.mean()))
    H, W = mask.pixels.shape
    cv, cu = min(max(cv, 0), H - 1), min(max(cu, 0), W - 1)
    if mask.pixels[cv, cu]:
        return cv, cu
    d2 = (vs - cv) ** 2 + (us - cu) ** 2
    best = int(np.argmin(d2))
    return int(vs[best]), int(us[best])


def _draw_label(
    image: np.ndarray, text: str, anchor: tuple[int, int], bbox: tuple[int, int, int, int]
) -> None:
    """Stamp white digit glyphs centered at anchor, clipped to the region bbox."""
    gh = 7 * _GLYPH_SCALE
    gw = (5 * _GLYPH_SCALE + _GLYPH_SCALE) * len(text) - _GLYPH_SCALE
    top = anchor[0] - gh // 2
    left = anchor[1] - gw // 2
    v0, u0, v1, u1 = bbox
    for k, ch in enumerate(text):
        rows = _DIGITS[ch]
        for r, row in enumerate(rows):
            for c, bit in enumerate(row):
                if bit != "1":
                    continue
                for dv in range(_GLYPH_SCALE):
                    for du in range(_GLYPH_SCALE):
                        v = top + r * _GLYPH_SCALE + dv
                        u = left + k * 6 * _GLYPH_SCALE + c * _GLYPH_SCALE + du
                        if v0 <= v <= v1 and u0 <= u <= u1:
                            image[v, u] = (255, 255, 255)


def annotate(image: np.ndarray, regions: list[EntityMask], seed: int = 0) -> RegionQuery:
    """Overlay each region in a seeded color and stamp its numeric identifier.

    Pixels outside the regions are untouched except for label glyphs, which
    stay inside their region's bounding box.
    """
    out = image.copy()
    palette = _seeded_palette(len(regions), seed)
    entries = []
    for mask, color in zip(regions, palette):
        pixels = mask.pixels
        blended = (
            out[pixels].astype(np.float64) * (1 - OVERLAY_ALPHA)
            + np.array(color, dtype=np.float64) * OVERLAY_ALPHA
        )
        out[pixels] = np.round(blended).astype(np.uint8)
        anchor = _centroid_anchor(mask)
        vs, us = np.nonzero(pixels)
        bbox = (int(vs.min()), int(us.min()), int(vs.max()), int(us.max()))
        _draw_label(out, str(mask.entity_id), anchor, bbox)
        entries.append((mask.entity_id, anchor, mask.pixel_count, color))
    return RegionQuery(view=0, regions=tuple(entries), annotated_image=out)


def build_prompt(query: RegionQuery) -> tuple[str, bytes]:
    """Scene-agnostic prompt text plus the annotated image as PNG bytes.

    The template never names scene content; it only references the numeric
    identifiers stamped on the image and demands a strict per-ID verdict
    block before any free-form analysis.
    """
    if not query.regions:
        raise MaskPriorError("build_prompt requires at least one region")
    ids = [str(entity_id) for entity_id, _, _, _ in query.regions]
    lines = [
        "You are analyzing one photograph from a multi-view capture of a scene.",
        "Several regions are highlighted with colored overlays, each marked by a",
        "white numeric identifier at its center.",
        "",
        "For each identifier listed below, decide whether the highlighted region",
        "is static scene structure (permanent: walls, floor, sky, furniture that",
        "belongs to the scene) or a transient/movable occluder (temporary: a",
        "person, vehicle, or object that could be absent in another capture).",
        "",
        f"Identifiers to classify: {', '.join(ids)}",
        "",
        "Answer FIRST with one line per identifier, exactly in this form:",
        "ID: static|transient - reason",
        "",
        "After those lines, add a brief analysis of your reasoning.",
    ]
    text = "\n".join(lines)

    from io import BytesIO

    from PIL import Image

    buf = BytesIO()
    Image.fromarray(query.annotated_image).save(buf, format="PNG")
    return text, buf.getvalue()


def query_vlm(
    config: VlmConfig,
    prompt: str,
    image_png: bytes,
    audit_dir: "str | None" = None,
    session=None,
) -> str:
    """Send one chat-completion request and return the raw response text.

    Retries up to ``config.max_retries`` times with exponential backoff on
    network errors and 5xx statuses; 4xx fails immediately. With mode "off"
    no request is made and the disabled sentinel is returned. Requests and
    responses are audit-logged with the auth header redacted.
    """
    if config.mode == "off":
        return VLM_DISABLED_SENTINEL
    if session is None:
        import requests

        session = requests.Session()

    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(config.api_key_env, "")
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    payload = {
        "model": config.model,
        "messages": [
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {
                        "type": "image_url",
                        "image_url": {
                            "url": "data:image/png;base64,"
                            + base64.b64encode(image_png).decode("ascii")
                        },
                    },
                ],
            }
        ],
    }

    last_status = None
    last_error = ""
    for attempt in range(config.max_retries):
        if attempt:
            time.sleep(config.backoff * (2 ** (attempt - 1)))
        try:
            response = session.post(
                config.url, json=payload, headers=headers, timeout=config.timeout
            )
        except Exception as exc:  # connection errors, timeouts
            last_error = str(exc)
            logger.warning("VLM request failed (attempt %d): %s", attempt + 1, exc)
            continue
        last_status = response.status_code
        if 200 <= response.status_code < 300:
            body = response.json()
            text = body["choices"][0]["message"]["content"]
            _audit(audit_dir, config, prompt, image_png, response.status_code, text)
            return text
        if 400 <= response.status_code < 500:
            _audit(audit_dir, config, prompt, image_png, response.status_code, response.text)
            raise VlmError(
                f"VLM endpoint rejected request: HTTP {response.status_code}",
                status=response.status_code,
            )
        logger.warning(
            "VLM request got HTTP %d (attempt %d)", response.status_code, attempt + 1
        )
    _audit(audit_dir, config, prompt, image_png, last_status, last_error)
    raise VlmError(
        f"VLM request failed after {config.max_retries} attempts"
        + (f": HTTP {last_status}" if last_status else f": {last_error}"),
        status=last_status,
    )


def _audit(
    audit_dir, config: VlmConfig, prompt: str, image_png: bytes, status, response_text
) -> None:
    if audit_dir is None:
        return
    from pathlib import Path

    path = Path(audit_dir)
    path.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256(image_png).hexdigest()
    record = {
        "url": config.url,
        "model": config.model,
        "prompt": prompt,
        "image_sha256": digest,
        "status": status,
        "response": response_text,
    }
    with open(path / f"vlm_{digest[:12]}.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def parse_verdict(response: str, expected_ids: "set[int]") -> VlmVerdict:
    """Extract per-ID verdicts from a response, defaulting silence to transient.

    Lines matching ``ID: static|transient`` are accepted case-insensitively
    anywhere in the text; for a repeated ID the first occurrence wins. IDs the
    model never mentions stay transient (missing evidence never unmasks), and
    IDs outside ``expected_ids`` are ignored with a warning.
    """
    verdicts: dict[int, str] = {}
    rationale: dict[int, str] = {}
    found_any = False
    for match in _VERDICT_RE.finditer(response):
        found_any = True
        entity_id = int(match.group(1))
        if entity_id not in expected_ids:
            logger.warning("VLM verdict for unexpected id %d ignored", entity_id)
            continue
        if entity_id in verdicts:
            continue
        verdicts[entity_id] = match.group(2).lower()
        rest = response[match.end() :].splitlines()[0] if match.end() < len(response) else ""
        rationale[entity_id] = rest.strip(" -—:\t")
    if not found_any:
        raise VlmParseError("no parsable verdict lines in VLM response")
    for entity_id in expected_ids:
        if entity_id not in verdicts:
            verdicts[entity_id] = "transient"
            rationale[entity_id] = "no verdict returned; kept transient"
    return VlmVerdict(verdicts=verdicts, rationale=rationale)
