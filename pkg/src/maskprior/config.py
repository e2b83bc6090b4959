"""Pipeline configuration: thresholds, VLM endpoint settings, seeds.

Defaults follow the reference operating point: recall threshold 0.5,
Chamfer threshold 0.2 in the model's normalized world frame, score
threshold 0.5 x N, a 20000-pixel floor for VLM region queries, and a
500-iteration warm-up stage.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass
class VlmConfig:
    """Settings for the pluggable vision-language endpoint.

    ``mode`` is "off" (all transient candidates stay transient) or "http"
    (generic chat-completion endpoint). The auth token is read from the
    environment variable named by ``api_key_env``, never stored here.
    """

    mode: str = "off"
    url: str = ""
    model: str = ""
    api_key_env: str = "MASKPRIOR_VLM_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0

    def validate(self) -> None:
        if self.mode not in ("off", "http"):
            raise ValueError(f"vlm mode must be 'off' or 'http', got {self.mode!r}")
        if self.mode == "http" and not self.url:
            raise ValueError("vlm mode 'http' requires a url")
        if self.max_retries < 1:
            raise ValueError("vlm max_retries must be >= 1")


@dataclass
class PipelineConfig:
    """All tunables of the mask-prior pipeline, exposed 1:1 as CLI flags."""

    recall_threshold: float = 0.5
    cd_threshold: float = 0.2
    score_frac: float = 0.5
    min_region_pixels: int = 20000
    warmup_iters: int = 500
    occupancy_frac: float = 0.5
    max_query_tokens: int = 256
    cd_max_points: int = 2048
    point_stride: int = 4
    jobs: int = 4
    seed: int = 0
    vlm: VlmConfig = field(default_factory=VlmConfig)

    def validate(self) -> None:
        if not 0.0 <= self.recall_threshold <= 1.0:
            raise ValueError("recall_threshold must be in [0, 1]")
        if self.cd_threshold <= 0.0:
            raise ValueError("cd_threshold must be positive")
        if not 0.0 <= self.score_frac <= 1.0:
            raise ValueError("score_frac must be in [0, 1]")
        if self.min_region_pixels < 0:
            raise ValueError("min_region_pixels must be non-negative")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be non-negative")
        if not 0.0 < self.occupancy_frac <= 1.0:
            raise ValueError("occupancy_frac must be in (0, 1]")
        if self.max_query_tokens < 1:
            raise ValueError("max_query_tokens must be >= 1")
        if self.cd_max_points < 2:
            raise ValueError("cd_max_points must be >= 2")
        if self.point_stride < 1:
            raise ValueError("point_stride must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        self.vlm.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        vlm_data = data.pop("vlm", {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data, vlm=VlmConfig(**vlm_data))
        cfg.validate()
        return cfg


def load_config(path: str | Path | None, overrides: dict | None = None) -> PipelineConfig:
    """Build a config with precedence: overrides > config file > defaults.

    ``overrides`` maps flat field names (vlm fields prefixed ``vlm_``) to
    values; ``None`` values are ignored so unset CLI flags fall through.
    """
    data: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    cfg = PipelineConfig.from_dict(data)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.startswith("vlm_"):
            setattr(cfg.vlm, key[len("vlm_"):], value)
        else:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg
