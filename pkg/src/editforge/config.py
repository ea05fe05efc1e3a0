"""Single-document run configuration for the CLI.

One JSON file carries the model, training recipes, filter thresholds,
guidance scales, provider URLs, seeds, and file paths. Unknown keys are
rejected anywhere in the document; a short digest of the normalized
content is recorded in every run manifest so outputs are traceable to
their exact configuration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .diffusion import GuidanceScales
from .errors import ConfigError
from .filters import FilterThresholds
from .model import ModelConfig, TrainConfig

PATH_KEYS = frozenset({
    "captions", "records", "rejections", "reports", "accepted", "summary",
    "images_dir", "checkpoint_dir", "loss_csv", "input_image", "output_image",
    "visual_ref", "produced_image", "reference_image", "eval_report",
    "manifest",
})

PROVIDER_KEYS = frozenset({
    "textgen_url", "embed_url", "embed2_url", "detect_url", "vlm_url",
    "imageop_url",
})


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_stage2: TrainConfig = field(default_factory=TrainConfig)
    thresholds: FilterThresholds = field(default_factory=FilterThresholds)
    scales: GuidanceScales = field(default_factory=GuidanceScales)
    sample_steps: int = 20
    seed: int = 0
    providers: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def digest(self) -> str:
        doc = {
            "model": asdict(self.model),
            "train": asdict(self.train),
            "train_stage2": asdict(self.train_stage2),
            "thresholds": asdict(self.thresholds),
            "scales": asdict(self.scales),
            "sample_steps": self.sample_steps,
            "seed": self.seed,
            "providers": self.providers,
            "paths": self.paths,
        }
        canon = json.dumps(doc, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def path(self, key: str, required: bool = True) -> Path | None:
        if key not in PATH_KEYS:
            raise ConfigError(f"unknown path key {key!r}")
        value = self.paths.get(key)
        if value is None:
            if required:
                raise ConfigError(f"config paths.{key} is required here")
            return None
        return Path(value)


def _build_section(cls, payload: dict, section: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    try:
        obj = cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {section} section: {exc}")
    return obj


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")
    return run_config_from_dict(doc)


def run_config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    known = {"model", "train", "train_stage2", "thresholds", "scales",
             "sample_steps", "seed", "providers", "paths"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")

    cfg = RunConfig(
        model=_build_section(ModelConfig, doc.get("model", {}), "model"),
        train=_build_section(TrainConfig, doc.get("train", {}), "train"),
        train_stage2=_build_section(TrainConfig, doc.get("train_stage2", {}),
                                    "train_stage2"),
        thresholds=_build_section(FilterThresholds, doc.get("thresholds", {}),
                                  "thresholds"),
        scales=_build_section(GuidanceScales, doc.get("scales", {}), "scales"),
        sample_steps=int(doc.get("sample_steps", 20)),
        seed=int(doc.get("seed", 0)),
        providers=dict(doc.get("providers", {})),
        paths=dict(doc.get("paths", {})),
    )
    bad_paths = set(cfg.paths) - PATH_KEYS
    if bad_paths:
        raise ConfigError(f"unknown keys in paths: {sorted(bad_paths)}")
    bad_providers = set(cfg.providers) - PROVIDER_KEYS
    if bad_providers:
        raise ConfigError(f"unknown keys in providers: {sorted(bad_providers)}")
    cfg.model.validate()
    cfg.train.validate()
    cfg.train_stage2.validate()
    if not 1 <= cfg.sample_steps <= cfg.model.diffusion_steps:
        raise ConfigError(
            f"sample_steps {cfg.sample_steps} outside "
            f"1..{cfg.model.diffusion_steps}")
    return cfg
