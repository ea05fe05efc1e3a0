"""Two-step data quality gauntlet: instruction/image pre-filter, then the
metric battery over pluggable embedding providers.

All similarity scores are cosines in [-1, 1]; pixel distance is a mean
absolute difference in [0, 1]. Thresholds are configuration (surfaced in
every report), not ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tasks
from .errors import ContractError, ProviderError, ShapeError
from .instructions import EditRecord, VerbConstraintSet, validate_instruction


@dataclass
class EmbeddingVector:
    values: np.ndarray
    provider: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size == 0:
            raise ShapeError(f"embedding must be a nonempty vector, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("embedding contains non-finite values")

    @property
    def width(self) -> int:
        return self.values.size


class Similarity(NamedTuple):
    """A cosine score plus a flag for degenerate (near-zero-norm) inputs."""

    value: float
    degenerate: bool


@dataclass
class FilterThresholds:
    min_clip_out: float = 0.20
    min_clip_im: float = 0.70
    max_l1: float = 0.30
    min_dino: float = 0.50
    min_directional: float = 0.05
    min_aesthetic: float = 4.0
    min_resolution: int = 256
    aspect_ratio_band: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self):
        for v in (self.min_clip_out, self.min_clip_im, self.min_dino,
                  self.min_directional):
            if not -1.0 <= v <= 1.0:
                raise ContractError(f"similarity threshold {v} outside [-1, 1]")
        if not 0.0 <= self.max_l1 <= 1.0:
            raise ContractError(f"max_l1 {self.max_l1} outside [0, 1]")


@dataclass
class FilterReport:
    """Per-record metric values, per-gate outcomes, and a final verdict.

    verdict is "pass" iff every enabled gate passed, "fail" when at least
    one gate failed, and "incomplete" when a provider failure withheld a
    metric (distinct from fail).
    """

    metrics: dict[str, float] = field(default_factory=dict)
    gates: dict[str, bool] = field(default_factory=dict)
    flags: dict[str, bool] = field(default_factory=dict)
    reasons: list[str] = field(default_factory=list)
    verdict: str = "incomplete"
    thresholds: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metrics": {k: self.metrics[k] for k in sorted(self.metrics)},
            "gates": {k: self.gates[k] for k in sorted(self.gates)},
            "flags": {k: self.flags[k] for k in sorted(self.flags)},
            "reasons": list(self.reasons),
            "verdict": self.verdict,
            "thresholds": {k: self.thresholds[k] for k in sorted(self.thresholds)},
        }


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> Similarity:
    """Cosine similarity; near-zero norms yield 0 with the degenerate flag."""
    if a.width != b.width:
        raise ShapeError(f"embedding widths differ: {a.width} vs {b.width}")
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na < 1e-12 or nb < 1e-12:
        return Similarity(0.0, True)
    return Similarity(float(a.values @ b.values / (na * nb)), False)


def _require_same_provider(*vectors: EmbeddingVector) -> None:
    providers = {v.provider for v in vectors}
    if len(providers) != 1:
        raise ContractError(f"mixed embedding providers: {sorted(providers)}")


def clip_text_alignment(e_edited_image: EmbeddingVector,
                        e_output_caption: EmbeddingVector) -> Similarity:
    """Edited image vs output caption, in one joint-embedding space."""
    _require_same_provider(e_edited_image, e_output_caption)
    return cosine(e_edited_image, e_output_caption)


def clip_image_similarity(e_original: EmbeddingVector,
                          e_edited: EmbeddingVector) -> Similarity:
    """Original vs edited image, same provider."""
    _require_same_provider(e_original, e_edited)
    return cosine(e_original, e_edited)


def l1_distance(original: np.ndarray, edited: np.ndarray) -> float:
    """Mean absolute per-channel difference of [0, 1] images."""
    if original.shape != edited.shape:
        raise ShapeError(f"image shapes differ: {original.shape} vs {edited.shape}")
    return float(np.abs(original - edited).mean())


def directional_similarity(e_io: EmbeddingVector, e_ie: EmbeddingVector,
                           e_to: EmbeddingVector, e_te: EmbeddingVector
                           ) -> Similarity:
    """Cosine between the image-embedding delta and the caption delta.

    A no-op edit has zero deltas and scores 0 with the degenerate flag.
    """
    _require_same_provider(e_io, e_ie, e_to, e_te)
    img_delta = EmbeddingVector(e_ie.values - e_io.values, e_io.provider)
    txt_delta = EmbeddingVector(e_te.values - e_to.values, e_to.provider)
    return cosine(img_delta, txt_delta)


def pre_filter(record: EditRecord, image_meta: dict,
               thresholds: FilterThresholds | None = None,
               constraints: VerbConstraintSet | None = None
               ) -> tuple[bool, list[str]]:
    """Instruction heuristics plus image gates (resolution, aspect ratio,
    aesthetic score from metadata). Verdicts, never exceptions."""
    thresholds = thresholds or FilterThresholds()
    reasons = [f"instruction:{v}" for v in validate_instruction(record, constraints)]

    width = int(image_meta.get("width", 0))
    height = int(image_meta.get("height", 0))
    if min(width, height) < thresholds.min_resolution:
        reasons.append(f"image:resolution {width}x{height}")
    if height > 0:
        ratio = width / height
        lo, hi = thresholds.aspect_ratio_band
        if not lo <= ratio <= hi:
            reasons.append(f"image:aspect-ratio {ratio:.3f}")
    aesthetic = image_meta.get("aesthetic")
    if aesthetic is not None and float(aesthetic) < thresholds.min_aesthetic:
        reasons.append(f"image:aesthetic {float(aesthetic):.2f}")
    return (not reasons, reasons)


def run_gauntlet(record: EditRecord, original: np.ndarray, edited: np.ndarray,
                 original_png: bytes, edited_png: bytes, clients,
                 thresholds: FilterThresholds | None = None) -> FilterReport:
    """Compute the full metric battery and gate it.

    ``clients`` must expose ``embed`` (joint text/image provider),
    ``embed2`` (second image-similarity provider) and optionally
    ``detect`` / ``vlm`` verifier hooks. Inputs are never mutated; a
    provider transport failure marks the report incomplete instead of
    failing it.
    """
    thresholds = thresholds or FilterThresholds()
    report = FilterReport(thresholds={
        "min_clip_out": thresholds.min_clip_out,
        "min_clip_im": thresholds.min_clip_im,
        "max_l1": thresholds.max_l1,
        "min_dino": thresholds.min_dino,
        "min_directional": thresholds.min_directional,
    })
    try:
        e_io = clients.embed.embed_image(original_png)
        e_ie = clients.embed.embed_image(edited_png)
        e_to = clients.embed.embed_text(record.input)
        e_te = clients.embed.embed_text(record.output)
        d_io = clients.embed2.embed_image(original_png)
        d_ie = clients.embed2.embed_image(edited_png)
    except ProviderError as exc:
        report.reasons.append(f"provider:{exc}")
        report.verdict = "incomplete"
        return report

    clip_im = clip_image_similarity(e_io, e_ie)
    clip_out = clip_text_alignment(e_ie, e_te)
    dino = clip_image_similarity(d_io, d_ie)
    direction = directional_similarity(e_io, e_ie, e_to, e_te)
    l1 = l1_distance(original, edited)

    report.metrics = {
        "clip_im": clip_im.value,
        "clip_out": clip_out.value,
        "l1": l1,
        "dino": dino.value,
        "directional": direction.value,
    }
    report.flags = {
        "directional_degenerate": direction.degenerate,
    }
    report.gates = {
        "clip_im": clip_im.value >= thresholds.min_clip_im,
        "clip_out": clip_out.value >= thresholds.min_clip_out,
        "l1": l1 <= thresholds.max_l1,
        "dino": dino.value >= thresholds.min_dino,
        "directional": direction.value >= thresholds.min_directional,
    }

    category = tasks.TASK_CATEGORY[record.edit_type]
    detect = getattr(clients, "detect", None)
    if detect is not None and category == "local":
        try:
            present = detect.detect(record.edited_object, edited_png)
        except ProviderError as exc:
            report.reasons.append(f"provider:{exc}")
            report.verdict = "incomplete"
            return report
        report.gates["detector"] = bool(present)
    vlm = getattr(clients, "vlm", None)
    if vlm is not None and category == "global":
        try:
            changed = vlm.confirm_change(record.edit, original_png, edited_png)
        except ProviderError as exc:
            report.reasons.append(f"provider:{exc}")
            report.verdict = "incomplete"
            return report
        report.gates["vlm"] = bool(changed)

    for gate, ok in sorted(report.gates.items()):
        if not ok:
            report.reasons.append(f"gate:{gate}")
    report.verdict = "pass" if all(report.gates.values()) else "fail"
    return report


def merge_summaries(a: dict, b: dict) -> dict:
    """Associative, commutative merge of batch summaries."""
    out = {
        "total": a.get("total", 0) + b.get("total", 0),
        "pass": a.get("pass", 0) + b.get("pass", 0),
        "fail": a.get("fail", 0) + b.get("fail", 0),
        "incomplete": a.get("incomplete", 0) + b.get("incomplete", 0),
        "reasons": dict(a.get("reasons", {})),
    }
    for reason, count in b.get("reasons", {}).items():
        out["reasons"][reason] = out["reasons"].get(reason, 0) + count
    out["reasons"] = {k: out["reasons"][k] for k in sorted(out["reasons"])}
    return out


def summarize(reports: list[FilterReport]) -> dict:
    summary = {"total": 0, "pass": 0, "fail": 0, "incomplete": 0, "reasons": {}}
    for r in reports:
        summary = merge_summaries(summary, {
            "total": 1,
            r.verdict: 1,
            "reasons": {reason: 1 for reason in r.reasons},
        })
    return summary
