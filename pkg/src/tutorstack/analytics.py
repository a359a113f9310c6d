"""Deterministic pedagogy analytics over aggregated telemetry.

Dead-zone detection cross-references retention drop-offs with the exercise
coverage map; archetype classification is an explainable rule cascade, not
clustering — at cohort sizes of 5 to 30, determinism beats model fit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .model import LessonModule, QuestionCategory
from .telemetry import AggregateSummary

PROXIMITY_WINDOW_S = 180


@dataclass(frozen=True)
class AnalyticsThresholds:
    """Operationalization of the qualitative behavior labels; all configurable."""

    drop_threshold: float = 0.5
    video_min: int = 500  # passive consumer floor
    chat_low: int = 5
    chat_high: int = 30
    exec_high: int = 50
    late_alpha: float = 0.33

    def to_dict(self) -> dict[str, Any]:
        return {
            "drop_threshold": self.drop_threshold,
            "video_min": self.video_min,
            "chat_low": self.chat_low,
            "chat_high": self.chat_high,
            "exec_high": self.exec_high,
            "late_alpha": self.late_alpha,
        }


@dataclass(frozen=True)
class DeadZone:
    """A retention collapse followed by lecture content no checkpoint covers."""

    module_id: int
    dropoff_at_s: int
    uncovered_from_s: int
    uncovered_concepts: tuple[str, ...]
    severity: float

    def __post_init__(self) -> None:
        if not (0 < self.severity <= 1):
            raise ValueError("severity must be in (0, 1]")
        if self.uncovered_from_s < self.dropoff_at_s - PROXIMITY_WINDOW_S:
            raise ValueError("uncovered content must be proximate to the drop-off")

    def to_dict(self) -> dict[str, Any]:
        return {
            "module_id": self.module_id,
            "dropoff_at_s": self.dropoff_at_s,
            "dropoff_at_min": self.dropoff_at_s // 60,
            "uncovered_from_s": self.uncovered_from_s,
            "uncovered_from_min": self.uncovered_from_s // 60,
            "uncovered_concepts": list(self.uncovered_concepts),
            "severity": round(self.severity, 4),
        }


ARCHETYPE_LABELS = (
    "self_directed",
    "tutor_reliant",
    "late_engager",
    "passive_consumer",
    "unclassified",
)


@dataclass(frozen=True)
class ArchetypeProfile:
    alias: str
    label: str
    evidence: Mapping[str, Any]

    def __post_init__(self) -> None:
        if self.label not in ARCHETYPE_LABELS:
            raise ValueError(f"unknown archetype label {self.label!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"alias": self.alias, "label": self.label, "evidence": dict(sorted(self.evidence.items()))}


def detect_dead_zones(
    summary: AggregateSummary,
    curriculum: Sequence[LessonModule],
    drop_threshold: float = 0.5,
) -> list[DeadZone]:
    """Find retention drop-offs whose subsequent content has no covering checkpoint.

    The drop-off is the earliest bin where retention falls below
    drop_threshold x that module's peak; a zone is emitted only when an
    uncovered concept sits at or after (drop-off - proximity window).
    """
    zones: list[DeadZone] = []
    for module in curriculum:
        agg = summary.per_module.get(module.id)
        if agg is None:
            continue
        bins = agg.video_retention
        peak = max(bins, default=0)
        if peak <= 0:
            continue
        cutoff = drop_threshold * peak
        drop_bin = next((b for b, count in enumerate(bins) if count < cutoff), None)
        if drop_bin is None:
            continue
        dropoff_at_s = drop_bin * 60
        uncovered = [
            c
            for c in module.concept_map
            if not c.covered_by_checkpoints and c.at_s >= dropoff_at_s - PROXIMITY_WINDOW_S
        ]
        if not uncovered:
            continue
        uncovered_from = min(c.at_s for c in uncovered)
        labels = tuple(c.concept for c in uncovered if c.at_s >= uncovered_from)
        prev = bins[drop_bin - 1] if drop_bin > 0 else peak
        severity = (prev - bins[drop_bin]) / peak
        zones.append(
            DeadZone(
                module_id=module.id,
                dropoff_at_s=dropoff_at_s,
                uncovered_from_s=uncovered_from,
                uncovered_concepts=labels,
                severity=severity,
            )
        )
    zones.sort(key=lambda z: (-z.severity, z.module_id))
    return zones


def _skipped_then_engaged(module_counts: Mapping[int, int]) -> bool:
    """True when some module has zero events but a later module has activity."""
    for skipped in range(1, 6):
        if module_counts.get(skipped, 0) == 0 and any(
            module_counts.get(later, 0) > 0 for later in range(skipped + 1, 6)
        ):
            return True
    return False


def classify_archetypes(
    summary: AggregateSummary,
    thresholds: AnalyticsThresholds = AnalyticsThresholds(),
) -> list[ArchetypeProfile]:
    """Label every alias via the fixed-order rule cascade; first match wins."""
    t = thresholds
    profiles: list[ArchetypeProfile] = []
    for alias in sorted(summary.per_alias):
        f = summary.per_alias[alias]
        conceptual = f.chat_category_counts.get(QuestionCategory.CONCEPTUAL_QUANTUM.value, 0)
        formalism = f.chat_category_counts.get(QuestionCategory.MATHEMATICAL_FORMALISM.value, 0)
        share = (conceptual + formalism) / f.chat_count if f.chat_count else 0.0
        skipped = _skipped_then_engaged(f.module_event_counts)
        evidence: dict[str, Any] = {
            "chat_count": f.chat_count,
            "code_exec_count": f.code_exec_count,
            "video_event_count": f.video_event_count,
            "checkpoint_attempts": f.checkpoint_attempts,
            "first_half_events": f.first_half_events,
            "second_half_events": f.second_half_events,
            "conceptual_formalism_share": round(share, 4),
            "skipped_module_then_engaged": skipped,
            "module_event_counts": {str(k): v for k, v in sorted(f.module_event_counts.items())},
            "thresholds": t.to_dict(),
        }

        if f.video_event_count >= t.video_min and f.code_exec_count == 0 and f.chat_count <= t.chat_low:
            label = "passive_consumer"
        elif f.first_half_events < t.late_alpha * f.second_half_events or skipped:
            label = "late_engager"
        elif f.chat_count >= t.chat_high and share >= 0.5:
            label = "tutor_reliant"
        elif f.code_exec_count >= t.exec_high and f.chat_count <= t.chat_low:
            label = "self_directed"
        else:
            label = "unclassified"
        profiles.append(ArchetypeProfile(alias=alias, label=label, evidence=evidence))
    return profiles


@dataclass(frozen=True)
class FailureBreakdown:
    per_module: Mapping[int, Mapping[str, int]]
    comprehension_failures: int
    conceptual_failures: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_module": {
                str(m): dict(sorted(counts.items())) for m, counts in sorted(self.per_module.items())
            },
            "comprehension_failures": self.comprehension_failures,
            "conceptual_failures": self.conceptual_failures,
        }


def failure_breakdown(summary: AggregateSummary) -> FailureBreakdown:
    """Per-module error-category counts plus the reading-vs-concept split.

    Checkpoint failures with variable-name-mismatch evidence (code ran, output
    wrong, a prompt-named identifier missing) count as comprehension issues;
    failures evidenced by runtime errors count as conceptual-or-implementation.
    """
    per_module: dict[int, dict[str, int]] = {}
    comprehension = 0
    conceptual = 0
    for mid, agg in summary.per_module.items():
        cats = {k: v for k, v in agg.code.by_category.items() if v > 0}
        if cats:
            per_module[mid] = cats
        comprehension += agg.failure_evidence_counts.get("variable_name_mismatch", 0)
        conceptual += agg.failure_evidence_counts.get("runtime_error", 0)
    return FailureBreakdown(
        per_module=per_module,
        comprehension_failures=comprehension,
        conceptual_failures=conceptual,
    )


def compute_findings(
    summary: AggregateSummary,
    curriculum: Sequence[LessonModule],
    thresholds: AnalyticsThresholds = AnalyticsThresholds(),
) -> dict[str, Any]:
    """The findings artifact consumed by the instructor agent and the CLI reporter."""
    zones = detect_dead_zones(summary, curriculum, thresholds.drop_threshold)
    archetypes = classify_archetypes(summary, thresholds)
    breakdown = failure_breakdown(summary)
    return {
        "dead_zones": [z.to_dict() for z in zones],
        "archetypes": [p.to_dict() for p in archetypes],
        "failure_breakdown": breakdown.to_dict(),
        "thresholds": thresholds.to_dict(),
    }


def findings_to_json(findings: Mapping[str, Any]) -> str:
    return json.dumps(findings, sort_keys=True, indent=2) + "\n"


def write_findings(findings: Mapping[str, Any], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(findings_to_json(findings), encoding="utf-8")
