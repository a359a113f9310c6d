"""Shared domain vocabulary: sessions, curriculum, checkpoints, queries, events.

Every type here is an immutable value object; instances are safe to share
across threads. The canonical wire form is JSON with snake_case keys,
integer-millisecond timestamps, and lowercase-string enums.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence


class ErrorCategory(str, Enum):
    API_MISUSE = "api_misuse"
    DEPRECATED_API = "deprecated_api"
    MISSING_DEPENDENCY = "missing_dependency"
    MATHEMATICAL = "mathematical"
    SYNTAX = "syntax"
    TIMEOUT = "timeout"
    OTHER = "other"


class QuestionCategory(str, Enum):
    STUDY_STRATEGIES = "study_strategies"
    CONCEPTUAL_QUANTUM = "conceptual_quantum"
    MATHEMATICAL_FORMALISM = "mathematical_formalism"
    IMPLEMENTATION = "implementation"
    SOCIAL_EXPLORATORY = "social_exploratory"
    VIDEO_REFERENCE = "video_reference"
    CROSS_LESSON_SYNTHESIS = "cross_lesson_synthesis"


class EventCategory(str, Enum):
    VIDEO_PLAYBACK = "video_playback"
    CODE_EXECUTION = "code_execution"
    CHAT_MESSAGE = "chat_message"
    CHECKPOINT_SUBMISSION = "checkpoint_submission"
    SESSION_MANAGEMENT = "session_management"


class VideoAction(str, Enum):
    SEEK = "seek"
    PLAY = "play"
    PAUSE = "pause"
    STOP = "stop"


class SessionAction(str, Enum):
    START = "start"
    END = "end"


class FailureEvidence(str, Enum):
    """What a failed checkpoint submission looked like to the grader."""

    VARIABLE_NAME_MISMATCH = "variable_name_mismatch"
    RUNTIME_ERROR = "runtime_error"
    OTHER = "other"


MODULE_IDS = (1, 2, 3, 4, 5)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValueError(message)


@dataclass(frozen=True)
class StudentAlias:
    """Opaque anonymized student token; never a raw identifier."""

    value: str

    def __post_init__(self) -> None:
        _require(bool(self.value), "alias must be non-empty")


@dataclass(frozen=True)
class Session:
    id: str
    alias: StudentAlias
    module_id: int
    started_at: int
    last_active_at: int
    history: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        _require(self.module_id in MODULE_IDS, f"module_id {self.module_id} out of range")
        _require(self.last_active_at >= self.started_at, "last_active_at before started_at")
        for i, (role, _text) in enumerate(self.history):
            expected = "student" if i % 2 == 0 else "tutor"
            _require(role == expected, f"history turn {i} has role {role!r}, expected {expected!r}")

    def with_exchange(self, student_text: str, tutor_text: str, at: int) -> "Session":
        """Return a copy with one student/tutor exchange appended."""
        return Session(
            id=self.id,
            alias=self.alias,
            module_id=self.module_id,
            started_at=self.started_at,
            last_active_at=max(at, self.started_at),
            history=self.history + (("student", student_text), ("tutor", tutor_text)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "alias": self.alias.value,
            "module_id": self.module_id,
            "started_at": self.started_at,
            "last_active_at": self.last_active_at,
            "history": [[role, text] for role, text in self.history],
        }

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "Session":
        return Session(
            id=d["id"],
            alias=StudentAlias(d["alias"]),
            module_id=int(d["module_id"]),
            started_at=int(d["started_at"]),
            last_active_at=int(d["last_active_at"]),
            history=tuple((role, text) for role, text in d.get("history", [])),
        )


@dataclass(frozen=True)
class TimestampedConcept:
    at_s: int
    concept: str
    covered_by_checkpoints: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "at_s": self.at_s,
            "concept": self.concept,
            "covered_by_checkpoints": list(self.covered_by_checkpoints),
        }

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "TimestampedConcept":
        return TimestampedConcept(
            at_s=int(d["at_s"]),
            concept=d["concept"],
            covered_by_checkpoints=tuple(d.get("covered_by_checkpoints", [])),
        )


@dataclass(frozen=True)
class KnownError:
    """One diagnosable failure mode: a regex over error text plus a hint."""

    pattern: str
    category: ErrorCategory
    hint: str

    def matches(self, text: str) -> bool:
        return re.search(self.pattern, text) is not None

    def to_dict(self) -> dict[str, Any]:
        return {"pattern": self.pattern, "category": self.category.value, "hint": self.hint}

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "KnownError":
        return KnownError(
            pattern=d["pattern"],
            category=ErrorCategory(d["category"]),
            hint=d["hint"],
        )


@dataclass(frozen=True)
class ExactOutput:
    expected: str

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "exact", "expected": self.expected}


@dataclass(frozen=True)
class NumericOutput:
    expected: float
    tolerance: float

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "numeric", "expected": self.expected, "tolerance": self.tolerance}


@dataclass(frozen=True)
class HistogramOutput:
    """Expected measurement-count distribution with a per-outcome absolute tolerance."""

    expected: tuple[tuple[str, int], ...]
    tol_abs: int

    @staticmethod
    def from_counts(counts: Mapping[str, int], tol_abs: int) -> "HistogramOutput":
        return HistogramOutput(tuple(sorted(counts.items())), tol_abs)

    @property
    def counts(self) -> dict[str, int]:
        return dict(self.expected)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "histogram", "expected": dict(self.expected), "tol_abs": self.tol_abs}


OutputSpec = ExactOutput | NumericOutput | HistogramOutput


def output_spec_from_dict(d: Mapping[str, Any]) -> OutputSpec:
    kind = d.get("kind")
    if kind == "exact":
        return ExactOutput(expected=d["expected"])
    if kind == "numeric":
        return NumericOutput(expected=float(d["expected"]), tolerance=float(d["tolerance"]))
    if kind == "histogram":
        return HistogramOutput.from_counts(
            {str(k): int(v) for k, v in d["expected"].items()}, int(d["tol_abs"])
        )
    raise ValueError(f"unknown output spec kind {kind!r}")


@dataclass(frozen=True)
class Checkpoint:
    id: str
    module_id: int
    prompt: str
    autograde_instructions: str
    guidance_instructions: str
    debug_catalog: tuple[KnownError, ...]
    expected_output: OutputSpec
    approach_criteria: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "module_id": self.module_id,
            "prompt": self.prompt,
            "autograde_instructions": self.autograde_instructions,
            "guidance_instructions": self.guidance_instructions,
            "debug_catalog": [e.to_dict() for e in self.debug_catalog],
            "expected_output": self.expected_output.to_dict(),
            "approach_criteria": list(self.approach_criteria),
        }

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "Checkpoint":
        return Checkpoint(
            id=d["id"],
            module_id=int(d["module_id"]),
            prompt=d["prompt"],
            autograde_instructions=d["autograde_instructions"],
            guidance_instructions=d["guidance_instructions"],
            debug_catalog=tuple(KnownError.from_dict(e) for e in d.get("debug_catalog", [])),
            expected_output=output_spec_from_dict(d["expected_output"]),
            approach_criteria=tuple(d.get("approach_criteria", [])),
        )


@dataclass(frozen=True)
class LessonModule:
    id: int
    title: str
    video_length_s: int
    concept_map: tuple[TimestampedConcept, ...]
    checkpoints: tuple[Checkpoint, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "title": self.title,
            "video_length_s": self.video_length_s,
            "concept_map": [c.to_dict() for c in self.concept_map],
            "checkpoints": [c.to_dict() for c in self.checkpoints],
        }

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "LessonModule":
        return LessonModule(
            id=int(d["id"]),
            title=d["title"],
            video_length_s=int(d["video_length_s"]),
            concept_map=tuple(TimestampedConcept.from_dict(c) for c in d.get("concept_map", [])),
            checkpoints=tuple(Checkpoint.from_dict(c) for c in d.get("checkpoints", [])),
        )


@dataclass(frozen=True)
class StudentQuery:
    session_id: str
    text: str
    code_context: str | None = None
    execution_error: str | None = None
    video_position_s: int | None = None

    def __post_init__(self) -> None:
        _require(bool(self.text), "query text must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "text": self.text,
            "code_context": self.code_context,
            "execution_error": self.execution_error,
            "video_position_s": self.video_position_s,
        }

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "StudentQuery":
        return StudentQuery(
            session_id=d["session_id"],
            text=d["text"],
            code_context=d.get("code_context"),
            execution_error=d.get("execution_error"),
            video_position_s=d.get("video_position_s"),
        )


@dataclass(frozen=True)
class ExecutionResult:
    """Outcome of one sandboxed run; error_category present iff the run failed."""

    stdout: str
    stderr: str
    exit_ok: bool
    error_category: ErrorCategory | None = None
    duration_ms: int = 0

    def __post_init__(self) -> None:
        _require(
            (self.error_category is not None) == (not self.exit_ok),
            "error_category must be present exactly when exit_ok is false",
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "stdout": self.stdout,
            "stderr": self.stderr,
            "exit_ok": self.exit_ok,
            "error_category": self.error_category.value if self.error_category else None,
            "duration_ms": self.duration_ms,
        }

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "ExecutionResult":
        cat = d.get("error_category")
        return ExecutionResult(
            stdout=d.get("stdout", ""),
            stderr=d.get("stderr", ""),
            exit_ok=bool(d["exit_ok"]),
            error_category=ErrorCategory(cat) if cat else None,
            duration_ms=int(d.get("duration_ms", 0)),
        )


# Telemetry payloads: one shape per event category (tagged union).


@dataclass(frozen=True)
class VideoPayload:
    position_s: int
    action: VideoAction

    def to_dict(self) -> dict[str, Any]:
        return {"position_s": self.position_s, "action": self.action.value}

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "VideoPayload":
        return VideoPayload(position_s=int(d["position_s"]), action=VideoAction(d["action"]))


@dataclass(frozen=True)
class CodePayload:
    success: bool
    error_category: ErrorCategory | None = None

    def __post_init__(self) -> None:
        _require(
            (self.error_category is not None) == (not self.success),
            "code payload error_category must be present exactly when success is false",
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "success": self.success,
            "error_category": self.error_category.value if self.error_category else None,
        }

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "CodePayload":
        cat = d.get("error_category")
        return CodePayload(success=bool(d["success"]), error_category=ErrorCategory(cat) if cat else None)


@dataclass(frozen=True)
class ChatPayload:
    question_category: QuestionCategory

    def to_dict(self) -> dict[str, Any]:
        return {"question_category": self.question_category.value}

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "ChatPayload":
        return ChatPayload(question_category=QuestionCategory(d["question_category"]))


@dataclass(frozen=True)
class CheckpointPayload:
    checkpoint_id: str
    passed: bool
    failure_evidence: FailureEvidence | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"checkpoint_id": self.checkpoint_id, "pass": self.passed}
        if self.failure_evidence is not None:
            d["failure_evidence"] = self.failure_evidence.value
        return d

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "CheckpointPayload":
        ev = d.get("failure_evidence")
        return CheckpointPayload(
            checkpoint_id=d["checkpoint_id"],
            passed=bool(d["pass"]),
            failure_evidence=FailureEvidence(ev) if ev else None,
        )


@dataclass(frozen=True)
class SessionPayload:
    action: SessionAction

    def to_dict(self) -> dict[str, Any]:
        return {"action": self.action.value}

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "SessionPayload":
        return SessionPayload(action=SessionAction(d["action"]))


Payload = VideoPayload | CodePayload | ChatPayload | CheckpointPayload | SessionPayload

PAYLOAD_TYPES: dict[EventCategory, type] = {
    EventCategory.VIDEO_PLAYBACK: VideoPayload,
    EventCategory.CODE_EXECUTION: CodePayload,
    EventCategory.CHAT_MESSAGE: ChatPayload,
    EventCategory.CHECKPOINT_SUBMISSION: CheckpointPayload,
    EventCategory.SESSION_MANAGEMENT: SessionPayload,
}


@dataclass(frozen=True)
class TelemetryEvent:
    """One interaction event; payload shape is fixed by the category."""

    event_id: str
    alias: StudentAlias
    category: EventCategory
    module_id: int
    at: int
    payload: Payload

    def __post_init__(self) -> None:
        _require(bool(self.event_id), "event_id must be non-empty")
        _require(self.module_id in MODULE_IDS, f"module_id {self.module_id} out of range")
        expected = PAYLOAD_TYPES[self.category]
        _require(
            type(self.payload) is expected,
            f"payload {type(self.payload).__name__} does not match category {self.category.value}",
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "alias": self.alias.value,
            "category": self.category.value,
            "module_id": self.module_id,
            "at": self.at,
            "payload": self.payload.to_dict(),
        }

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "TelemetryEvent":
        category = EventCategory(d["category"])
        payload = PAYLOAD_TYPES[category].from_dict(d["payload"])
        return TelemetryEvent(
            event_id=d["event_id"],
            alias=StudentAlias(d["alias"]),
            category=category,
            module_id=int(d["module_id"]),
            at=int(d["at"]),
            payload=payload,
        )


def event_to_json(event: TelemetryEvent) -> str:
    return json.dumps(event.to_dict(), sort_keys=True, separators=(",", ":"))


def event_from_json(line: str) -> TelemetryEvent:
    return TelemetryEvent.from_dict(json.loads(line))


def validate_curriculum(curriculum: Sequence[LessonModule]) -> list[str]:
    """Collect every invariant violation; an empty list means the curriculum is valid."""
    violations: list[str] = []
    seen_modules: set[int] = set()
    seen_checkpoints: set[str] = set()

    for module in curriculum:
        mid = module.id
        if mid in seen_modules:
            violations.append(f"module {mid}: duplicate module id")
        seen_modules.add(mid)
        if mid not in MODULE_IDS:
            violations.append(f"module {mid}: id outside 1..5")
        if not module.title:
            violations.append(f"module {mid}: empty title")
        if module.video_length_s <= 0:
            violations.append(f"module {mid}: non-positive video length")

        checkpoint_ids = {c.id for c in module.checkpoints}
        prev_at = -1
        for concept in module.concept_map:
            if not (0 <= concept.at_s < module.video_length_s):
                violations.append(
                    f"module {mid}: concept {concept.concept!r} at {concept.at_s}s "
                    f"outside [0, {module.video_length_s})"
                )
            if concept.at_s <= prev_at:
                violations.append(
                    f"module {mid}: concept map not strictly increasing at {concept.at_s}s"
                )
            prev_at = concept.at_s
            for cp_id in concept.covered_by_checkpoints:
                if cp_id not in checkpoint_ids:
                    violations.append(
                        f"module {mid}: concept {concept.concept!r} references unknown checkpoint {cp_id!r}"
                    )

        for cp in module.checkpoints:
            if cp.id in seen_checkpoints:
                violations.append(f"checkpoint {cp.id}: duplicate checkpoint id")
            seen_checkpoints.add(cp.id)
            if cp.module_id != mid:
                violations.append(f"checkpoint {cp.id}: module_id {cp.module_id} != containing module {mid}")
            if not cp.prompt:
                violations.append(f"checkpoint {cp.id}: empty prompt")
            for name, text in (
                ("autograde_instructions", cp.autograde_instructions),
                ("guidance_instructions", cp.guidance_instructions),
            ):
                if not text:
                    violations.append(f"checkpoint {cp.id}: triple-instruction violation, empty {name}")
            if not cp.debug_catalog:
                violations.append(f"checkpoint {cp.id}: triple-instruction violation, empty debug catalog")
            for err in cp.debug_catalog:
                try:
                    re.compile(err.pattern)
                except re.error as exc:
                    violations.append(f"checkpoint {cp.id}: debug pattern {err.pattern!r} does not compile ({exc})")
            spec = cp.expected_output
            if isinstance(spec, NumericOutput) and spec.tolerance < 0:
                violations.append(f"checkpoint {cp.id}: negative numeric tolerance")
            if isinstance(spec, HistogramOutput):
                if spec.tol_abs < 0:
                    violations.append(f"checkpoint {cp.id}: negative histogram tolerance")
                if any(v < 0 for _, v in spec.expected):
                    violations.append(f"checkpoint {cp.id}: negative histogram count")

    return violations


def question_category_distribution(
    events: Iterable[TelemetryEvent],
) -> dict[QuestionCategory, tuple[int, int]]:
    """Count chat events per question category; percents are round(100*count/total)."""
    counts: dict[QuestionCategory, int] = {}
    for event in events:
        if event.category is not EventCategory.CHAT_MESSAGE:
            continue
        assert isinstance(event.payload, ChatPayload)
        cat = event.payload.question_category
        counts[cat] = counts.get(cat, 0) + 1
    total = sum(counts.values())
    if total == 0:
        return {}
    return {cat: (n, round(100 * n / total)) for cat, n in counts.items()}


def curriculum_to_json(curriculum: Sequence[LessonModule]) -> str:
    return json.dumps([m.to_dict() for m in curriculum], indent=2, sort_keys=True) + "\n"


def curriculum_from_json(text: str) -> list[LessonModule]:
    return [LessonModule.from_dict(d) for d in json.loads(text)]


def load_curriculum(path: str | Path) -> list[LessonModule]:
    return curriculum_from_json(Path(path).read_text())


def fixture_path(name: str) -> Path:
    """Path to a packaged fixture file (curriculum, pilot log, provider scripts)."""
    return Path(str(resources.files("tutorstack").joinpath("fixtures", name)))


def default_curriculum() -> list[LessonModule]:
    return load_curriculum(fixture_path("curriculum.json"))
