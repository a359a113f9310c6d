"""Parallel specialist teaching: fan a student query out to the video,
guidance, and code specialists, then synthesize their reports.

Synthesis is deterministic: low-confidence and not-applicable reports are
dropped, the rest are ordered code > guidance > video regardless of arrival
order or confidence, and exactly one synthesizer call rewrites (never
reorders) the retained sections. A failed specialist degrades to a dropped
report; it never fails the request. Telemetry emission is fire-and-forget.
"""

from __future__ import annotations

import logging
import re
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence

from .model import (
    ChatPayload,
    EventCategory,
    KnownError,
    LessonModule,
    QuestionCategory,
    Session,
    StudentAlias,
    StudentQuery,
    TelemetryEvent,
    TimestampedConcept,
)
from .providers import ModelRequest, Provider, ProviderError

log = logging.getLogger(__name__)


class AgentKind(str, Enum):
    VIDEO = "video"
    GUIDANCE = "guidance"
    CODE = "code"
    SYNTHESIZER = "synthesizer"


class Relevance(str, Enum):
    PRIMARY = "primary"
    SUPPORTING = "supporting"
    NOT_APPLICABLE = "not_applicable"


SPECIALIST_KINDS = (AgentKind.VIDEO, AgentKind.GUIDANCE, AgentKind.CODE)

# Priority hierarchy: code errors first, then conceptual gaps, then video references.
SECTION_PRIORITY = (AgentKind.CODE, AgentKind.GUIDANCE, AgentKind.VIDEO)

GUIDANCE_AUDIENCE_DIRECTIVE = (
    "These are graduate students. Engage with the mathematics; do not oversimplify."
)

DEGRADED_PREFIX = "degraded: "


class SessionNotFound(Exception):
    pass


class AllSpecialistsFailed(Exception):
    """Every specialist was dropped; no degraded reply is possible."""

    def __init__(self, dropped: Sequence[tuple[str, str]]):
        self.dropped = list(dropped)
        super().__init__(
            "Sorry - none of the teaching specialists could help with this question "
            "right now. Please try again in a moment."
        )


@dataclass(frozen=True)
class SpecialistReport:
    kind: AgentKind
    confidence: float
    content: str
    references: tuple[Any, ...] = ()
    relevance: Relevance = Relevance.PRIMARY

    def __post_init__(self) -> None:
        if self.kind is AgentKind.SYNTHESIZER:
            raise ValueError("synthesizer does not produce specialist reports")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError("confidence must be in [0, 1]")


@dataclass(frozen=True)
class SynthesizedResponse:
    sections: tuple[tuple[AgentKind, str], ...]
    cited_timestamps: tuple[int, ...] = ()
    dropped_reports: tuple[tuple[str, str], ...] = ()

    def text(self) -> str:
        return "\n\n".join(body for _, body in self.sections)

    def to_dict(self) -> dict[str, Any]:
        return {
            "sections": [[kind.value, body] for kind, body in self.sections],
            "cited_timestamps": list(self.cited_timestamps),
            "dropped_reports": [[kind, reason] for kind, reason in self.dropped_reports],
        }


@dataclass(frozen=True)
class SpecialistContext:
    """Per-kind context; each request builder reads only its own field."""

    concept_map: tuple[TimestampedConcept, ...] = ()
    audience_directive: str = GUIDANCE_AUDIENCE_DIRECTIVE
    error_catalog: tuple[KnownError, ...] = ()


def build_context(module: LessonModule, global_errors: Sequence[KnownError] = ()) -> SpecialistContext:
    catalog: list[KnownError] = []
    for cp in module.checkpoints:
        catalog.extend(cp.debug_catalog)
    catalog.extend(global_errors)
    return SpecialistContext(concept_map=module.concept_map, error_catalog=tuple(catalog))


def build_specialist_request(
    kind: AgentKind, query: StudentQuery, context: SpecialistContext
) -> ModelRequest:
    """The outbound request carries only the given specialist's scope.

    Video requests contain no code context; code requests contain no concept
    map; the guidance request always embeds the audience directive verbatim.
    """
    if kind is AgentKind.VIDEO:
        concept_lines = "\n".join(f"{c.at_s}s: {c.concept}" for c in context.concept_map)
        system = (
            "You are the video reference specialist for a quantum computing course. "
            "Locate the lecture segments relevant to the student's question using only "
            "the timestamp-indexed concept map below. Do not reason about code.\n"
            f"Concept map:\n{concept_lines}\n"
            'Respond as JSON: {"confidence": 0..1, "content": str, '
            '"relevance": "primary|supporting|not_applicable", "references": [seconds]}'
        )
        user = query.text
        if query.video_position_s is not None:
            user += f"\n(The student is currently at {query.video_position_s} s in the lecture.)"
        return ModelRequest(system, (("student", user),), response_schema="specialist_report")

    if kind is AgentKind.GUIDANCE:
        system = (
            "You are the conceptual guidance specialist for a quantum computing course. "
            f"{context.audience_directive} "
            "Address conceptual and mathematical questions only; do not debug code.\n"
            'Respond as JSON: {"confidence": 0..1, "content": str, '
            '"relevance": "primary|supporting|not_applicable", "references": [concept labels]}'
        )
        return ModelRequest(system, (("student", query.text),), response_schema="specialist_report")

    if kind is AgentKind.CODE:
        catalog_lines = "\n".join(
            f"pattern {e.pattern!r} -> [{e.category.value}] {e.hint}" for e in context.error_catalog
        )
        system = (
            "You are the code diagnosis specialist for a quantum computing course. "
            "Diagnose errors and code questions using the known-error catalog below. "
            "Do not reference lecture timestamps.\n"
            f"Known-error catalog:\n{catalog_lines}\n"
            'Respond as JSON: {"confidence": 0..1, "content": str, '
            '"relevance": "primary|supporting|not_applicable", "references": [code locations]}'
        )
        parts = [query.text]
        if query.code_context:
            parts.append(f"Code:\n{query.code_context}")
        if query.execution_error:
            parts.append(f"Execution error:\n{query.execution_error}")
        return ModelRequest(system, (("student", "\n\n".join(parts)),), response_schema="specialist_report")

    raise ValueError(f"no specialist request for {kind}")


def _degraded(kind: AgentKind, reason: str) -> SpecialistReport:
    return SpecialistReport(
        kind=kind,
        confidence=0.0,
        content=f"{DEGRADED_PREFIX}{reason}",
        references=(),
        relevance=Relevance.NOT_APPLICABLE,
    )


_TIMESTAMP_REF = re.compile(r"^(\d+):([0-5]\d)$")


def _normalize_reference(kind: AgentKind, ref: Any) -> Any:
    if kind is AgentKind.VIDEO:
        if isinstance(ref, (int, float)):
            return int(ref)
        if isinstance(ref, str):
            m = _TIMESTAMP_REF.match(ref.strip())
            if m:
                return int(m.group(1)) * 60 + int(m.group(2))
    return ref


def parse_specialist_report(kind: AgentKind, structured: Mapping[str, Any]) -> SpecialistReport:
    confidence = structured.get("confidence")
    if not isinstance(confidence, (int, float)):
        raise ValueError("confidence missing or non-numeric")
    relevance = Relevance(structured.get("relevance", "primary"))
    refs = structured.get("references", [])
    if not isinstance(refs, list):
        raise ValueError("references must be a list")
    return SpecialistReport(
        kind=kind,
        confidence=min(max(float(confidence), 0.0), 1.0),
        content=str(structured.get("content", "")),
        references=tuple(_normalize_reference(kind, r) for r in refs),
        relevance=relevance,
    )


def run_specialist(
    kind: AgentKind,
    query: StudentQuery,
    context: SpecialistContext,
    provider: Provider,
) -> SpecialistReport:
    """Run one specialist; every failure degrades to a not-applicable report."""
    if kind is AgentKind.CODE and not query.code_context and not query.execution_error:
        return SpecialistReport(
            kind=kind,
            confidence=0.0,
            content="No code or execution error in the question.",
            relevance=Relevance.NOT_APPLICABLE,
        )
    request = build_specialist_request(kind, query, context)
    try:
        response = provider.complete(request)
        assert response.structured is not None  # schema was requested
        return parse_specialist_report(kind, response.structured)
    except ProviderError as exc:
        reason = "timeout" if "timeout" in type(exc).__name__.lower() else "provider_error"
        log.debug("specialist %s degraded: %s", kind.value, exc)
        return _degraded(kind, reason)
    except (ValueError, AssertionError):
        return _degraded(kind, "unparseable_output")


def _snap_timestamps(
    references: Sequence[Any], concept_map: Sequence[TimestampedConcept], window_s: int
) -> tuple[int, ...]:
    """Snap cited seconds to the nearest concept timestamp within the window."""
    snapped: list[int] = []
    for ref in references:
        if not isinstance(ref, int):
            continue
        best: int | None = None
        best_dist = window_s + 1
        for concept in concept_map:
            dist = abs(concept.at_s - ref)
            if dist < best_dist:
                best, best_dist = concept.at_s, dist
        if best is not None and best_dist <= window_s:
            snapped.append(best)
    return tuple(sorted(set(snapped)))


SYNTHESIS_SYSTEM = (
    "You are the synthesis agent for a tutoring service. Rewrite each retained "
    "specialist section into clear student-facing prose. Keep the sections in the "
    "given order; never merge, reorder, or invent sections, and never write "
    "complete solutions.\n"
    'Respond as JSON: {"sections": [{"kind": "code|guidance|video", "text": str}]}'
)


def synthesize(
    reports: Sequence[SpecialistReport],
    query: StudentQuery,
    threshold: float,
    provider: Provider,
    concept_map: Sequence[TimestampedConcept] = (),
    snap_window_s: int = 30,
) -> SynthesizedResponse:
    """Filter, priority-order, and rewrite specialist reports.

    Ordering is a pure function of report kinds and relevance; the provider
    call rewrites text but can neither reorder nor resurrect sections. If the
    synthesizer fails, retained report contents are returned verbatim in
    priority order.
    """
    by_kind = {r.kind: r for r in reports}
    if set(by_kind) != set(SPECIALIST_KINDS) or len(reports) != len(SPECIALIST_KINDS):
        raise ValueError("synthesize expects exactly one report per specialist kind")

    dropped: list[tuple[str, str]] = []
    retained: list[SpecialistReport] = []
    for kind in SECTION_PRIORITY:
        report = by_kind[kind]
        if report.relevance is Relevance.NOT_APPLICABLE:
            reason = (
                report.content[len(DEGRADED_PREFIX):]
                if report.content.startswith(DEGRADED_PREFIX)
                else "not_applicable"
            )
            dropped.append((kind.value, reason))
        elif report.confidence < threshold:
            dropped.append((kind.value, "low_confidence"))
        else:
            retained.append(report)

    if not retained:
        raise AllSpecialistsFailed(dropped)

    payload = "\n\n".join(f"[{r.kind.value}] {r.content}" for r in retained)
    request = ModelRequest(
        SYNTHESIS_SYSTEM,
        (("student", query.text), ("tutor", f"Specialist sections to rewrite:\n{payload}")),
        response_schema="synthesis",
    )
    rewritten: dict[AgentKind, str] = {}
    try:
        response = provider.complete(request)
        assert response.structured is not None
        for section in response.structured.get("sections", []):
            try:
                kind = AgentKind(section.get("kind"))
            except ValueError:
                continue
            text = section.get("text")
            if isinstance(text, str) and text:
                rewritten[kind] = text
    except (ProviderError, AssertionError, AttributeError, TypeError):
        rewritten = {}  # degraded but still ordered

    sections = tuple((r.kind, rewritten.get(r.kind, r.content)) for r in retained)
    video_report = by_kind[AgentKind.VIDEO]
    cited = (
        _snap_timestamps(video_report.references, concept_map, snap_window_s)
        if video_report in retained
        else ()
    )
    return SynthesizedResponse(
        sections=sections,
        cited_timestamps=cited,
        dropped_reports=tuple(dropped),
    )


CLASSIFY_SYSTEM = (
    "Classify the student question into exactly one category: "
    "study_strategies (pacing, resources, how to approach the material), "
    "conceptual_quantum (quantum concepts and intuition), "
    "mathematical_formalism (proofs, matrices, formal properties), "
    "implementation (code, SDK usage, errors), "
    "social_exploratory (greetings, chitchat, off-topic), "
    "video_reference (lecture segments, timestamps), "
    "cross_lesson_synthesis (connecting material across modules).\n"
    'Respond as JSON: {"category": "<one of the seven>"}'
)

_KEYWORD_RULES: tuple[tuple[QuestionCategory, tuple[str, ...]], ...] = (
    (QuestionCategory.STUDY_STRATEGIES, ("pace", "study", "prepare", "schedule", "review", "resources")),
    (QuestionCategory.VIDEO_REFERENCE, ("video", "lecture", "timestamp", "minute mark", "rewatch")),
    (QuestionCategory.CROSS_LESSON_SYNTHESIS, ("earlier module", "previous module", "across modules", "relate to module", "connect to lesson")),
    (QuestionCategory.IMPLEMENTATION, ("error", "traceback", "import", "code", "qiskit", "function", "api", "bug")),
    (QuestionCategory.MATHEMATICAL_FORMALISM, ("matrix", "matrices", "unitary", "eigen", "proof", "theorem", "bijection", "permutation", "norm", "formalism", "associative")),
    (QuestionCategory.CONCEPTUAL_QUANTUM, ("superposition", "entangle", "measurement", "qubit", "quantum", "state", "bell", "interference")),
)

_TIMESTAMP_IN_TEXT = re.compile(r"\b\d+:\d\d\b")


def keyword_question_category(text: str) -> QuestionCategory:
    lowered = text.lower()
    if _TIMESTAMP_IN_TEXT.search(lowered):
        return QuestionCategory.VIDEO_REFERENCE
    for category, keywords in _KEYWORD_RULES:
        if any(k in lowered for k in keywords):
            return category
    return QuestionCategory.SOCIAL_EXPLORATORY


def classify_question(text: str, provider: Provider | None) -> QuestionCategory:
    """Provider-backed classification with a keyword fallback; always labels."""
    if provider is not None:
        request = ModelRequest(
            CLASSIFY_SYSTEM, (("student", text),), response_schema="question_category"
        )
        try:
            response = provider.complete(request)
            if response.structured is not None:
                return QuestionCategory(str(response.structured.get("category")))
        except (ProviderError, ValueError):
            pass
    return keyword_question_category(text)


class SessionStore:
    """In-memory session state; history appends are serialized per session."""

    def __init__(self) -> None:
        self._sessions: dict[str, Session] = {}
        self._outer = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}

    def create(self, alias: StudentAlias, module_id: int, now: int) -> Session:
        session = Session(
            id=uuid.uuid4().hex,
            alias=alias,
            module_id=module_id,
            started_at=now,
            last_active_at=now,
        )
        with self._outer:
            self._sessions[session.id] = session
            self._locks[session.id] = threading.Lock()
        return session

    def get(self, session_id: str) -> Session:
        with self._outer:
            if session_id not in self._sessions:
                raise SessionNotFound(session_id)
            return self._sessions[session_id]

    def append_exchange(self, session_id: str, student_text: str, tutor_text: str, at: int) -> Session:
        with self._outer:
            if session_id not in self._sessions:
                raise SessionNotFound(session_id)
            lock = self._locks[session_id]
        with lock:
            updated = self._sessions[session_id].with_exchange(student_text, tutor_text, at)
            with self._outer:
                self._sessions[session_id] = updated
            return updated


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass(frozen=True)
class OrchestratorConfig:
    confidence_threshold: float = 0.4
    end_to_end_budget_ms: int = 20_000
    snap_window_s: int = 30

    @property
    def specialist_timeout_ms(self) -> int:
        # A stuck specialist degrades well before the whole request would.
        return int(0.75 * self.end_to_end_budget_ms)


class TeachingOrchestrator:
    """One orchestration per query: parallel fan-out, join, synthesize."""

    def __init__(
        self,
        provider: Provider,
        curriculum: Sequence[LessonModule],
        sessions: SessionStore,
        telemetry=None,
        config: OrchestratorConfig = OrchestratorConfig(),
        global_errors: Sequence[KnownError] = (),
    ):
        self.provider = provider
        self.modules = {m.id: m for m in curriculum}
        self.sessions = sessions
        self.telemetry = telemetry
        self.config = config
        self.global_errors = tuple(global_errors)
        self._emitter = ThreadPoolExecutor(max_workers=1, thread_name_prefix="chat-telemetry")
        self._pending: list = []
        self._pending_lock = threading.Lock()

    def handle_query(self, query: StudentQuery) -> SynthesizedResponse:
        session = self.sessions.get(query.session_id)
        module = self.modules[session.module_id]
        if query.video_position_s is not None and not (
            0 <= query.video_position_s <= module.video_length_s
        ):
            raise ValueError("video_position_s outside the module's video length")

        self._emit_chat_event(session, query)

        context = build_context(module, self.global_errors)
        pool = ThreadPoolExecutor(max_workers=3, thread_name_prefix="specialist")
        reports: list[SpecialistReport] = []
        try:
            futures = {
                kind: pool.submit(run_specialist, kind, query, context, self.provider)
                for kind in SPECIALIST_KINDS
            }
            deadline = time.monotonic() + self.config.specialist_timeout_ms / 1000.0
            for kind, future in futures.items():
                remaining = max(0.0, deadline - time.monotonic())
                try:
                    reports.append(future.result(timeout=remaining))
                except FutureTimeout:
                    reports.append(_degraded(kind, "timeout"))
        finally:
            pool.shutdown(wait=False, cancel_futures=True)

        response = synthesize(
            reports,
            query,
            self.config.confidence_threshold,
            self.provider,
            module.concept_map,
            self.config.snap_window_s,
        )
        self.sessions.append_exchange(query.session_id, query.text, response.text(), now_ms())
        return response

    def _emit_chat_event(self, session: Session, query: StudentQuery) -> None:
        """Classify and enqueue the chat event off the response path."""
        if self.telemetry is None:
            return

        def emit() -> None:
            try:
                category = classify_question(query.text, self.provider)
                event = TelemetryEvent(
                    event_id=uuid.uuid4().hex,
                    alias=session.alias,
                    category=EventCategory.CHAT_MESSAGE,
                    module_id=session.module_id,
                    at=now_ms(),
                    payload=ChatPayload(question_category=category),
                )
                self.telemetry.ingest(event)
            except Exception:  # never let telemetry touch the response path
                log.exception("chat telemetry emission failed")

        future = self._emitter.submit(emit)
        with self._pending_lock:
            self._pending = [f for f in self._pending if not f.done()]
            self._pending.append(future)

    def flush_telemetry(self, timeout_s: float = 5.0) -> bool:
        """Wait for pending emissions and the queue drain (tests only)."""
        deadline = time.monotonic() + timeout_s
        with self._pending_lock:
            pending = list(self._pending)
        for future in pending:
            remaining = max(0.0, deadline - time.monotonic())
            try:
                future.result(timeout=remaining)
            except Exception:
                pass
        if self.telemetry is None:
            return True
        return self.telemetry.flush(max(0.0, deadline - time.monotonic()))

    def close(self) -> None:
        self._emitter.shutdown(wait=True)
