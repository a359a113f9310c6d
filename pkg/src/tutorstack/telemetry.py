"""Fire-and-forget telemetry: bounded ingest queue, durable JSONL store, aggregation.

The teaching path only ever pays for a constant-time enqueue. Durability is
asynchronous with retry; overflow drops the oldest unwritten event rather
than back-pressuring a teaching request. Aggregation is a pure, idempotent
pass over the store: replaying the same log twice yields byte-identical
summaries because events are deduplicated by event_id.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

from .model import (
    ChatPayload,
    CheckpointPayload,
    CodePayload,
    EventCategory,
    LessonModule,
    SessionPayload,
    StudentAlias,
    TelemetryEvent,
    VideoAction,
    VideoPayload,
)

log = logging.getLogger(__name__)

WEEK_MS = 7 * 24 * 3600 * 1000


def make_alias(raw_id: str, deployment_key: str) -> StudentAlias:
    """Keyed one-way hash of a raw student identifier, truncated to 16 hex chars.

    The raw identifier must never reach the store or logs; callers alias at
    the boundary and discard the raw value.
    """
    if not raw_id:
        raise ValueError("raw student identifier must be non-empty")
    if not deployment_key:
        raise ValueError("anonymization key must be configured (TELEMETRY_KEY)")
    digest = hmac.new(deployment_key.encode(), raw_id.encode(), hashlib.sha256).hexdigest()
    return StudentAlias(digest[:16])


class EventStore(Protocol):
    def append(self, record: Mapping[str, Any]) -> None: ...

    def read_raw(self) -> tuple[list[dict], int]:
        """All stored records plus the count of unreadable lines."""
        ...


class FileEventStore:
    """Append-only JSON Lines store; one TelemetryEvent per line."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, record: Mapping[str, Any]) -> None:
        line = json.dumps(record, sort_keys=True, separators=(",", ":"))
        with self._lock:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(line + "\n")

    def read_raw(self) -> tuple[list[dict], int]:
        if not self.path.exists():
            return [], 0
        records: list[dict] = []
        corrupt = 0
        with self._lock:
            text = self.path.read_text(encoding="utf-8")
        for line in text.splitlines():
            if not line.strip():
                continue
            try:
                parsed = json.loads(line)
                if not isinstance(parsed, dict):
                    raise ValueError("not an object")
                records.append(parsed)
            except (json.JSONDecodeError, ValueError):
                corrupt += 1
        return records, corrupt


class MemoryEventStore:
    def __init__(self) -> None:
        self.records: list[dict] = []
        self._lock = threading.Lock()

    def append(self, record: Mapping[str, Any]) -> None:
        with self._lock:
            self.records.append(dict(record))

    def read_raw(self) -> tuple[list[dict], int]:
        with self._lock:
            return list(self.records), 0


class IngestQueue:
    """Bounded buffer in front of the durable sink.

    ingest() is a constant-time append and never surfaces sink failures.
    A single drain worker writes the sink with retry/backoff; on overflow the
    oldest unwritten event is dropped and counted.
    """

    def __init__(
        self,
        sink: EventStore,
        capacity: int = 1000,
        max_retries: int = 3,
        backoff_ms: int = 50,
    ):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.sink = sink
        self.capacity = capacity
        self.max_retries = max_retries
        self.backoff_ms = backoff_ms
        self.dropped = 0
        self._buf: deque[TelemetryEvent] = deque()
        self._seen: set[str] = set()
        self._cond = threading.Condition()
        self._closed = False
        self._inflight = False
        self._worker = threading.Thread(target=self._drain_loop, name="telemetry-drain", daemon=True)
        self._worker.start()

    def ingest(self, event: TelemetryEvent) -> bool:
        """Accept an event; returns once it is buffered. Never blocks on the sink."""
        with self._cond:
            if self._closed:
                return False
            if event.event_id in self._seen:
                return True  # at-least-once delivery: duplicate absorbed
            self._seen.add(event.event_id)
            if len(self._buf) >= self.capacity:
                self._buf.popleft()
                self.dropped += 1
            self._buf.append(event)
            self._cond.notify_all()
        return True

    def pending(self) -> int:
        with self._cond:
            return len(self._buf)

    def flush(self, timeout_s: float = 5.0) -> bool:
        """Wait until the buffer drains (tests only); False on timeout."""
        deadline = time.monotonic() + timeout_s
        with self._cond:
            while self._buf or self._inflight:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cond.wait(min(remaining, 0.05))
        return True

    def close(self, timeout_s: float = 2.0) -> None:
        self.flush(timeout_s)
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        self._worker.join(timeout=timeout_s)

    def _drain_loop(self) -> None:
        while True:
            with self._cond:
                while not self._buf and not self._closed:
                    self._cond.wait(0.05)
                if self._closed and not self._buf:
                    return
                event = self._buf[0]  # peek; stays buffered (and droppable) while writing
                self._inflight = True
            ok = self._try_write(event)
            with self._cond:
                self._inflight = False
                if ok and self._buf and self._buf[0] is event:
                    self._buf.popleft()
                self._cond.notify_all()
            if not ok:
                time.sleep(self.backoff_ms / 1000.0)

    def _try_write(self, event: TelemetryEvent) -> bool:
        for attempt in range(self.max_retries):
            try:
                self.sink.append(event.to_dict())
                return True
            except Exception:
                time.sleep(self.backoff_ms / 1000.0 * (attempt + 1))
        return False


@dataclass(frozen=True)
class CodeStats:
    total: int = 0
    successes: int = 0
    by_category: Mapping[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "successes": self.successes,
            "by_category": dict(sorted(self.by_category.items())),
        }


@dataclass(frozen=True)
class CheckpointStats:
    attempts: int = 0
    passes: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"attempts": self.attempts, "passes": self.passes}


@dataclass(frozen=True)
class ModuleAggregate:
    video_retention: tuple[int, ...]
    code: CodeStats
    checkpoints: Mapping[str, CheckpointStats]
    chat_category_counts: Mapping[str, int]
    failure_evidence_counts: Mapping[str, int]

    def to_dict(self) -> dict[str, Any]:
        return {
            "video_retention": list(self.video_retention),
            "code_stats": self.code.to_dict(),
            "checkpoint_stats": {k: v.to_dict() for k, v in sorted(self.checkpoints.items())},
            "chat_category_counts": dict(sorted(self.chat_category_counts.items())),
            "failure_evidence_counts": dict(sorted(self.failure_evidence_counts.items())),
        }


@dataclass(frozen=True)
class AliasFeatures:
    chat_count: int
    code_exec_count: int
    video_event_count: int
    checkpoint_attempts: int
    chat_category_counts: Mapping[str, int]
    module_event_counts: Mapping[int, int]
    weekly_activity: Mapping[int, Mapping[int, int]]
    first_half_events: int
    second_half_events: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "chat_count": self.chat_count,
            "code_exec_count": self.code_exec_count,
            "video_event_count": self.video_event_count,
            "checkpoint_attempts": self.checkpoint_attempts,
            "chat_category_counts": dict(sorted(self.chat_category_counts.items())),
            "module_event_counts": {str(k): v for k, v in sorted(self.module_event_counts.items())},
            "weekly_activity": {
                str(m): {str(w): n for w, n in sorted(weeks.items())}
                for m, weeks in sorted(self.weekly_activity.items())
            },
            "first_half_events": self.first_half_events,
            "second_half_events": self.second_half_events,
        }


@dataclass(frozen=True)
class AggregateSummary:
    per_module: Mapping[int, ModuleAggregate]
    per_alias: Mapping[str, AliasFeatures]
    total_events: int
    duplicate_events: int
    corrupt_lines: int
    midpoint_ms: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_module": {str(m): agg.to_dict() for m, agg in sorted(self.per_module.items())},
            "per_alias": {a: f.to_dict() for a, f in sorted(self.per_alias.items())},
            "total_events": self.total_events,
            "duplicate_events": self.duplicate_events,
            "corrupt_lines": self.corrupt_lines,
            "midpoint_ms": self.midpoint_ms,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def overall_code_stats(self) -> tuple[int, int]:
        total = sum(m.code.total for m in self.per_module.values())
        successes = sum(m.code.successes for m in self.per_module.values())
        return total, successes


def _bin_of(position_s: int, n_bins: int) -> int:
    return min(max(position_s, 0) // 60, n_bins - 1)


def _retention_bins(
    events: Sequence[TelemetryEvent], video_length_s: int
) -> tuple[int, ...]:
    """Active-viewer count per 60 s bin.

    Definition (stated openly, the source data has no ground truth for it):
    a play event opens a watch span at its position; a pause/stop at a later
    position credits every bin the span covers; a seek voids the open span
    beyond its starting bin and keeps playing from the seek target; a span
    left open at stream end credits only its starting bin.
    """
    n_bins = max(1, math.ceil(video_length_s / 60))
    by_alias: dict[str, list[TelemetryEvent]] = {}
    for e in events:
        by_alias.setdefault(e.alias.value, []).append(e)

    bins = [0] * n_bins
    for alias_events in by_alias.values():
        alias_events.sort(key=lambda e: (e.at, e.event_id))
        active: set[int] = set()
        open_start: int | None = None
        for e in alias_events:
            payload = e.payload
            assert isinstance(payload, VideoPayload)
            pos = min(max(payload.position_s, 0), video_length_s)
            action = payload.action
            if action is VideoAction.PLAY:
                if open_start is not None:
                    active.add(_bin_of(open_start, n_bins))
                open_start = pos
            elif action in (VideoAction.PAUSE, VideoAction.STOP):
                if open_start is not None:
                    if pos > open_start:
                        for b in range(_bin_of(open_start, n_bins), _bin_of(pos - 1, n_bins) + 1):
                            active.add(b)
                    else:
                        active.add(_bin_of(open_start, n_bins))
                    open_start = None
            elif action is VideoAction.SEEK:
                if open_start is not None:
                    active.add(_bin_of(open_start, n_bins))
                    open_start = pos
        if open_start is not None:
            active.add(_bin_of(open_start, n_bins))
        for b in active:
            bins[b] += 1
    return tuple(bins)


def _dedupe(events: Iterable[TelemetryEvent]) -> tuple[list[TelemetryEvent], int]:
    seen: set[str] = set()
    unique: list[TelemetryEvent] = []
    duplicates = 0
    for e in events:
        if e.event_id in seen:
            duplicates += 1
            continue
        seen.add(e.event_id)
        unique.append(e)
    return unique, duplicates


def aggregate(store: EventStore, curriculum: Sequence[LessonModule]) -> AggregateSummary:
    """Pure function of the stored events; re-running yields an identical summary."""
    raw, corrupt = store.read_raw()
    events: list[TelemetryEvent] = []
    for record in raw:
        try:
            events.append(TelemetryEvent.from_dict(record))
        except (KeyError, ValueError, TypeError):
            corrupt += 1
    events, duplicates = _dedupe(events)
    events.sort(key=lambda e: (e.at, e.event_id))
    return aggregate_events(events, curriculum, duplicates=duplicates, corrupt=corrupt)


def aggregate_events(
    events: Sequence[TelemetryEvent],
    curriculum: Sequence[LessonModule],
    duplicates: int = 0,
    corrupt: int = 0,
) -> AggregateSummary:
    modules = {m.id: m for m in curriculum}
    if events:
        min_at = min(e.at for e in events)
        max_at = max(e.at for e in events)
    else:
        min_at = max_at = 0
    midpoint = (min_at + max_at) // 2

    video_by_module: dict[int, list[TelemetryEvent]] = {m: [] for m in modules}
    code_total: dict[int, int] = {m: 0 for m in modules}
    code_ok: dict[int, int] = {m: 0 for m in modules}
    code_cat: dict[int, dict[str, int]] = {m: {} for m in modules}
    cp_stats: dict[int, dict[str, list[int]]] = {m: {} for m in modules}
    chat_counts: dict[int, dict[str, int]] = {m: {} for m in modules}
    evidence: dict[int, dict[str, int]] = {m: {} for m in modules}

    alias_rows: dict[str, dict[str, Any]] = {}

    def row(alias: str) -> dict[str, Any]:
        return alias_rows.setdefault(
            alias,
            {
                "chat": 0,
                "code": 0,
                "video": 0,
                "cp": 0,
                "chat_cats": {},
                "modules": {},
                "weekly": {},
                "first": 0,
                "second": 0,
            },
        )

    for e in events:
        if e.module_id not in modules:
            continue
        r = row(e.alias.value)
        r["modules"][e.module_id] = r["modules"].get(e.module_id, 0) + 1
        week = (e.at - min_at) // WEEK_MS
        r["weekly"].setdefault(e.module_id, {})
        r["weekly"][e.module_id][week] = r["weekly"][e.module_id].get(week, 0) + 1
        if e.at <= midpoint:
            r["first"] += 1
        else:
            r["second"] += 1

        payload = e.payload
        if e.category is EventCategory.VIDEO_PLAYBACK:
            video_by_module[e.module_id].append(e)
            r["video"] += 1
        elif e.category is EventCategory.CODE_EXECUTION:
            assert isinstance(payload, CodePayload)
            code_total[e.module_id] += 1
            r["code"] += 1
            if payload.success:
                code_ok[e.module_id] += 1
            else:
                cat = payload.error_category.value if payload.error_category else "other"
                code_cat[e.module_id][cat] = code_cat[e.module_id].get(cat, 0) + 1
        elif e.category is EventCategory.CHAT_MESSAGE:
            assert isinstance(payload, ChatPayload)
            cat = payload.question_category.value
            chat_counts[e.module_id][cat] = chat_counts[e.module_id].get(cat, 0) + 1
            r["chat"] += 1
            r["chat_cats"][cat] = r["chat_cats"].get(cat, 0) + 1
        elif e.category is EventCategory.CHECKPOINT_SUBMISSION:
            assert isinstance(payload, CheckpointPayload)
            stats = cp_stats[e.module_id].setdefault(payload.checkpoint_id, [0, 0])
            stats[0] += 1
            if payload.passed:
                stats[1] += 1
            elif payload.failure_evidence is not None:
                ev = payload.failure_evidence.value
                evidence[e.module_id][ev] = evidence[e.module_id].get(ev, 0) + 1
            r["cp"] += 1
        elif e.category is EventCategory.SESSION_MANAGEMENT:
            assert isinstance(payload, SessionPayload)

    per_module = {
        mid: ModuleAggregate(
            video_retention=_retention_bins(video_by_module[mid], modules[mid].video_length_s),
            code=CodeStats(
                total=code_total[mid],
                successes=code_ok[mid],
                by_category=dict(code_cat[mid]),
            ),
            checkpoints={
                cp: CheckpointStats(attempts=a, passes=p) for cp, (a, p) in cp_stats[mid].items()
            },
            chat_category_counts=dict(chat_counts[mid]),
            failure_evidence_counts=dict(evidence[mid]),
        )
        for mid in modules
    }
    per_alias = {
        alias: AliasFeatures(
            chat_count=r["chat"],
            code_exec_count=r["code"],
            video_event_count=r["video"],
            checkpoint_attempts=r["cp"],
            chat_category_counts=dict(r["chat_cats"]),
            module_event_counts=dict(r["modules"]),
            weekly_activity={m: dict(w) for m, w in r["weekly"].items()},
            first_half_events=r["first"],
            second_half_events=r["second"],
        )
        for alias, r in alias_rows.items()
    }
    return AggregateSummary(
        per_module=per_module,
        per_alias=per_alias,
        total_events=len(events),
        duplicate_events=duplicates,
        corrupt_lines=corrupt,
        midpoint_ms=midpoint,
    )


def write_summary(summary: AggregateSummary, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(summary.to_json(), encoding="utf-8")
