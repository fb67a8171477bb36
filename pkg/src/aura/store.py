"""Append-only persistence for events, feedback, suggestions, policy state,
hyperparameter versions, and the score cache.

Everything is newline-delimited JSON under one data directory, with a single
writer lock per log. Restart recovers the full state by replaying the logs.
"""

from __future__ import annotations

import base64
import json
import os
import threading
import time
from pathlib import Path

from .automl import FeedbackRecord, ScoreCacheRow, Suggestion, SuggestionStatus
from .fusion import DetectionEvent, HyperParams, Verdict
from .policy import PolicyParams

EVENTS_LOG = "events.ndjson"
FEEDBACK_LOG = "feedback.ndjson"
SUGGESTIONS_LOG = "suggestions.ndjson"
HYPERPARAMS_LOG = "hyperparams.ndjson"
OBSERVATIONS_LOG = "observations.ndjson"
SCORE_CACHE_LOG = "score_cache.ndjson"
REGISTRY_LOG = "registry.ndjson"
POLICY_FILE = "policy.json"
THUMBNAIL_DIR = "thumbnails"


def now_ms() -> int:
    return int(time.time() * 1000)


class DanglingReference(ValueError):
    """Feedback referenced an event or window that was never processed."""


class DuplicateStream(ValueError):
    pass


class DataStore:
    def __init__(self, data_dir: str | Path):
        self.root = Path(data_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / THUMBNAIL_DIR).mkdir(exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}

    def _lock(self, name: str) -> threading.Lock:
        if name not in self._locks:
            self._locks[name] = threading.Lock()
        return self._locks[name]

    def _append(self, name: str, record: dict) -> None:
        line = json.dumps(record, separators=(",", ":"))
        with self._lock(name):
            with open(self.root / name, "a") as fh:
                fh.write(line + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    def _read_all(self, name: str) -> list[dict]:
        path = self.root / name
        if not path.exists():
            return []
        records = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
        return records

    # -- events ------------------------------------------------------------

    def append_event(self, event: DetectionEvent) -> None:
        self._append(EVENTS_LOG, event.to_dict())

    def events(self) -> list[DetectionEvent]:
        return [DetectionEvent.from_dict(d) for d in self._read_all(EVENTS_LOG)]

    def query_events(
        self,
        stream_id: str | None = None,
        region_label: str | None = None,
        verdict: str | None = None,
        since_ms: int | None = None,
        until_ms: int | None = None,
        limit: int = 100,
        token: str | None = None,
    ) -> tuple[list[DetectionEvent], str | None]:
        """Filtered events in window order with offset-token pagination."""
        if limit <= 0:
            raise ValueError("limit must be positive")
        offset = 0
        if token:
            try:
                offset = int(base64.urlsafe_b64decode(token.encode()).decode())
            except (ValueError, UnicodeDecodeError) as exc:
                raise ValueError(f"malformed continuation token: {token}") from exc
        if verdict is not None:
            verdict = Verdict(verdict).value
        matches = []
        for event in self.events():
            if stream_id is not None and event.stream_id != stream_id:
                continue
            if region_label is not None and event.region_label != region_label:
                continue
            if verdict is not None and event.verdict.value != verdict:
                continue
            if since_ms is not None and event.timestamp_ms < since_ms:
                continue
            if until_ms is not None and event.timestamp_ms > until_ms:
                continue
            matches.append(event)
        matches.sort(key=lambda e: (e.stream_id, e.window_index, e.region_label))
        page = matches[offset : offset + limit]
        next_token = None
        if offset + limit < len(matches):
            next_token = base64.urlsafe_b64encode(
                str(offset + limit).encode()
            ).decode()
        return page, next_token

    # -- score cache ---------------------------------------------------------

    def append_score_row(self, row: ScoreCacheRow) -> None:
        self._append(SCORE_CACHE_LOG, row.to_dict())

    def score_rows(self) -> list[ScoreCacheRow]:
        return [ScoreCacheRow.from_dict(d) for d in self._read_all(SCORE_CACHE_LOG)]

    def has_window(self, stream_id: str, region_label: str, window_index: int) -> bool:
        return any(
            r.stream_id == stream_id
            and r.region_label == region_label
            and r.window_index == window_index
            for r in self.score_rows()
        )

    # -- feedback ------------------------------------------------------------

    def append_feedback(self, record: FeedbackRecord) -> None:
        if not self.has_window(
            record.stream_id, record.region_label, record.window_index
        ):
            raise DanglingReference(
                f"no processed window ({record.stream_id}, "
                f"{record.region_label}, {record.window_index})"
            )
        self._append(FEEDBACK_LOG, record.to_dict())

    def feedback(self) -> list[FeedbackRecord]:
        return [FeedbackRecord.from_dict(d) for d in self._read_all(FEEDBACK_LOG)]

    # -- hyperparameters -------------------------------------------------------

    def current_hyperparams(self) -> HyperParams:
        records = self._read_all(HYPERPARAMS_LOG)
        if not records:
            return HyperParams()
        return HyperParams.from_dict(records[-1])

    def hyperparams_history(self) -> list[HyperParams]:
        return [HyperParams.from_dict(d) for d in self._read_all(HYPERPARAMS_LOG)]

    def apply_hyperparams(self, params: HyperParams, reason: str) -> None:
        current = self.current_hyperparams()
        if params.version <= current.version and self._read_all(HYPERPARAMS_LOG):
            raise ValueError(
                f"version must increase (current {current.version}, "
                f"got {params.version})"
            )
        record = params.to_dict()
        record["applied_ms"] = now_ms()
        record["reason"] = reason
        self._append(HYPERPARAMS_LOG, record)

    # -- suggestions -----------------------------------------------------------

    def next_suggestion_id(self) -> str:
        return f"sg-{len(self._read_all(SUGGESTIONS_LOG)) + 1:04d}"

    def record_suggestion(self, suggestion: Suggestion) -> None:
        self._append(SUGGESTIONS_LOG, suggestion.to_dict())

    def suggestions(self) -> dict[str, Suggestion]:
        """Latest state per suggestion id."""
        latest: dict[str, Suggestion] = {}
        for d in self._read_all(SUGGESTIONS_LOG):
            s = Suggestion.from_dict(d)
            latest[s.suggestion_id] = s
        return latest

    def pending_suggestions(self) -> list[Suggestion]:
        return [
            s
            for s in self.suggestions().values()
            if s.status == SuggestionStatus.PENDING
        ]

    # -- surrogate observations --------------------------------------------------

    def append_observation(self, params: dict, objective: float) -> None:
        self._append(OBSERVATIONS_LOG, {"params": params, "objective": objective})

    def observations(self) -> list[tuple[dict, float]]:
        return [
            (d["params"], d["objective"]) for d in self._read_all(OBSERVATIONS_LOG)
        ]

    # -- policy -------------------------------------------------------------------

    def load_policy(self) -> PolicyParams:
        path = self.root / POLICY_FILE
        if not path.exists():
            return PolicyParams()
        return PolicyParams.from_dict(json.loads(path.read_text()))

    def save_policy(
        self,
        params: PolicyParams,
        feedback_cursor: int | None = None,
        labeled_windows: dict[str, int] | None = None,
    ) -> None:
        cursor, counts = self.policy_meta()
        data = params.to_dict()
        data["feedback_cursor"] = cursor if feedback_cursor is None else feedback_cursor
        data["labeled_windows"] = counts if labeled_windows is None else labeled_windows
        tmp = self.root / (POLICY_FILE + ".tmp")
        tmp.write_text(json.dumps(data, indent=1))
        os.replace(tmp, self.root / POLICY_FILE)

    def policy_meta(self) -> tuple[int, dict[str, int]]:
        """(feedback lines already consumed, labeled window counts per stream)."""
        path = self.root / POLICY_FILE
        if not path.exists():
            return 0, {}
        data = json.loads(path.read_text())
        return data.get("feedback_cursor", 0), data.get("labeled_windows", {})

    # -- stream registry ------------------------------------------------------------

    def record_registration(
        self, stream_id: str, config: dict, source: str, status: str
    ) -> None:
        self._append(
            REGISTRY_LOG,
            {
                "stream_id": stream_id,
                "config": config,
                "source": source,
                "status": status,
                "timestamp_ms": now_ms(),
            },
        )

    def registry(self) -> dict[str, dict]:
        """Latest registration record per stream."""
        latest: dict[str, dict] = {}
        for d in self._read_all(REGISTRY_LOG):
            entry = latest.get(d["stream_id"], {})
            entry.update({k: v for k, v in d.items() if v is not None})
            latest[d["stream_id"]] = entry
        return latest

    def update_stream_status(self, stream_id: str, status: str) -> None:
        self._append(
            REGISTRY_LOG,
            {
                "stream_id": stream_id,
                "config": None,
                "source": None,
                "status": status,
                "timestamp_ms": now_ms(),
            },
        )

    # -- thumbnails ------------------------------------------------------------------

    def thumbnail_path(self, stream_id: str, window_index: int) -> Path:
        d = self.root / THUMBNAIL_DIR / stream_id
        d.mkdir(parents=True, exist_ok=True)
        return d / f"{window_index}.jpg"
