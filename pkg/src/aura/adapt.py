"""Offline adaptation batches: policy-gradient updates from fresh feedback
and the Bayesian-optimization suggestion workflow over the data store."""

from __future__ import annotations

import logging

import numpy as np

from .automl import (
    FeedbackLabel,
    NoLabeledWindows,
    Suggestion,
    fit_surrogate,
    normalize_params,
    propose,
    replay_objective,
    resolve_suggestion,
    truth_labels,
)
from .fusion import HyperParams, Verdict
from .policy import (
    EXPLORATION_LABELED_WINDOWS,
    MODE_EXPLOIT,
    MODE_LEARN,
    PolicyParams,
    RewardRecord,
    reinforce_update,
)
from .store import DataStore, now_ms

logger = logging.getLogger(__name__)


def window_rewards(store: DataStore, since_cursor: int = 0):
    """Per-(stream, window) rewards from feedback lines beyond the cursor.

    A window earns +1 when the live verdict agreed with the operator label,
    -1 otherwise. Multiple labeled regions in one window are combined by
    majority sign.
    """
    feedback = store.feedback()
    fresh = feedback[since_cursor:]
    if not fresh:
        return {}, len(feedback)
    labels = truth_labels(fresh)
    verdict_by_key = {
        (e.stream_id, e.region_label, e.window_index): e.verdict
        for e in store.events()
    }
    votes: dict[tuple[str, int], int] = {}
    for (stream, region, window), truth in labels.items():
        verdict = verdict_by_key.get((stream, region, window))
        if verdict is None:
            continue
        agreed = (verdict == Verdict.PLUME_DETECTED) == truth
        votes.setdefault((stream, window), 0)
        votes[(stream, window)] += 1 if agreed else -1
    rewards = {
        key: (1 if vote > 0 else -1) for key, vote in votes.items() if vote != 0
    }
    return rewards, len(feedback)


def build_episodes(
    store: DataStore, rewards: dict[tuple[str, int], int]
) -> list[list[RewardRecord]]:
    """Group labeled windows into episodes of contiguous window indices."""
    cache = {}
    for row in store.score_rows():
        cache.setdefault((row.stream_id, row.window_index), row)
    by_stream: dict[str, list[tuple[int, int]]] = {}
    for (stream, window), reward in rewards.items():
        if (stream, window) in cache:
            by_stream.setdefault(stream, []).append((window, reward))

    episodes = []
    for stream, items in by_stream.items():
        items.sort()
        run: list[RewardRecord] = []
        prev = None
        for window, reward in items:
            row = cache[(stream, window)]
            record = RewardRecord(
                window_index=window,
                model=row.model,
                reward=reward,
                state=np.asarray(row.state, dtype=np.float64),
            )
            if prev is not None and window != prev + 1 and run:
                episodes.append(run)
                run = []
            run.append(record)
            prev = window
        if run:
            episodes.append(run)
    return episodes


def run_policy_batch(store: DataStore) -> tuple[PolicyParams, int]:
    """Consume fresh feedback and apply one REINFORCE pass per episode.

    Returns the (possibly updated) params and the number of labeled windows
    consumed. Streams flip from exploration to exploit once they accumulate
    enough labeled windows.
    """
    cursor, labeled_counts = store.policy_meta()
    rewards, new_cursor = window_rewards(store, since_cursor=cursor)
    params = store.load_policy()
    episodes = build_episodes(store, rewards)
    consumed = 0
    for episode in episodes:
        params = reinforce_update(params, episode)
        consumed += len(episode)
    for stream, _window in rewards:
        labeled_counts[stream] = labeled_counts.get(stream, 0) + 1
    params.mode = (
        MODE_EXPLOIT
        if labeled_counts
        and max(labeled_counts.values()) >= EXPLORATION_LABELED_WINDOWS
        else params.mode
    )
    store.save_policy(
        params, feedback_cursor=new_cursor, labeled_windows=labeled_counts
    )
    return params, consumed


def mode_for_stream(labeled_counts: dict[str, int], stream_id: str) -> str:
    count = labeled_counts.get(stream_id, 0)
    return MODE_EXPLOIT if count >= EXPLORATION_LABELED_WINDOWS else MODE_LEARN


def evaluate_candidate(store: DataStore, h: HyperParams) -> float:
    """Replay the cached scores under candidate parameters; returns F1."""
    result = replay_objective(store.score_rows(), store.feedback(), h)
    return result.f1


def ensure_observations(store: DataStore) -> list[tuple[dict, float]]:
    """Guarantee the surrogate has at least the current params evaluated."""
    observations = store.observations()
    if not observations:
        current = store.current_hyperparams()
        f = evaluate_candidate(store, current)
        store.append_observation(current.to_dict(), f)
        observations = store.observations()
    return observations


def propose_suggestion(store: DataStore, seed: int = 0) -> Suggestion:
    """Fit the surrogate to all recorded observations and emit a pending
    suggestion at the EI maximizer."""
    observations = ensure_observations(store)
    x = np.array([normalize_params(params) for params, _ in observations])
    y = np.array([obj for _, obj in observations])
    surrogate = fit_surrogate(x, y)
    suggestion = propose(
        surrogate,
        current=store.current_hyperparams(),
        suggestion_id=store.next_suggestion_id(),
        seed=seed,
        created_ms=now_ms(),
    )
    store.record_suggestion(suggestion)
    return suggestion


def resolve_suggestion_in_store(
    store: DataStore, suggestion_id: str, approve: bool, operator: str
) -> Suggestion:
    """Resolve a pending suggestion; approval applies the new parameters,
    and either way the replayed objective is recorded as evidence."""
    suggestions = store.suggestions()
    if suggestion_id not in suggestions:
        raise KeyError(f"unknown suggestion {suggestion_id}")
    current = store.current_hyperparams()
    resolved, applied = resolve_suggestion(
        suggestions[suggestion_id],
        approve=approve,
        operator=operator,
        current=current,
        resolved_ms=now_ms(),
    )
    try:
        candidate = current.bumped(**resolved.proposed)
        f = evaluate_candidate(store, candidate)
        store.append_observation(candidate.to_dict(), f)
    except NoLabeledWindows:
        logger.info("suggestion %s resolved without evaluation", suggestion_id)
    store.record_suggestion(resolved)
    if applied is not None:
        store.apply_hyperparams(applied, reason=f"suggestion {suggestion_id}")
    return resolved
