"""Human-in-the-loop Bayesian optimization of the decision hyperparameters.

The objective is F1 over operator-labeled windows, evaluated by replaying
cached raw scores through normalization, fusion, and hysteresis under a
candidate parameter set; no video is reprocessed. A Gaussian-process
surrogate over the replayable dimensions proposes candidates by expected
improvement; nothing is applied without operator approval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .chroma import SmokeType, apply_type_rule
from .fusion import HysteresisTracker, HyperParams, ScoreNormalizer, Verdict, fuse

GP_JITTER = 1e-6
GP_JITTER_ESCALATED = 1e-4
LENGTH_SCALE_GRID = np.geomspace(0.05, 3.0, 16)
ACQUISITION_SAMPLES = 1024
REFINEMENT_STEPS = 32

# Dimensions the score-cache replay can evaluate. The chroma classifier
# thresholds (tau_c, delta_l, delta_c) act upstream of the cache and are
# tuned separately from operator type corrections.
REPLAY_BOUNDS: dict[str, tuple[float, float]] = {
    "w_m": (0.0, 5.0),
    "w_c": (0.0, 5.0),
    "bias": (-3.0, 3.0),
    "p_th": (0.1, 0.9),
    "tau_shake": (0.05, 0.9),
}
CLASSIFIER_BOUNDS: dict[str, tuple[float, float]] = {
    "tau_c": (3.0, 30.0),
    "delta_l": (4.0, 30.0),
    "delta_c": (5.0, 40.0),
}
REPLAY_DIMS = list(REPLAY_BOUNDS)


class SurrogateUnavailable(RuntimeError):
    """GP covariance could not be conditioned; suggestions are paused."""


class NoLabeledWindows(ValueError):
    """The replay objective is undefined without labeled windows."""


class SuggestionConflict(RuntimeError):
    """Attempted second resolution of an already-resolved suggestion."""


class FeedbackLabel(Enum):
    CONFIRMED_PLUME = "confirmed_plume"
    FALSE_ALARM = "false_alarm"
    MISSED_PLUME = "missed_plume"
    TYPE_CORRECTION = "type_correction"


@dataclass(frozen=True)
class FeedbackRecord:
    stream_id: str
    region_label: str
    window_index: int
    label: FeedbackLabel
    operator: str
    timestamp_ms: int
    corrected_type: str | None = None  # only for TYPE_CORRECTION

    def to_dict(self) -> dict:
        return {
            "stream_id": self.stream_id,
            "region_label": self.region_label,
            "window_index": self.window_index,
            "label": self.label.value,
            "operator": self.operator,
            "timestamp_ms": self.timestamp_ms,
            "corrected_type": self.corrected_type,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeedbackRecord":
        return cls(
            stream_id=d["stream_id"],
            region_label=d["region_label"],
            window_index=d["window_index"],
            label=FeedbackLabel(d["label"]),
            operator=d["operator"],
            timestamp_ms=d["timestamp_ms"],
            corrected_type=d.get("corrected_type"),
        )


@dataclass(frozen=True)
class ScoreCacheRow:
    """Raw per-window evidence, complete enough to replay decisions.

    ``raw_m`` is the region mean of the noise-cancelled motion score before
    the shake gate, so replay can re-apply the gate under a candidate
    threshold using ``sigma_g``.
    """

    stream_id: str
    region_label: str
    window_index: int
    timestamp_ms: int
    raw_m: float
    raw_c: float
    sigma_g: float
    suspended: bool
    model: int
    state: list[float]
    plume_fraction: float | None = None
    plume_dl: float | None = None
    plume_chroma: float | None = None

    def to_dict(self) -> dict:
        return {
            "stream_id": self.stream_id,
            "region_label": self.region_label,
            "window_index": self.window_index,
            "timestamp_ms": self.timestamp_ms,
            "raw_m": self.raw_m,
            "raw_c": self.raw_c,
            "sigma_g": self.sigma_g,
            "suspended": self.suspended,
            "model": self.model,
            "state": self.state,
            "plume_fraction": self.plume_fraction,
            "plume_dl": self.plume_dl,
            "plume_chroma": self.plume_chroma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreCacheRow":
        return cls(
            stream_id=d["stream_id"],
            region_label=d["region_label"],
            window_index=d["window_index"],
            timestamp_ms=d["timestamp_ms"],
            raw_m=d["raw_m"],
            raw_c=d["raw_c"],
            sigma_g=d["sigma_g"],
            suspended=d["suspended"],
            model=d["model"],
            state=list(d["state"]),
            plume_fraction=d.get("plume_fraction"),
            plume_dl=d.get("plume_dl"),
            plume_chroma=d.get("plume_chroma"),
        )


class SuggestionStatus(Enum):
    PENDING = "pending"
    APPROVED = "approved"
    REJECTED = "rejected"
    APPLIED = "applied"


@dataclass
class Suggestion:
    suggestion_id: str
    proposed: dict[str, float]
    predicted_mean: float
    predicted_sd: float
    ei: float
    status: SuggestionStatus = SuggestionStatus.PENDING
    created_ms: int = 0
    resolved_ms: int | None = None
    operator: str | None = None

    def to_dict(self) -> dict:
        return {
            "suggestion_id": self.suggestion_id,
            "proposed": self.proposed,
            "predicted_mean": self.predicted_mean,
            "predicted_sd": self.predicted_sd,
            "ei": self.ei,
            "status": self.status.value,
            "created_ms": self.created_ms,
            "resolved_ms": self.resolved_ms,
            "operator": self.operator,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Suggestion":
        return cls(
            suggestion_id=d["suggestion_id"],
            proposed=dict(d["proposed"]),
            predicted_mean=d["predicted_mean"],
            predicted_sd=d["predicted_sd"],
            ei=d["ei"],
            status=SuggestionStatus(d["status"]),
            created_ms=d.get("created_ms", 0),
            resolved_ms=d.get("resolved_ms"),
            operator=d.get("operator"),
        )


# ---------------------------------------------------------------------------
# Objective replay
# ---------------------------------------------------------------------------

def truth_labels(
    feedback: list[FeedbackRecord],
) -> dict[tuple[str, str, int], bool]:
    """Ground-truth plume presence per (stream, region, window).

    Confirmations, missed-plume reports, and type corrections all assert a
    real plume; false alarms assert its absence. Later feedback on the same
    window wins.
    """
    labels: dict[tuple[str, str, int], bool] = {}
    for rec in sorted(feedback, key=lambda r: r.timestamp_ms):
        key = (rec.stream_id, rec.region_label, rec.window_index)
        labels[key] = rec.label != FeedbackLabel.FALSE_ALARM
    return labels


@dataclass
class ReplayResult:
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int
    verdicts: dict[tuple[str, str, int], Verdict] = field(default_factory=dict)


def replay_decisions(
    rows: list[ScoreCacheRow], h: HyperParams
) -> dict[tuple[str, str, int], Verdict]:
    """Re-run normalization, fusion, and hysteresis over cached raw scores."""
    groups: dict[tuple[str, str], list[ScoreCacheRow]] = {}
    for row in rows:
        groups.setdefault((row.stream_id, row.region_label), []).append(row)
    verdicts: dict[tuple[str, str, int], Verdict] = {}
    for (stream, region), group in groups.items():
        group = sorted(group, key=lambda r: r.window_index)
        norm_m = ScoreNormalizer.for_motion()
        norm_c = ScoreNormalizer.for_chroma()
        tracker = HysteresisTracker()
        for row in group:
            raw_m = 0.0 if row.sigma_g > h.tau_shake else row.raw_m
            s_m = norm_m.normalize(raw_m)
            s_c = norm_c.normalize(row.raw_c)
            p = fuse(s_m, s_c, h)
            verdict = tracker.update(p, h.p_th)
            verdicts[(stream, region, row.window_index)] = verdict
    return verdicts


def replay_objective(
    rows: list[ScoreCacheRow],
    feedback: list[FeedbackRecord],
    h: HyperParams,
) -> ReplayResult:
    """F1 of replayed verdicts against operator labels."""
    labels = truth_labels(feedback)
    if not labels:
        raise NoLabeledWindows("objective undefined: no labeled windows in cache")
    verdicts = replay_decisions(rows, h)
    tp = fp = fn = tn = 0
    matched = 0
    for key, truth in labels.items():
        if key not in verdicts:
            continue
        matched += 1
        positive = verdicts[key] == Verdict.PLUME_DETECTED
        if positive and truth:
            tp += 1
        elif positive and not truth:
            fp += 1
        elif not positive and truth:
            fn += 1
        else:
            tn += 1
    if matched == 0:
        raise NoLabeledWindows("labeled windows not present in the score cache")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * tp / (2.0 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    return ReplayResult(
        f1=f1, precision=precision, recall=recall,
        tp=tp, fp=fp, fn=fn, tn=tn, verdicts=verdicts,
    )


# ---------------------------------------------------------------------------
# Gaussian-process surrogate
# ---------------------------------------------------------------------------

def normalize_params(h: HyperParams | dict[str, float]) -> np.ndarray:
    """Map the replayable dimensions into the unit cube."""
    values = h.to_dict() if isinstance(h, HyperParams) else h
    out = np.empty(len(REPLAY_DIMS))
    for i, name in enumerate(REPLAY_DIMS):
        lo, hi = REPLAY_BOUNDS[name]
        out[i] = (values[name] - lo) / (hi - lo)
    return out


def denormalize_params(x: np.ndarray) -> dict[str, float]:
    out = {}
    for i, name in enumerate(REPLAY_DIMS):
        lo, hi = REPLAY_BOUNDS[name]
        out[name] = float(lo + x[i] * (hi - lo))
    return out


def _se_kernel(
    a: np.ndarray, b: np.ndarray, length_scales: np.ndarray, amplitude2: float
) -> np.ndarray:
    scaled_a = a / length_scales
    scaled_b = b / length_scales
    d2 = (
        np.sum(scaled_a**2, axis=1)[:, None]
        + np.sum(scaled_b**2, axis=1)[None, :]
        - 2.0 * scaled_a @ scaled_b.T
    )
    return amplitude2 * np.exp(-0.5 * np.maximum(d2, 0.0))


@dataclass
class Surrogate:
    """Zero-mean GP over the unit-cube-normalized replay dimensions."""

    x: np.ndarray  # (n, d)
    y: np.ndarray  # (n,)
    length_scales: np.ndarray
    amplitude2: float
    jitter: float
    _chol: np.ndarray = field(repr=False, default=None)
    _alpha: np.ndarray = field(repr=False, default=None)

    @property
    def incumbent(self) -> tuple[np.ndarray, float]:
        best = int(np.argmax(self.y))
        return self.x[best], float(self.y[best])


def _log_marginal_likelihood(
    x: np.ndarray, y: np.ndarray, ls: np.ndarray, amp2: float, jitter: float
) -> float:
    k = _se_kernel(x, x, ls, amp2) + jitter * np.eye(len(x))
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        return -np.inf
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, y))
    return float(
        -0.5 * y @ alpha
        - np.sum(np.log(np.diag(chol)))
        - 0.5 * len(y) * np.log(2.0 * np.pi)
    )


def fit_surrogate(x: np.ndarray, y: np.ndarray) -> Surrogate:
    """Fit the GP: amplitude by moment matching, per-dimension length scales
    by coordinate ascent on the log marginal likelihood over a fixed grid."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("surrogate requires at least one observation")
    d = x.shape[1]
    amp2 = max(float(np.mean(y**2)), 1e-6)
    ls = np.full(d, 0.5)
    for _ in range(2):
        for dim in range(d):
            best_ll, best_v = -np.inf, ls[dim]
            for v in LENGTH_SCALE_GRID:
                trial = ls.copy()
                trial[dim] = v
                ll = _log_marginal_likelihood(x, y, trial, amp2, GP_JITTER)
                if ll > best_ll:
                    best_ll, best_v = ll, v
            ls[dim] = best_v

    for jitter in (GP_JITTER, GP_JITTER_ESCALATED):
        k = _se_kernel(x, x, ls, amp2) + jitter * np.eye(len(x))
        try:
            chol = np.linalg.cholesky(k)
        except np.linalg.LinAlgError:
            continue
        alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, y))
        return Surrogate(
            x=x, y=y, length_scales=ls, amplitude2=amp2, jitter=jitter,
            _chol=chol, _alpha=alpha,
        )
    raise SurrogateUnavailable(
        "covariance not positive definite even after jitter escalation"
    )


def gp_fit_predict(
    model: Surrogate, query: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and standard deviation at unit-cube query points."""
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    k_star = _se_kernel(q, model.x, model.length_scales, model.amplitude2)
    mu = k_star @ model._alpha
    v = np.linalg.solve(model._chol, k_star.T)
    var = model.amplitude2 - np.sum(v**2, axis=0)
    sd = np.sqrt(np.maximum(var, 0.0))
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sd))):
        raise SurrogateUnavailable("non-finite GP posterior")
    return mu, sd


def _norm_cdf(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.vectorize(math.erf)(z / math.sqrt(2.0)))


def _norm_pdf(z: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * z**2) / math.sqrt(2.0 * math.pi)


def expected_improvement(mu, sd, f_best: float):
    """Closed-form EI for maximization under a Gaussian posterior."""
    mu = np.asarray(mu, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    improvement = mu - f_best
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, improvement / np.where(sd > 0, sd, 1.0), 0.0)
        ei = np.where(
            sd > 0,
            improvement * _norm_cdf(z) + sd * _norm_pdf(z),
            np.maximum(improvement, 0.0),
        )
    ei = np.maximum(ei, 0.0)
    if ei.ndim == 0:
        return float(ei)
    return ei


def maximize_ei(model: Surrogate, seed: int = 0) -> tuple[np.ndarray, float]:
    """Seeded uniform sampling plus coordinate-wise shrinking-radius
    refinement of the acquisition over the unit cube."""
    rng = np.random.default_rng(seed)
    d = model.x.shape[1]
    _, f_best = model.incumbent

    candidates = rng.random((ACQUISITION_SAMPLES, d))
    mu, sd = gp_fit_predict(model, candidates)
    ei = expected_improvement(mu, sd, f_best)
    best_idx = int(np.argmax(ei))
    best_x = candidates[best_idx].copy()
    best_ei = float(ei[best_idx])

    radius = 0.25
    for _ in range(REFINEMENT_STEPS):
        trials = []
        for dim in range(d):
            for delta in (-radius, radius):
                t = best_x.copy()
                t[dim] = min(1.0, max(0.0, t[dim] + delta))
                trials.append(t)
        trials = np.array(trials)
        mu, sd = gp_fit_predict(model, trials)
        ei = expected_improvement(mu, sd, f_best)
        idx = int(np.argmax(ei))
        if ei[idx] > best_ei:
            best_ei = float(ei[idx])
            best_x = trials[idx].copy()
        radius *= 0.85
    return best_x, best_ei


def propose(
    model: Surrogate,
    current: HyperParams,
    suggestion_id: str,
    seed: int = 0,
    created_ms: int = 0,
) -> Suggestion:
    """Build a pending suggestion at the EI maximizer.

    Replay-optimizable dimensions come from the acquisition; the chroma
    classifier thresholds are carried over from the current parameters.
    """
    best_x, best_ei = maximize_ei(model, seed=seed)
    mu, sd = gp_fit_predict(model, best_x)
    values = denormalize_params(best_x)
    proposed = current.to_dict()
    proposed.update(values)
    proposed.pop("version", None)
    return Suggestion(
        suggestion_id=suggestion_id,
        proposed=proposed,
        predicted_mean=float(mu[0]),
        predicted_sd=float(sd[0]),
        ei=best_ei,
        status=SuggestionStatus.PENDING,
        created_ms=created_ms,
    )


def resolve_suggestion(
    suggestion: Suggestion,
    approve: bool,
    operator: str,
    current: HyperParams,
    resolved_ms: int = 0,
) -> tuple[Suggestion, HyperParams | None]:
    """Apply or reject a pending suggestion.

    Approval returns the new HyperParams with the version bumped; rejection
    leaves the live parameters untouched. Double resolution raises.
    """
    if suggestion.status != SuggestionStatus.PENDING:
        raise SuggestionConflict(
            f"suggestion {suggestion.suggestion_id} already "
            f"{suggestion.status.value}"
        )
    resolved = Suggestion(
        suggestion_id=suggestion.suggestion_id,
        proposed=dict(suggestion.proposed),
        predicted_mean=suggestion.predicted_mean,
        predicted_sd=suggestion.predicted_sd,
        ei=suggestion.ei,
        status=SuggestionStatus.APPLIED if approve else SuggestionStatus.REJECTED,
        created_ms=suggestion.created_ms,
        resolved_ms=resolved_ms,
        operator=operator,
    )
    if not approve:
        return resolved, None
    applied = current.bumped(**suggestion.proposed)
    return resolved, applied


# ---------------------------------------------------------------------------
# Classifier threshold tuning from type corrections
# ---------------------------------------------------------------------------

def tune_classifier_thresholds(
    rows: list[ScoreCacheRow],
    feedback: list[FeedbackRecord],
    current: HyperParams,
    grid: int = 14,
) -> tuple[float, float]:
    """Pick (delta_l, delta_c) maximizing agreement with operator smoke-type
    labels over cached plume features. Falls back to the current values when
    no type labels exist."""
    labeled: list[tuple[ScoreCacheRow, str]] = []
    by_key = {
        (r.stream_id, r.region_label, r.window_index): r
        for r in rows
        if r.plume_fraction is not None
    }
    for rec in feedback:
        if rec.label != FeedbackLabel.TYPE_CORRECTION or not rec.corrected_type:
            continue
        row = by_key.get((rec.stream_id, rec.region_label, rec.window_index))
        if row is not None:
            labeled.append((row, rec.corrected_type))
    if not labeled:
        return current.delta_l, current.delta_c

    dl_grid = np.linspace(*CLASSIFIER_BOUNDS["delta_l"], grid)
    dc_grid = np.linspace(*CLASSIFIER_BOUNDS["delta_c"], grid)
    best = (current.delta_l, current.delta_c)
    best_score = -1
    for dl in dl_grid:
        for dc in dc_grid:
            score = sum(
                1
                for row, label in labeled
                if apply_type_rule(
                    row.plume_fraction, row.plume_dl, row.plume_chroma, dl, dc
                )
                == SmokeType(label)
            )
            if score > best_score:
                best_score = score
                best = (float(dl), float(dc))
    return best
