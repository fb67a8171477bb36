"""Adaptive model selection: a linear-softmax policy over the background
model ensemble, updated by policy-gradient steps from operator feedback."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ingest import FrameWindow
from .motion import BackgroundModelKind, MotionField, NoiseProfile, window_luma

N_FEATURES = 6
N_MODELS = len(BackgroundModelKind)

MOTION_FRACTION_THRESHOLD = 0.1
BASELINE_EMA = 0.99
EXPLORATION_LABELED_WINDOWS = 200

MODE_LEARN = "learn"
MODE_EXPLOIT = "exploit"


@dataclass
class PolicyParams:
    theta: np.ndarray = field(default_factory=lambda: np.zeros((N_MODELS, N_FEATURES)))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(N_MODELS))
    alpha: float = 0.01
    gamma: float = 0.9
    baseline: float = 0.0
    version: int = 0
    mode: str = MODE_LEARN

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            theta=self.theta.copy(),
            bias=self.bias.copy(),
            alpha=self.alpha,
            gamma=self.gamma,
            baseline=self.baseline,
            version=self.version,
            mode=self.mode,
        )

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "bias": self.bias.tolist(),
            "alpha": self.alpha,
            "gamma": self.gamma,
            "baseline": self.baseline,
            "version": self.version,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        return cls(
            theta=np.asarray(d["theta"], dtype=np.float64),
            bias=np.asarray(d["bias"], dtype=np.float64),
            alpha=d.get("alpha", 0.01),
            gamma=d.get("gamma", 0.9),
            baseline=d.get("baseline", 0.0),
            version=d.get("version", 0),
            mode=d.get("mode", MODE_LEARN),
        )


@dataclass(frozen=True)
class RewardRecord:
    window_index: int
    model: int
    reward: int  # -1, 0, +1; 0 means no label for the window
    state: np.ndarray


def neutral_state() -> np.ndarray:
    """State used before the first window has produced measurements."""
    return np.array([0.0, 0.5, 0.0, 0.0, 0.0, 1.0])


def encode_state(
    window: FrameWindow,
    noise: NoiseProfile,
    motion: MotionField,
    wall_clock_hour: float,
    luma: np.ndarray | None = None,
) -> np.ndarray:
    """Environmental 6-vector: instability, mean luma, temporal luma
    variance, moving-pixel fraction, and the time-of-day phase pair."""
    if luma is None:
        luma = window_luma(window)
    norm = luma / 255.0
    mean_luma = float(norm.mean())
    # Per-pixel temporal variance of unit-scaled luma is at most 0.25.
    temporal_var = float(np.clip(norm.var(axis=0).mean() * 4.0, 0.0, 1.0))
    motion_fraction = float(np.mean(motion.energy > MOTION_FRACTION_THRESHOLD))
    angle = 2.0 * np.pi * (wall_clock_hour / 24.0)
    return np.array(
        [
            float(np.clip(noise.sigma_g, 0.0, 1.0)),
            mean_luma,
            temporal_var,
            motion_fraction,
            float(np.sin(angle)),
            float(np.cos(angle)),
        ]
    )


def policy_logits(params: PolicyParams, state: np.ndarray) -> np.ndarray:
    return params.theta @ state + params.bias


def log_policy(params: PolicyParams, state: np.ndarray) -> np.ndarray:
    """Log-probabilities of each model under the softmax policy."""
    z = policy_logits(params, state)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite policy logits")
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def select_model(
    params: PolicyParams,
    state: np.ndarray,
    rng: np.random.Generator | None = None,
    mode: str | None = None,
) -> tuple[BackgroundModelKind, float]:
    """Pick a background model and return its log-probability.

    Exploit mode takes the argmax; learn mode samples the distribution and
    therefore needs ``rng``.
    """
    logp = log_policy(params, state)
    mode = mode or params.mode
    if mode == MODE_EXPLOIT or rng is None:
        choice = int(np.argmax(logp))
    else:
        choice = int(rng.choice(N_MODELS, p=np.exp(logp)))
    return BackgroundModelKind(choice), float(logp[choice])


def grad_log_policy(
    params: PolicyParams, state: np.ndarray, choice: int
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of log pi(choice | state) wrt theta and bias."""
    probs = np.exp(log_policy(params, state))
    indicator = np.zeros(N_MODELS)
    indicator[choice] = 1.0
    coeff = indicator - probs
    return np.outer(coeff, state), coeff


def discounted_returns(rewards: list[int], gamma: float) -> np.ndarray:
    returns = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        returns[t] = acc
    return returns


def reinforce_update(
    params: PolicyParams, episode: list[RewardRecord]
) -> PolicyParams:
    """One policy-gradient pass over an episode of reward records.

    Advantages use the pre-episode baseline; per-step updates are applied
    sequentially at the current parameters. The baseline then absorbs the
    episode's returns through its EMA. Pure: the input params are untouched.
    """
    if not episode:
        raise ValueError("episode must be non-empty")
    new = params.copy()
    returns = discounted_returns([r.reward for r in episode], params.gamma)
    baseline0 = params.baseline
    for record, g in zip(episode, returns):
        if record.state.shape != (N_FEATURES,):
            raise ValueError("state dimensionality mismatch")
        advantage = g - baseline0
        if advantage != 0.0:
            d_theta, d_bias = grad_log_policy(new, record.state, record.model)
            new.theta = new.theta + new.alpha * advantage * d_theta
            new.bias = new.bias + new.alpha * advantage * d_bias
    for g in returns:
        new.baseline = BASELINE_EMA * new.baseline + (1.0 - BASELINE_EMA) * g
    new.version += 1
    return new
