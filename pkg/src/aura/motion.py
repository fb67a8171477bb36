"""Motion engine: background-subtraction ensemble, stabilization-region noise
profile, and the shake fail-safe.

The per-window motion energy from the selected background model is corrected
by subtracting a noise field measured in designated static regions; when the
global instability measure exceeds the shake threshold the whole window is
suspended and scores are forced to zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .ingest import FrameWindow, SceneConfig

# Mixture model constants (canonical adaptive-mixture defaults).
MOG_COMPONENTS = 3
MOG_LEARNING_RATE = 0.01
MOG_MATCH_SIGMA = 2.5
MOG_BACKGROUND_WEIGHT = 0.7
MOG_INITIAL_VARIANCE = 225.0
MOG_MIN_VARIANCE = 4.0
MOG_REPLACEMENT_WEIGHT = 0.05

# Sample-bank model constants (canonical defaults).
VIBE_SAMPLES = 20
VIBE_RADIUS = 20.0
VIBE_MIN_MATCHES = 2
VIBE_SUBSAMPLING = 16

FRAME_DIFF_EMA = 0.5
NOISE_EMA_BETA = 0.8


class BackgroundModelKind(IntEnum):
    FRAME_DIFF = 0
    MIXTURE_OF_GAUSSIANS = 1
    VIBE = 2


@dataclass(frozen=True)
class MotionField:
    """Per-pixel motion energy in [0, 1] for one window."""

    energy: np.ndarray
    model: BackgroundModelKind
    window_index: int = -1


@dataclass(frozen=True)
class NoiseProfile:
    """Camera-shake noise field derived from stabilization regions.

    The field is piecewise constant: each pixel takes the blended mean
    energy of its nearest stabilization region. ``sigma_g`` (the maximum
    region mean) measures global scene instability.
    """

    region_means: np.ndarray  # (n_regions,)
    label_map: np.ndarray  # (h, w) int16, nearest stabilization region
    sigma_g: float
    beta: float = NOISE_EMA_BETA

    @property
    def psi(self) -> np.ndarray:
        return self.region_means[self.label_map]


@dataclass(frozen=True)
class MotionScoreField:
    """Noise-cancelled motion score; all zero when suspended."""

    scores: np.ndarray
    suspended: bool
    window_index: int = -1


def rec601_luma(pixels: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an (..., 3) uint8 array, as float64 in [0, 255]."""
    p = np.asarray(pixels, dtype=np.float64)
    return 0.299 * p[..., 0] + 0.587 * p[..., 1] + 0.114 * p[..., 2]


def window_luma(window: FrameWindow) -> np.ndarray:
    """(t, h, w) luma stack for a window."""
    return rec601_luma(window.stack())


def frame_diff_energy(
    window: FrameWindow, luma: np.ndarray | None = None
) -> MotionField:
    """Exponential moving average of absolute luma differences between
    consecutive frames, normalized to [0, 1]."""
    if window.frame_count < 2:
        raise ValueError("window needs at least two frames")
    if luma is None:
        luma = window_luma(window)
    diffs = np.abs(np.diff(luma, axis=0)) / 255.0
    energy = diffs[0]
    for d in diffs[1:]:
        energy = (1.0 - FRAME_DIFF_EMA) * energy + FRAME_DIFF_EMA * d
    return MotionField(
        energy=energy,
        model=BackgroundModelKind.FRAME_DIFF,
        window_index=window.window_index,
    )


class MixtureOfGaussians:
    """Per-pixel adaptive Gaussian mixture over luma.

    K components per pixel; a sample matches the highest-ranked component
    within ``MOG_MATCH_SIGMA`` standard deviations. Matched components move
    toward the sample; an unmatched sample replaces the weakest component
    and marks the pixel foreground. Background components are the smallest
    prefix (ranked by weight/sigma) whose weights sum to at least
    ``MOG_BACKGROUND_WEIGHT``.
    """

    def __init__(self):
        self.means: np.ndarray | None = None
        self.variances: np.ndarray | None = None
        self.weights: np.ndarray | None = None

    def _bootstrap(self, luma: np.ndarray) -> None:
        h, w = luma.shape
        k = MOG_COMPONENTS
        self.means = np.zeros((k, h, w))
        self.variances = np.full((k, h, w), MOG_INITIAL_VARIANCE)
        self.weights = np.zeros((k, h, w))
        self.means[0] = luma
        self.weights[0] = 1.0

    def update(self, luma: np.ndarray) -> np.ndarray:
        """Absorb one frame; returns the {0,1} foreground map."""
        if self.means is None:
            self._bootstrap(luma)
            return np.zeros_like(luma, dtype=np.uint8)
        if luma.shape != self.means.shape[1:]:
            raise ValueError("frame dimensions changed mid-stream")

        alpha = MOG_LEARNING_RATE
        sigma = np.sqrt(self.variances)
        rank = self.weights / sigma  # descending rank order = background first
        order = np.argsort(-rank, axis=0)

        diff = luma[None, :, :] - self.means
        matched_k = np.abs(diff) <= MOG_MATCH_SIGMA * sigma

        # First matching component in rank order, -1 when none match.
        matched_sorted = np.take_along_axis(matched_k, order, axis=0)
        first_pos = np.argmax(matched_sorted, axis=0)
        any_match = matched_sorted.any(axis=0)
        match_idx = np.take_along_axis(order, first_pos[None, :, :], axis=0)[0]
        match_idx = np.where(any_match, match_idx, -1)

        # Background membership: smallest rank prefix reaching the weight sum.
        w_sorted = np.take_along_axis(self.weights, order, axis=0)
        cum_before = np.cumsum(w_sorted, axis=0) - w_sorted
        bg_sorted = cum_before < MOG_BACKGROUND_WEIGHT
        bg_mask = np.empty_like(bg_sorted)
        np.put_along_axis(bg_mask, order, bg_sorted, axis=0)

        k_index = np.arange(MOG_COMPONENTS)[:, None, None]
        is_match = k_index == match_idx[None, :, :]

        foreground = ~any_match | ~np.take_along_axis(
            bg_mask, np.maximum(match_idx, 0)[None, :, :], axis=0
        )[0]
        foreground = foreground.astype(np.uint8)

        # Weight update and matched-component mean/variance tracking.
        self.weights = (1.0 - alpha) * self.weights + alpha * is_match
        rho = alpha
        upd = is_match & any_match[None, :, :]
        self.means = np.where(upd, self.means + rho * diff, self.means)
        self.variances = np.where(
            upd, (1.0 - rho) * self.variances + rho * diff**2, self.variances
        )

        # Unmatched samples replace the weakest component.
        weakest = np.argmin(self.weights, axis=0)
        replace = (k_index == weakest[None, :, :]) & ~any_match[None, :, :]
        self.means = np.where(replace, luma[None, :, :], self.means)
        self.variances = np.where(replace, MOG_INITIAL_VARIANCE, self.variances)
        self.weights = np.where(replace, MOG_REPLACEMENT_WEIGHT, self.weights)

        self.variances = np.maximum(self.variances, MOG_MIN_VARIANCE)
        self.weights /= self.weights.sum(axis=0, keepdims=True)
        return foreground


class ViBe:
    """Per-pixel sample bank over RGB.

    A pixel is background when at least ``VIBE_MIN_MATCHES`` bank samples
    lie within ``VIBE_RADIUS`` (Euclidean RGB). Background pixels refresh
    their own bank and a random neighbor's bank each with probability
    1/``VIBE_SUBSAMPLING``.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.samples: np.ndarray | None = None  # (h, w, n, 3) uint8

    def _bootstrap(self, pixels: np.ndarray) -> None:
        h, w = pixels.shape[:2]
        ys, xs = np.mgrid[0:h, 0:w]
        banks = np.empty((h, w, VIBE_SAMPLES, 3), dtype=np.uint8)
        for n in range(VIBE_SAMPLES):
            dy = self.rng.integers(-1, 2, size=(h, w))
            dx = self.rng.integers(-1, 2, size=(h, w))
            yy = np.clip(ys + dy, 0, h - 1)
            xx = np.clip(xs + dx, 0, w - 1)
            banks[:, :, n] = pixels[yy, xx]
        self.samples = banks

    def update(self, pixels: np.ndarray) -> np.ndarray:
        """Absorb one frame; returns the {0,1} foreground map."""
        if self.samples is None:
            self._bootstrap(pixels)
            return np.zeros(pixels.shape[:2], dtype=np.uint8)
        if pixels.shape[:2] != self.samples.shape[:2]:
            raise ValueError("frame dimensions changed mid-stream")

        h, w = pixels.shape[:2]
        diff = self.samples.astype(np.int16) - pixels[:, :, None, :].astype(np.int16)
        dist2 = np.sum(diff.astype(np.int32) ** 2, axis=3)
        matches = np.sum(dist2 <= VIBE_RADIUS**2, axis=2)
        background = matches >= VIBE_MIN_MATCHES
        foreground = (~background).astype(np.uint8)

        # In-place bank refresh for a random 1/16 of background pixels.
        refresh = background & (self.rng.random((h, w)) < 1.0 / VIBE_SUBSAMPLING)
        ys, xs = np.nonzero(refresh)
        if len(ys):
            slot = self.rng.integers(0, VIBE_SAMPLES, size=len(ys))
            self.samples[ys, xs, slot] = pixels[ys, xs]

        # Neighbor seeding for another random 1/16 of background pixels.
        spread = background & (self.rng.random((h, w)) < 1.0 / VIBE_SUBSAMPLING)
        ys, xs = np.nonzero(spread)
        if len(ys):
            dy = self.rng.integers(-1, 2, size=len(ys))
            dx = self.rng.integers(-1, 2, size=len(ys))
            ny = np.clip(ys + dy, 0, h - 1)
            nx = np.clip(xs + dx, 0, w - 1)
            slot = self.rng.integers(0, VIBE_SAMPLES, size=len(ys))
            self.samples[ny, nx, slot] = pixels[ys, xs]

        return foreground


class ModelBank:
    """Owns the stateful background models for one stream and produces the
    window-level motion energy of whichever model the policy selected."""

    def __init__(self, seed: int = 0):
        self.mog = MixtureOfGaussians()
        self.vibe = ViBe(np.random.default_rng(seed))

    def energy(
        self,
        window: FrameWindow,
        kind: BackgroundModelKind,
        luma: np.ndarray | None = None,
    ) -> MotionField:
        if kind == BackgroundModelKind.FRAME_DIFF:
            return frame_diff_energy(window, luma=luma)
        maps = []
        if kind == BackgroundModelKind.MIXTURE_OF_GAUSSIANS:
            if luma is None:
                luma = window_luma(window)
            for t in range(window.frame_count):
                maps.append(self.mog.update(luma[t]))
        elif kind == BackgroundModelKind.VIBE:
            for frame in window.frames:
                maps.append(self.vibe.update(frame.pixels))
        else:
            raise ValueError(f"unknown model kind {kind}")
        energy = np.mean(np.stack(maps), axis=0)
        return MotionField(
            energy=energy, model=kind, window_index=window.window_index
        )


def stabilization_label_map(config: SceneConfig) -> np.ndarray:
    """Nearest-stabilization-region index for every pixel."""
    regions = config.stabilization_regions
    if not regions:
        raise ValueError("no stabilization regions configured")
    ys, xs = np.mgrid[0 : config.frame_height, 0 : config.frame_width]
    dist = np.full((config.frame_height, config.frame_width), np.inf)
    labels = np.zeros((config.frame_height, config.frame_width), dtype=np.int16)
    for i, r in enumerate(regions):
        cx, cy = r.center
        d = (xs - cx) ** 2 + (ys - cy) ** 2
        closer = d < dist
        labels[closer] = i
        dist[closer] = d[closer]
    return labels


def compute_noise_profile(
    motion: MotionField,
    config: SceneConfig,
    previous: NoiseProfile | None = None,
    label_map: np.ndarray | None = None,
) -> NoiseProfile:
    """Blend per-region mean motion energy into the running noise profile."""
    regions = config.stabilization_regions
    if not regions:
        raise ValueError("no stabilization regions configured")
    if label_map is None:
        label_map = stabilization_label_map(config)
    raw = np.array([float(np.mean(r.crop(motion.energy))) for r in regions])
    if previous is not None:
        means = previous.beta * previous.region_means + (1.0 - previous.beta) * raw
    else:
        means = raw
    return NoiseProfile(
        region_means=means,
        label_map=label_map,
        sigma_g=float(means.max()),
    )


def zero_noise_profile(config: SceneConfig) -> NoiseProfile:
    """All-zero profile used when noise cancellation is disabled."""
    shape = (config.frame_height, config.frame_width)
    return NoiseProfile(
        region_means=np.zeros(1),
        label_map=np.zeros(shape, dtype=np.int16),
        sigma_g=0.0,
    )


def noise_cancelled_score(
    motion: MotionField, noise: NoiseProfile, tau_shake: float
) -> MotionScoreField:
    """Subtract the noise field from raw motion energy; suspend the window
    entirely when global instability exceeds the shake threshold."""
    if not 0.0 < tau_shake <= 1.0:
        raise ValueError("tau_shake must be in (0, 1]")
    if motion.energy.shape != noise.label_map.shape:
        raise ValueError("motion field and noise profile dimensions differ")
    if noise.sigma_g > tau_shake:
        return MotionScoreField(
            scores=np.zeros_like(motion.energy),
            suspended=True,
            window_index=motion.window_index,
        )
    scores = np.maximum(0.0, motion.energy - noise.psi)
    return MotionScoreField(
        scores=scores, suspended=False, window_index=motion.window_index
    )
