"""Per-stream processing pipeline: windows in, detection events out.

Each window flows through model selection, motion energy, noise
cancellation, the chromatic profile and scores, normalization, fusion, and
hysteresis. Raw evidence is cached so the adaptation layer can replay
decisions without reprocessing video.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .automl import ScoreCacheRow
from .chroma import (
    ChromaProfile,
    chromatic_score,
    classification_features,
    classify_smoke_type,
    dominant_background_profile,
    srgb_array_to_lab,
)
from .fusion import (
    DetectionEvent,
    HysteresisTracker,
    HyperParams,
    ScoreNormalizer,
    Verdict,
    fuse,
    region_mean,
)
from .ingest import FrameWindow, SceneConfig, save_pgm
from .motion import (
    ModelBank,
    MotionField,
    MotionScoreField,
    NoiseProfile,
    compute_noise_profile,
    noise_cancelled_score,
    stabilization_label_map,
    window_luma,
    zero_noise_profile,
)
from .policy import PolicyParams, encode_state, neutral_state, select_model

logger = logging.getLogger(__name__)


@dataclass
class WindowResult:
    events: list[DetectionEvent]
    cache_rows: list[ScoreCacheRow]
    motion: MotionField
    noise: NoiseProfile
    score: MotionScoreField
    profile: ChromaProfile


def sky_reference_samples(window: FrameWindow, config: SceneConfig) -> list[np.ndarray]:
    """One window-mean Lab sample per configured sky point patch."""
    stack = window.stack()
    samples = []
    for p in config.sky_points:
        r = p.patch_radius
        y0, y1 = max(0, p.y - r), min(window.height, p.y + r + 1)
        x0, x1 = max(0, p.x - r), min(window.width, p.x + r + 1)
        patch = stack[:, y0:y1, x0:x1]
        lab = srgb_array_to_lab(patch)
        samples.append(lab.reshape(-1, 3).mean(axis=0))
    return samples


class StreamPipeline:
    """Owns all per-stream state: model bank, noise profile, normalizers,
    hysteresis trackers, and the policy state vector."""

    def __init__(
        self,
        config: SceneConfig,
        hyperparams: Callable[[], HyperParams] | None = None,
        policy: Callable[[], PolicyParams] | None = None,
        policy_mode: Callable[[], str] | None = None,
        seed: int = 0,
        snc_enabled: bool = True,
        start_hour: float = 12.0,
        store=None,
        dump_motion: str | Path | None = None,
        dump_chroma: str | Path | None = None,
    ):
        config.validate()
        self.config = config
        self._hyperparams = hyperparams or (lambda: config.hyperparameters)
        self._policy = policy or (lambda: PolicyParams())
        self._policy_mode = policy_mode
        self.snc_enabled = snc_enabled
        self.start_hour = start_hour
        self.store = store
        self.dump_motion = Path(dump_motion) if dump_motion else None
        self.dump_chroma = Path(dump_chroma) if dump_chroma else None

        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.models = ModelBank(seed=seed)
        self.label_map = stabilization_label_map(config) if (
            config.stabilization_regions
        ) else None
        self.noise: NoiseProfile | None = None
        self.prev_state = neutral_state()
        self.norm_m = {
            r.label: ScoreNormalizer.for_motion() for r in config.detection_regions
        }
        self.norm_c = {
            r.label: ScoreNormalizer.for_chroma() for r in config.detection_regions
        }
        self.trackers = {
            r.label: HysteresisTracker() for r in config.detection_regions
        }
        self.windows_processed = 0

    def _wall_hour(self, timestamp_ms: int) -> float:
        return (self.start_hour + timestamp_ms / 3_600_000.0) % 24.0

    def process_window(self, window: FrameWindow) -> WindowResult:
        h = self._hyperparams()
        params = self._policy()
        mode = self._policy_mode() if self._policy_mode else None
        luma = window_luma(window)

        kind, logp = select_model(params, self.prev_state, rng=self.rng, mode=mode)
        motion = self.models.energy(window, kind, luma=luma)

        if self.snc_enabled and self.config.stabilization_regions:
            self.noise = compute_noise_profile(
                motion, self.config, previous=self.noise, label_map=self.label_map
            )
            noise = self.noise
            score = noise_cancelled_score(motion, noise, h.tau_shake)
            ungated = np.maximum(0.0, motion.energy - noise.psi)
        else:
            noise = zero_noise_profile(self.config)
            score = MotionScoreField(
                scores=motion.energy.copy(),
                suspended=False,
                window_index=window.window_index,
            )
            ungated = motion.energy

        samples = sky_reference_samples(window, self.config)
        profile = dominant_background_profile(
            samples,
            k=min(3, len(samples)),
            seed=self.seed + window.window_index,
            window_index=window.window_index,
        )

        hour = self._wall_hour(window.start_timestamp_ms)
        state = encode_state(window, noise, motion, hour, luma=luma)

        stack = window.stack()
        events: list[DetectionEvent] = []
        rows: list[ScoreCacheRow] = []
        for region in self.config.detection_regions:
            raw_m = float(np.mean(region.crop(ungated)))
            gated_m = 0.0 if score.suspended else raw_m
            region_stack = stack[
                :, region.y : region.y + region.h, region.x : region.x + region.w
            ]
            field = chromatic_score(
                region_stack, profile, window_index=window.window_index
            )
            raw_c = region_mean(field.scores)

            s_m = self.norm_m[region.label].normalize(gated_m)
            s_c = self.norm_c[region.label].normalize(raw_c)
            p = fuse(s_m, s_c, h)
            verdict = self.trackers[region.label].update(p, h.p_th)

            fraction, dl, plume_chroma = classification_features(
                field, profile, h.tau_c
            )
            smoke_type = None
            if verdict == Verdict.PLUME_DETECTED:
                smoke_type = classify_smoke_type(
                    field, profile, h.tau_c, h.delta_l, h.delta_c
                ).value

            event = DetectionEvent(
                stream_id=window.stream_id,
                region_label=region.label,
                window_index=window.window_index,
                timestamp_ms=window.start_timestamp_ms,
                s_m=s_m,
                s_c=s_c,
                probability=p,
                verdict=verdict,
                smoke_type=smoke_type,
                suspended=score.suspended,
                hyperparams_version=h.version,
                sigma_g=noise.sigma_g,
            )
            row = ScoreCacheRow(
                stream_id=window.stream_id,
                region_label=region.label,
                window_index=window.window_index,
                timestamp_ms=window.start_timestamp_ms,
                raw_m=raw_m,
                raw_c=raw_c,
                sigma_g=noise.sigma_g,
                suspended=score.suspended,
                model=int(kind),
                state=[float(v) for v in state],
                plume_fraction=fraction,
                plume_dl=dl,
                plume_chroma=plume_chroma,
            )
            events.append(event)
            rows.append(row)
            if self.dump_chroma:
                self._dump_chroma_field(field, region.label, window.window_index)

        if self.dump_motion:
            self._dump_motion_fields(motion, noise, score, window.window_index)
        if self.store is not None:
            for event in events:
                self.store.append_event(event)
            for row in rows:
                self.store.append_score_row(row)
            self._save_thumbnail(window)

        self.prev_state = state
        self.windows_processed += 1
        return WindowResult(
            events=events,
            cache_rows=rows,
            motion=motion,
            noise=noise,
            score=score,
            profile=profile,
        )

    def run(self, windows: Iterable[FrameWindow]) -> Iterator[WindowResult]:
        for window in windows:
            yield self.process_window(window)

    # -- debug output ---------------------------------------------------------

    def _dump_motion_fields(self, motion, noise, score, window_index: int) -> None:
        self.dump_motion.mkdir(parents=True, exist_ok=True)
        base = self.dump_motion / f"w{window_index:05d}"
        save_pgm(f"{base}_energy.pgm", motion.energy * 255.0)
        save_pgm(f"{base}_noise.pgm", noise.psi * 255.0)
        save_pgm(f"{base}_score.pgm", score.scores * 255.0)

    def _dump_chroma_field(self, field, region_label: str, window_index: int) -> None:
        self.dump_chroma.mkdir(parents=True, exist_ok=True)
        base = self.dump_chroma / f"w{window_index:05d}_{region_label}"
        peak = float(field.scores.max())
        scale = 255.0 / peak if peak > 0 else 1.0
        save_pgm(f"{base}_chroma.pgm", field.scores * scale)
        Path(f"{base}_chroma.txt").write_text(
            f"scale {scale:.6f} units_per_level {1.0 / scale if scale else 0:.6f}\n"
        )

    def _save_thumbnail(self, window: FrameWindow) -> None:
        from PIL import Image, ImageDraw

        frame = window.frames[window.frame_count // 2]
        img = Image.fromarray(frame.pixels)
        draw = ImageDraw.Draw(img)
        for r in self.config.detection_regions:
            draw.rectangle([r.x, r.y, r.x + r.w - 1, r.y + r.h - 1], outline=(255, 80, 0))
        for r in self.config.stabilization_regions:
            draw.rectangle([r.x, r.y, r.x + r.w - 1, r.y + r.h - 1], outline=(0, 120, 255))
        for p in self.config.sky_points:
            draw.ellipse([p.x - 2, p.y - 2, p.x + 2, p.y + 2], outline=(0, 255, 255))
        path = self.store.thumbnail_path(window.stream_id, window.window_index)
        img.save(path, format="JPEG", quality=80)
