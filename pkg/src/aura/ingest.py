"""Frame sources, scene configuration, and fixed 3-second windowing.

File-based sources stand in for live camera streams: a directory of
lexicographically ordered PPM/PNG images, or a single raw RGB24 file with an
``AURARAW`` ASCII header. Corrupt frames are counted and skipped rather than
aborting the stream.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .fusion import HyperParams

WINDOW_SECONDS = 3.0
MIN_FRAME_DIM = 64
MIN_DETECTION_AREA = 9
MAX_SKY_POINTS = 16

RAW_MAGIC = "AURARAW"
_IMAGE_SUFFIXES = (".ppm", ".png")


class ConfigError(ValueError):
    """Scene configuration failed validation."""


class SourceError(RuntimeError):
    """Frame source is unreadable or inconsistent."""


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int
    label: str = ""

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def contains_point(self, px: float, py: float) -> bool:
        return self.x <= px < self.x + self.w and self.y <= py < self.y + self.h

    def intersects(self, other: "Rect") -> bool:
        return not (
            self.x + self.w <= other.x
            or other.x + other.w <= self.x
            or self.y + self.h <= other.y
            or other.y + other.h <= self.y
        )

    def crop(self, pixels: np.ndarray) -> np.ndarray:
        """Slice this rectangle out of an (h, w, ...) array."""
        return pixels[self.y : self.y + self.h, self.x : self.x + self.w]


@dataclass(frozen=True)
class SkyPoint:
    x: int
    y: int
    patch_radius: int = 2


@dataclass(frozen=True)
class Frame:
    stream_id: str
    index: int
    timestamp_ms: int
    pixels: np.ndarray  # (h, w, 3) uint8

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass
class SceneConfig:
    stream_id: str
    fps: float
    frame_width: int
    frame_height: int
    detection_regions: list[Rect]
    stabilization_regions: list[Rect]
    sky_points: list[SkyPoint]
    hyperparameters: HyperParams = field(default_factory=HyperParams)

    def validate(self) -> None:
        if not self.stream_id:
            raise ConfigError("stream_id must be non-empty")
        if not (self.fps > 0 and math.isfinite(self.fps)):
            raise ConfigError(f"fps must be positive, got {self.fps}")
        if self.frame_width < MIN_FRAME_DIM or self.frame_height < MIN_FRAME_DIM:
            raise ConfigError(
                f"frame must be at least {MIN_FRAME_DIM}x{MIN_FRAME_DIM}, "
                f"got {self.frame_width}x{self.frame_height}"
            )
        if not self.detection_regions:
            raise ConfigError("at least one detection region required")
        if not self.sky_points:
            raise ConfigError("sky_points must be non-empty")
        if len(self.sky_points) > MAX_SKY_POINTS:
            raise ConfigError(f"at most {MAX_SKY_POINTS} sky points allowed")

        for rect in self.detection_regions + self.stabilization_regions:
            if rect.w <= 0 or rect.h <= 0:
                raise ConfigError(f"region '{rect.label}' has non-positive size")
            if (
                rect.x < 0
                or rect.y < 0
                or rect.x + rect.w > self.frame_width
                or rect.y + rect.h > self.frame_height
            ):
                raise ConfigError(
                    f"region '{rect.label}' extends outside the "
                    f"{self.frame_width}x{self.frame_height} frame"
                )
        for rect in self.detection_regions:
            if rect.area < MIN_DETECTION_AREA:
                raise ConfigError(
                    f"detection region '{rect.label}' area {rect.area} is below "
                    f"the {MIN_DETECTION_AREA}-pixel minimum"
                )
        combined = self.detection_regions + self.stabilization_regions
        for i in range(len(combined)):
            for j in range(i + 1, len(combined)):
                if combined[i].intersects(combined[j]):
                    raise ConfigError(
                        f"regions '{combined[i].label}' and "
                        f"'{combined[j].label}' overlap"
                    )
        for p in self.sky_points:
            if not (0 <= p.x < self.frame_width and 0 <= p.y < self.frame_height):
                raise ConfigError(f"sky point ({p.x},{p.y}) outside frame")
            if p.patch_radius < 0:
                raise ConfigError("sky point patch_radius must be >= 0")

    @property
    def frames_per_window(self) -> int:
        return frames_per_window(self.fps)

    def to_dict(self) -> dict:
        return {
            "stream_id": self.stream_id,
            "fps": self.fps,
            "frame_width": self.frame_width,
            "frame_height": self.frame_height,
            "detection_regions": [
                {"x": r.x, "y": r.y, "w": r.w, "h": r.h, "label": r.label}
                for r in self.detection_regions
            ],
            "stabilization_regions": [
                {"x": r.x, "y": r.y, "w": r.w, "h": r.h, "label": r.label}
                for r in self.stabilization_regions
            ],
            "sky_points": [
                {"x": p.x, "y": p.y, "patch_radius": p.patch_radius}
                for p in self.sky_points
            ],
            "hyperparameters": self.hyperparameters.to_dict(),
        }


def _rect_from_dict(d: dict, default_label: str) -> Rect:
    try:
        return Rect(
            x=int(d["x"]),
            y=int(d["y"]),
            w=int(d["w"]),
            h=int(d["h"]),
            label=str(d.get("label", default_label)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed rectangle {d!r}: {exc}") from exc


def load_scene_config(document: str | bytes | dict) -> SceneConfig:
    """Parse and eagerly validate a scene configuration JSON document."""
    if isinstance(document, (str, bytes)):
        try:
            data = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    else:
        data = document
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")

    missing = [
        k
        for k in (
            "stream_id",
            "fps",
            "frame_width",
            "frame_height",
            "detection_regions",
            "sky_points",
        )
        if k not in data
    ]
    if missing:
        raise ConfigError(f"config missing required keys: {', '.join(missing)}")

    detection = [
        _rect_from_dict(d, f"det{i}") for i, d in enumerate(data["detection_regions"])
    ]
    stabilization = [
        _rect_from_dict(d, f"sat{i}")
        for i, d in enumerate(data.get("stabilization_regions", []))
    ]
    try:
        sky = [
            SkyPoint(int(p["x"]), int(p["y"]), int(p.get("patch_radius", 2)))
            for p in data["sky_points"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed sky point: {exc}") from exc

    hp_data = data.get("hyperparameters", {})
    try:
        hyper = HyperParams.from_dict(hp_data) if hp_data else HyperParams()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid hyperparameters: {exc}") from exc

    config = SceneConfig(
        stream_id=str(data["stream_id"]),
        fps=float(data["fps"]),
        frame_width=int(data["frame_width"]),
        frame_height=int(data["frame_height"]),
        detection_regions=detection,
        stabilization_regions=stabilization,
        sky_points=sky,
        hyperparameters=hyper,
    )
    config.validate()
    return config


def load_scene_config_file(path: str | Path) -> SceneConfig:
    return load_scene_config(Path(path).read_text())


def frames_per_window(fps: float) -> int:
    """Frames in one 3-second analysis window (rounded up)."""
    count = math.ceil(WINDOW_SECONDS * fps - 1e-9)
    return max(int(count), 2)


@dataclass
class FrameWindow:
    stream_id: str
    window_index: int
    frames: list[Frame]
    partial: bool = False

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def start_timestamp_ms(self) -> int:
        return self.frames[0].timestamp_ms

    def stack(self) -> np.ndarray:
        """Frames as one (t, h, w, 3) uint8 array."""
        return np.stack([f.pixels for f in self.frames])


def window_frames(frames: Iterable[Frame], fps: float) -> Iterator[FrameWindow]:
    """Group frames into contiguous, non-overlapping 3-second windows.

    A trailing group with at least two frames is emitted flagged partial;
    shorter remainders are discarded.
    """
    if fps <= 0:
        raise ValueError("fps must be positive")
    size = frames_per_window(fps)
    batch: list[Frame] = []
    window_index = 0
    stream_id = None
    for frame in frames:
        if stream_id is None:
            stream_id = frame.stream_id
        if batch and (
            frame.pixels.shape != batch[0].pixels.shape
            or frame.timestamp_ms <= batch[-1].timestamp_ms
        ):
            raise SourceError(
                f"frame {frame.index}: dimension or timestamp order violation"
            )
        batch.append(frame)
        if len(batch) == size:
            yield FrameWindow(stream_id, window_index, batch, partial=False)
            batch = []
            window_index += 1
    if len(batch) >= 2:
        yield FrameWindow(stream_id or "", window_index, batch, partial=True)


class FrameSource:
    """Iterable of decoded frames with a dropped/corrupt frame counter."""

    def __init__(self, stream_id: str, fps: float | None):
        self.stream_id = stream_id
        self.fps = fps
        self.dropped_frames = 0

    def __iter__(self) -> Iterator[Frame]:
        raise NotImplementedError


def _downscale(pixels: np.ndarray, factor: int) -> np.ndarray:
    if factor <= 1:
        return pixels
    h, w = pixels.shape[:2]
    h2, w2 = (h // factor) * factor, (w // factor) * factor
    block = pixels[:h2, :w2].reshape(h2 // factor, factor, w2 // factor, factor, 3)
    return block.mean(axis=(1, 3)).round().astype(np.uint8)


def _check_dims(pixels: np.ndarray, expected: tuple[int, int] | None, what: str):
    h, w = pixels.shape[:2]
    if w < MIN_FRAME_DIM or h < MIN_FRAME_DIM:
        raise SourceError(f"{what}: frame {w}x{h} below minimum {MIN_FRAME_DIM}")
    if expected is not None and (w, h) != expected:
        raise SourceError(
            f"{what}: dimensions {w}x{h} do not match expected "
            f"{expected[0]}x{expected[1]}"
        )


class ImageDirectorySource(FrameSource):
    """Lexicographically ordered .ppm / .png files in one directory."""

    def __init__(
        self,
        directory: str | Path,
        expected_dims: tuple[int, int] | None = None,
        fps: float | None = None,
        stream_id: str = "stream",
        downscale: int = 1,
    ):
        super().__init__(stream_id, fps)
        self.directory = Path(directory)
        self.expected_dims = expected_dims
        self.downscale = downscale
        if not self.directory.is_dir():
            raise SourceError(f"not a directory: {self.directory}")
        self.files = sorted(
            p
            for p in self.directory.iterdir()
            if p.suffix.lower() in _IMAGE_SUFFIXES and p.is_file()
        )
        if not self.files:
            raise SourceError(f"no decodable frames in {self.directory}")

    def __iter__(self) -> Iterator[Frame]:
        from PIL import Image, UnidentifiedImageError

        ms_per_frame = 1000.0 / self.fps if self.fps else 1.0
        index = 0
        decoded = 0
        for path in self.files:
            try:
                with Image.open(path) as img:
                    pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
            except (UnidentifiedImageError, OSError, ValueError):
                self.dropped_frames += 1
                continue
            pixels = _downscale(pixels, self.downscale)
            _check_dims(pixels, self.expected_dims, str(path.name))
            yield Frame(
                stream_id=self.stream_id,
                index=index,
                timestamp_ms=int(round(index * ms_per_frame)),
                pixels=pixels,
            )
            index += 1
            decoded += 1
        if decoded == 0:
            raise SourceError(f"no decodable frames in {self.directory}")


_RAW_HEADER_RE = re.compile(
    rb"^AURARAW (\d+) (\d+) (\d+)/(\d+)\n"
)


class RawStreamSource(FrameSource):
    """Single file: ``AURARAW <w> <h> <fps_num>/<fps_den>\\n`` then packed
    RGB24 frames. A trailing partial frame counts as dropped."""

    def __init__(
        self,
        path: str | Path,
        expected_dims: tuple[int, int] | None = None,
        stream_id: str = "stream",
        downscale: int = 1,
    ):
        self.path = Path(path)
        if not self.path.is_file():
            raise SourceError(f"not a file: {self.path}")
        with open(self.path, "rb") as fh:
            head = fh.read(64)
        m = _RAW_HEADER_RE.match(head)
        if not m:
            raise SourceError(f"{self.path}: missing {RAW_MAGIC} header")
        self.raw_width = int(m.group(1))
        self.raw_height = int(m.group(2))
        num, den = int(m.group(3)), int(m.group(4))
        if den == 0 or num == 0:
            raise SourceError(f"{self.path}: invalid fps {num}/{den}")
        super().__init__(stream_id, num / den)
        self._header_len = m.end()
        self.downscale = downscale
        self.expected_dims = expected_dims
        if self.raw_width < MIN_FRAME_DIM or self.raw_height < MIN_FRAME_DIM:
            raise SourceError(f"{self.path}: frame below minimum size")

    def __iter__(self) -> Iterator[Frame]:
        frame_bytes = self.raw_width * self.raw_height * 3
        ms_per_frame = 1000.0 / self.fps
        index = 0
        with open(self.path, "rb") as fh:
            fh.seek(self._header_len)
            while True:
                buf = fh.read(frame_bytes)
                if not buf:
                    break
                if len(buf) < frame_bytes:
                    self.dropped_frames += 1
                    break
                pixels = np.frombuffer(buf, dtype=np.uint8).reshape(
                    self.raw_height, self.raw_width, 3
                )
                pixels = _downscale(pixels, self.downscale)
                _check_dims(pixels, self.expected_dims, f"frame {index}")
                yield Frame(
                    stream_id=self.stream_id,
                    index=index,
                    timestamp_ms=int(round(index * ms_per_frame)),
                    pixels=pixels,
                )
                index += 1
        if index == 0:
            raise SourceError(f"{self.path}: zero decodable frames")


def open_frame_source(
    path_or_endpoint: str | Path,
    expected_dims: tuple[int, int] | None = None,
    fps: float | None = None,
    stream_id: str = "stream",
    downscale: int = 1,
) -> FrameSource:
    """Open a directory of images or a raw framed stream file."""
    path = Path(path_or_endpoint)
    if path.is_dir():
        return ImageDirectorySource(
            path, expected_dims, fps=fps, stream_id=stream_id, downscale=downscale
        )
    if path.is_file():
        return RawStreamSource(
            path, expected_dims, stream_id=stream_id, downscale=downscale
        )
    raise SourceError(f"source does not exist: {path}")


def write_raw_stream(
    path: str | Path,
    frames: Iterable[np.ndarray],
    fps_num: int,
    fps_den: int = 1,
) -> int:
    """Write frames as an ``AURARAW`` file; returns the frame count."""
    count = 0
    with open(path, "wb") as fh:
        header_written = False
        for pixels in frames:
            if not header_written:
                h, w = pixels.shape[:2]
                fh.write(f"{RAW_MAGIC} {w} {h} {fps_num}/{fps_den}\n".encode())
                header_written = True
            fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())
            count += 1
    if count == 0:
        raise ValueError("no frames to write")
    return count


def save_ppm(path: str | Path, pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def save_pgm(path: str | Path, gray: np.ndarray) -> None:
    """8-bit grayscale dump, used by the debug field writers."""
    arr = np.clip(np.asarray(gray), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())
