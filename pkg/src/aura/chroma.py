"""Chromatic analysis: CIELAB conversion, CIEDE2000 distance, sky reference
clustering, per-region chromatic scores, and smoke type classification.

All color math assumes 8-bit sRGB input, D65 illuminant, 2-degree observer.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

# sRGB (D65) -> XYZ, observer 2 deg. Row sums reproduce the white point so
# that (255,255,255) lands on L*=100, a*=b*=0 to float precision.
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_WHITE = np.array([0.95047, 1.0, 1.08883])

_LAB_EPS = (6.0 / 29.0) ** 3
_LAB_SLOPE = (29.0 / 6.0) ** 2 / 3.0  # linear segment slope of the companding


class SmokeType(Enum):
    BLACK = "black"
    WHITE = "white"
    SMOKELESS = "smokeless"


@dataclass(frozen=True)
class LabColor:
    l: float
    a: float
    b: float

    def as_array(self) -> np.ndarray:
        return np.array([self.l, self.a, self.b])


@dataclass(frozen=True)
class ChromaProfile:
    """Dominant ambient-background chrominance: centroid of the largest
    cluster over the sky reference samples."""

    centroid: LabColor
    cluster_sizes: tuple[int, ...]
    sample_count: int
    window_index: int = -1


@dataclass(frozen=True)
class ChromaScoreField:
    """Per-pixel CIEDE2000 distance from the ambient profile over one
    detection region."""

    scores: np.ndarray  # (h, w) float64, >= 0
    region_lab: np.ndarray  # (h, w, 3) window-mean Lab
    window_index: int = -1


def srgb_to_linear(rgb: np.ndarray) -> np.ndarray:
    """Inverse sRGB companding; input in [0, 1]."""
    return np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)


def linear_to_srgb(linear: np.ndarray) -> np.ndarray:
    linear = np.clip(linear, 0.0, None)
    return np.where(
        linear > 0.0031308, 1.055 * linear ** (1.0 / 2.4) - 0.055, 12.92 * linear
    )


def _lab_f(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.where(t > _LAB_EPS, np.cbrt(t), _LAB_SLOPE * t + 4.0 / 29.0)


def _lab_f_inv(ft: np.ndarray) -> np.ndarray:
    ft = np.asarray(ft, dtype=np.float64)
    return np.where(ft > 6.0 / 29.0, ft**3, (ft - 4.0 / 29.0) / _LAB_SLOPE)


def srgb_array_to_lab(pixels: np.ndarray) -> np.ndarray:
    """Convert an (..., 3) uint8 sRGB array to (..., 3) float64 CIELAB."""
    rgb = np.asarray(pixels, dtype=np.float64) / 255.0
    linear = srgb_to_linear(rgb)
    xyz = linear @ _RGB_TO_XYZ.T
    f = _lab_f(xyz / _WHITE)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab

def lab_array_to_srgb(lab: np.ndarray) -> np.ndarray:
    """Convert an (..., 3) CIELAB array back to uint8 sRGB (gamut-clipped)."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)], axis=-1) * _WHITE
    linear = xyz @ _XYZ_TO_RGB.T
    srgb = np.clip(linear_to_srgb(linear), 0.0, 1.0)
    return np.round(srgb * 255.0).astype(np.uint8)


def srgb_to_cielab(r: int, g: int, b: int) -> LabColor:
    """Convert one 8-bit sRGB triple to CIELAB (D65/2deg)."""
    lab = srgb_array_to_lab(np.array([r, g, b], dtype=np.float64))
    return LabColor(float(lab[0]), float(lab[1]), float(lab[2]))


def cielab_to_srgb(color: LabColor) -> tuple[int, int, int]:
    rgb = lab_array_to_srgb(color.as_array())
    return int(rgb[0]), int(rgb[1]), int(rgb[2])


def delta_e_2000(c1, c2) -> float | np.ndarray:
    """CIEDE2000 color difference with kL = kC = kH = 1.

    Accepts LabColor instances or (..., 3) arrays; broadcasts like numpy.
    Includes the full hue rotation term.
    """
    a = c1.as_array() if isinstance(c1, LabColor) else np.asarray(c1, dtype=np.float64)
    b = c2.as_array() if isinstance(c2, LabColor) else np.asarray(c2, dtype=np.float64)
    l1, a1, b1 = a[..., 0], a[..., 1], a[..., 2]
    l2, a2, b2 = b[..., 0], b[..., 1], b[..., 2]

    c1_ab = np.hypot(a1, b1)
    c2_ab = np.hypot(a2, b2)
    c_mean = 0.5 * (c1_ab + c2_ab)
    g = 0.5 * (1.0 - np.sqrt(c_mean**7 / (c_mean**7 + 25.0**7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = np.hypot(a1p, b1)
    c2p = np.hypot(a2p, b2)

    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0
    # atan2(0, 0) is defined as 0 here, matching the reference formulation.

    dlp = l2 - l1
    dcp = c2p - c1p

    zero_chroma = (c1p * c2p) == 0.0
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, dh)
    dh = np.where(dh < -180.0, dh + 360.0, dh)
    dh = np.where(zero_chroma, 0.0, dh)
    dhp = 2.0 * np.sqrt(c1p * c2p) * np.sin(np.radians(dh) / 2.0)

    lp_mean = 0.5 * (l1 + l2)
    cp_mean = 0.5 * (c1p + c2p)

    h_sum = h1p + h2p
    h_diff = np.abs(h1p - h2p)
    hp_mean = np.where(
        h_diff <= 180.0,
        0.5 * h_sum,
        np.where(h_sum < 360.0, 0.5 * (h_sum + 360.0), 0.5 * (h_sum - 360.0)),
    )
    hp_mean = np.where(zero_chroma, h_sum, hp_mean)

    t = (
        1.0
        - 0.17 * np.cos(np.radians(hp_mean - 30.0))
        + 0.24 * np.cos(np.radians(2.0 * hp_mean))
        + 0.32 * np.cos(np.radians(3.0 * hp_mean + 6.0))
        - 0.20 * np.cos(np.radians(4.0 * hp_mean - 63.0))
    )
    dtheta = 30.0 * np.exp(-(((hp_mean - 275.0) / 25.0) ** 2))
    rc = 2.0 * np.sqrt(cp_mean**7 / (cp_mean**7 + 25.0**7))
    rt = -np.sin(np.radians(2.0 * dtheta)) * rc

    sl = 1.0 + (0.015 * (lp_mean - 50.0) ** 2) / np.sqrt(20.0 + (lp_mean - 50.0) ** 2)
    sc = 1.0 + 0.045 * cp_mean
    sh = 1.0 + 0.015 * cp_mean * t

    de = np.sqrt(
        (dlp / sl) ** 2
        + (dcp / sc) ** 2
        + (dhp / sh) ** 2
        + rt * (dcp / sc) * (dhp / sh)
    )
    if de.ndim == 0:
        return float(de)
    return de


def _kmeans_pp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = points[rng.integers(n)]
            continue
        probs = d2 / total
        centers[i] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    k = centers.shape[0]
    labels = np.zeros(points.shape[0], dtype=int)
    for _ in range(max_iter):
        dists = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dists, axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = points[labels == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if shift <= tol:
            break
    dists = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    labels = np.argmin(dists, axis=1)
    inertia = float(np.sum(dists[np.arange(len(labels)), labels]))
    return centers, labels, inertia


def dominant_background_profile(
    samples,
    k: int | None = None,
    seed: int = 0,
    window_index: int = -1,
    n_restarts: int = 16,
) -> ChromaProfile:
    """Cluster sky reference samples in Lab space and return the centroid of
    the largest cluster (ties broken toward the highest-L* centroid).

    k-means with k-means++ seeding, 50-iteration cap, 1e-6 convergence
    tolerance; restarted ``n_restarts`` times keeping the lowest inertia.
    """
    pts = np.array(
        [s.as_array() if isinstance(s, LabColor) else np.asarray(s) for s in samples],
        dtype=np.float64,
    )
    if pts.size == 0:
        raise ValueError("sky reference sample list is empty")
    n = pts.shape[0]
    if k is None:
        k = min(3, n)
    if not 1 <= k <= n:
        raise ValueError(f"cluster count k={k} must be in [1, {n}]")

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_restarts):
        centers = _kmeans_pp_seed(pts, k, rng)
        centers, labels, inertia = _lloyd(pts, centers, max_iter=50, tol=1e-6)
        if best is None or inertia < best[2] - 1e-12:
            best = (centers, labels, inertia)
    centers, labels, _ = best

    sizes = np.bincount(labels, minlength=k)
    occupied = np.flatnonzero(sizes > 0)
    max_size = sizes[occupied].max()
    candidates = [j for j in occupied if sizes[j] == max_size]
    winner = max(candidates, key=lambda j: centers[j][0])

    members = pts[labels == winner]
    centroid = members.mean(axis=0)
    return ChromaProfile(
        centroid=LabColor(float(centroid[0]), float(centroid[1]), float(centroid[2])),
        cluster_sizes=tuple(int(s) for s in sizes[occupied]),
        sample_count=n,
        window_index=window_index,
    )


def window_mean_lab(frames_rgb: np.ndarray) -> np.ndarray:
    """Channel-wise mean Lab over a (t, h, w, 3) uint8 stack."""
    lab = srgb_array_to_lab(frames_rgb)
    return lab.mean(axis=0)


def chromatic_score(
    region_frames: np.ndarray, profile: ChromaProfile, window_index: int = -1
) -> ChromaScoreField:
    """Per-pixel CIEDE2000 distance between the window-mean Lab of a region
    and the ambient profile.

    ``region_frames`` is the (t, h, w, 3) uint8 crop of the detection region
    across the window.
    """
    if region_frames.size == 0:
        raise ValueError("detection region crop is empty")
    mean_lab = window_mean_lab(region_frames)
    scores = delta_e_2000(mean_lab, profile.centroid.as_array())
    return ChromaScoreField(
        scores=np.asarray(scores, dtype=np.float64),
        region_lab=mean_lab,
        window_index=window_index,
    )


def classify_smoke_type(
    field: ChromaScoreField,
    profile: ChromaProfile,
    tau_c: float = 10.0,
    delta_l: float = 12.0,
    delta_c: float = 15.0,
) -> SmokeType:
    """Label an affirmed detection as black/white/smokeless.

    Plume pixels are those with chromatic score above ``tau_c``. A plume
    fraction below 1% classifies as smokeless. Otherwise the lightness shift
    of plume pixels against the ambient profile decides: darker than
    ``delta_l`` -> black; brighter than ``delta_l`` with mean chroma below
    ``delta_c`` -> white; anything else -> smokeless.
    """
    if field.scores.size == 0:
        raise ValueError("empty region")
    mask = field.scores > tau_c
    fraction = float(mask.mean())
    if fraction < 0.01:
        return SmokeType.SMOKELESS
    plume = field.region_lab[mask]
    dl = float(plume[:, 0].mean()) - profile.centroid.l
    chroma = float(np.hypot(plume[:, 1], plume[:, 2]).mean())
    if dl < -delta_l:
        return SmokeType.BLACK
    if dl > delta_l and chroma < delta_c:
        return SmokeType.WHITE
    return SmokeType.SMOKELESS


def classification_features(
    field: ChromaScoreField, profile: ChromaProfile, tau_c: float
) -> tuple[float, float, float]:
    """(plume fraction, lightness shift, mean chroma) of the tau_c plume mask.

    Cached per event so classifier thresholds can be re-tuned from operator
    type corrections without reprocessing video.
    """
    mask = field.scores > tau_c
    fraction = float(mask.mean())
    if not mask.any():
        return fraction, 0.0, 0.0
    plume = field.region_lab[mask]
    dl = float(plume[:, 0].mean()) - profile.centroid.l
    chroma = float(np.hypot(plume[:, 1], plume[:, 2]).mean())
    return fraction, dl, chroma


def apply_type_rule(
    fraction: float, dl: float, chroma: float, delta_l: float, delta_c: float
) -> SmokeType:
    """Decision rule of :func:`classify_smoke_type` on cached features."""
    if fraction < 0.01:
        return SmokeType.SMOKELESS
    if dl < -delta_l:
        return SmokeType.BLACK
    if dl > delta_l and chroma < delta_c:
        return SmokeType.WHITE
    return SmokeType.SMOKELESS
