"""Pseudo-labels for terrain patches.

Per-pixel features are clustered with k-means, each cluster centroid is
classified by a fixed rule table, and the resulting mask is smoothed with a
categorical majority (mode) filter.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

ELEVATION_SCALE = 6000.0


class TerrainClass(enum.IntEnum):
    WATER = 0
    GRASSLAND = 1
    FOREST = 2
    HILLS = 3
    DESERT = 4
    MOUNTAIN = 5
    TUNDRA = 6


N_CLASSES = len(TerrainClass)
CLASS_NAMES = [c.name.lower() for c in TerrainClass]

# class-ordered render colors of the terrain map
TERRAIN_PALETTE = np.array([
    (17, 141, 215),
    (225, 227, 155),
    (127, 173, 123),
    (185, 122, 87),
    (230, 200, 181),
    (150, 150, 150),
    (193, 190, 175),
], dtype=np.uint8)

# index 0 is background, index c + 1 is class c
BINARY_PALETTE = np.array([
    (0, 0, 0),
    (0, 0, 255),
    (0, 255, 0),
    (0, 255, 255),
    (255, 0, 0),
    (255, 255, 0),
    (255, 0, 255),
    (255, 255, 255),
], dtype=np.uint8)

BACKGROUND = -1


class DecodeError(ValueError):
    pass


def check_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"label mask must be 2-D, got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() >= N_CLASSES):
        raise ValueError("label mask values must lie in 0..6")
    return mask.astype(np.uint8, copy=False)


@dataclass
class Thresholds:
    slope_hill: float = 0.15
    slope_mountain: float = 0.45
    elev_high: float = 1500.0
    moisture_dry: float = 0.25
    moisture_wet: float = 0.65
    tundra_lat: float = 66.5

    def validate(self):
        if not self.slope_hill < self.slope_mountain:
            raise ValueError("slope_hill must be below slope_mountain")
        if not self.moisture_dry < self.moisture_wet:
            raise ValueError("moisture_dry must be below moisture_wet")


@dataclass
class LabelerConfig:
    k: int = 7
    kmeans_iters: int = 20
    thresholds: Thresholds = field(default_factory=Thresholds)
    jitter_frac: float = 0.10
    filter_window: int = 5
    filter_passes: int = 1
    seed: int = 0

    def validate(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.kmeans_iters < 1:
            raise ValueError("kmeans_iters must be >= 1")
        if not 0 < self.jitter_frac < 0.5:
            raise ValueError("jitter_frac must lie in (0, 0.5)")
        if self.filter_window < 3 or self.filter_window % 2 == 0:
            raise ValueError("filter_window must be odd and >= 3")
        self.thresholds.validate()


def slope_magnitude(elevation: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude per pixel (one-sided at borders)."""
    elevation = np.asarray(elevation, dtype=np.float64)
    if min(elevation.shape) < 2:
        return np.zeros_like(elevation)
    drow, dcol = np.gradient(elevation)
    return np.hypot(drow, dcol)


def pixel_features(heights, moisture, center_lat: float) -> np.ndarray:
    """Feature grid ``(H, W, 4)``: elevation, relative slope, latitude, moisture.

    Slope is normalized by its 99th percentile over the patch so the steepest
    percent saturates at 1; a patch without relief gets slope 0 everywhere.
    """
    heights = np.asarray(heights, dtype=np.float64)
    moisture = np.asarray(moisture, dtype=np.float64)
    if heights.shape != moisture.shape:
        raise ValueError("heights and moisture must have the same shape")
    e = np.clip(heights / ELEVATION_SCALE, -1.0, 1.0)
    slope = slope_magnitude(heights)
    p99 = np.percentile(slope, 99) if slope.size else 0.0
    s = np.clip(slope / p99, 0.0, 1.0) if p99 > 0 else np.zeros_like(slope)
    phi = np.full_like(e, min(abs(center_lat) / 90.0, 1.0))
    m = np.clip(moisture, 0.0, 1.0)
    return np.stack([e, s, phi, m], axis=-1)


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    k: int
    inertia: list[float]  # within-cluster squared distance after each iteration


def _sq_dists(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def kmeans(features, k: int, iters: int, rng: np.random.Generator) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    If fewer than ``k`` distinct points exist, ``k`` is reduced to that
    count; the effective value is returned in the result.
    """
    points = np.asarray(features, dtype=np.float64)
    points = points.reshape(len(points), -1) if points.ndim != 2 else points
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(points)
    distinct = len(np.unique(points, axis=0)) if n else 0
    if distinct == 0:
        raise ValueError("kmeans needs at least one point")
    k = min(k, distinct)

    # k-means++ seeding
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        # zero-weight points (already chosen) can never be drawn with side="right"
        cum = np.cumsum(closest)
        idx = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), n - 1)
        centroids[j] = points[idx]
        closest = np.minimum(closest, ((points - centroids[j]) ** 2).sum(axis=1))

    assign = np.argmin(_sq_dists(points, centroids), axis=1)
    inertia = []
    for _ in range(iters):
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
            else:
                # reseed with the point worst served by its current centroid
                d = ((points - centroids[assign]) ** 2).sum(axis=1)
                far = int(np.argmax(d))
                centroids[j] = points[far]
                assign[far] = j
        d2 = _sq_dists(points, centroids)
        new_assign = np.argmin(d2, axis=1)
        inertia.append(float(d2[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    return KMeansResult(assign, centroids, k, inertia)


def classify_centroid(c, t: Thresholds) -> TerrainClass:
    e, s, phi, m = (float(v) for v in c)
    if e <= 0:
        return TerrainClass.WATER
    if phi * 90.0 >= t.tundra_lat:
        return TerrainClass.TUNDRA
    if s >= t.slope_mountain and e * ELEVATION_SCALE >= t.elev_high:
        return TerrainClass.MOUNTAIN
    if s >= t.slope_hill:
        return TerrainClass.HILLS
    if m <= t.moisture_dry:
        return TerrainClass.DESERT
    if m >= t.moisture_wet:
        return TerrainClass.FOREST
    return TerrainClass.GRASSLAND


def jitter_thresholds(t: Thresholds, jitter_frac: float, rng: np.random.Generator) -> Thresholds:
    names = [f.name for f in dataclasses.fields(t)]
    draws = rng.uniform(1.0 - jitter_frac, 1.0 + jitter_frac, size=len(names))
    out = Thresholds(**{n: getattr(t, n) * float(d) for n, d in zip(names, draws)})
    if out.slope_hill > out.slope_mountain:
        out.slope_hill, out.slope_mountain = out.slope_mountain, out.slope_hill
    if out.moisture_dry > out.moisture_wet:
        out.moisture_dry, out.moisture_wet = out.moisture_wet, out.moisture_dry
    return out


def mode_filter(mask, window: int = 5, passes: int = 1) -> np.ndarray:
    """Majority filter over a square window; ties go to the lowest class.

    Windows are truncated at the borders rather than padded.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    mask = check_mask(mask)
    if mask.size == 0:
        return mask.copy()
    r = window // 2
    h, w = mask.shape
    for _ in range(passes):
        onehot = (mask[None, :, :] == np.arange(N_CLASSES)[:, None, None]).astype(np.int32)
        # box sums via a zero-bordered summed-area table give truncated-window counts
        sat = np.zeros((N_CLASSES, h + 1, w + 1), dtype=np.int32)
        sat[:, 1:, 1:] = onehot.cumsum(axis=1).cumsum(axis=2)
        rows = np.arange(h)
        cols = np.arange(w)
        r0 = np.clip(rows - r, 0, h)[:, None]
        r1 = np.clip(rows + r + 1, 0, h)[:, None]
        c0 = np.clip(cols - r, 0, w)[None, :]
        c1 = np.clip(cols + r + 1, 0, w)[None, :]
        counts = sat[:, r1, c1] - sat[:, r0, c1] - sat[:, r1, c0] + sat[:, r0, c0]
        mask = np.argmax(counts, axis=0).astype(np.uint8)  # argmax keeps the first max
    return mask


def pseudo_label(heights, moisture, center_lat: float, cfg: LabelerConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Cluster, classify and mode-filter one patch into a label mask."""
    feats = pixel_features(heights, moisture, center_lat)
    h, w, _ = feats.shape
    thresholds = jitter_thresholds(cfg.thresholds, cfg.jitter_frac, rng)
    result = kmeans(feats.reshape(-1, 4), cfg.k, cfg.kmeans_iters, rng)
    cluster_class = np.array([classify_centroid(c, thresholds) for c in result.centroids],
                             dtype=np.uint8)
    mask = cluster_class[result.assignments].reshape(h, w)
    return mode_filter(mask, cfg.filter_window, cfg.filter_passes)


def mask_to_binary_image(mask, cls: int) -> np.ndarray:
    mask = check_mask(mask)
    img = np.zeros(mask.shape + (3,), dtype=np.uint8)
    img[mask == int(cls)] = BINARY_PALETTE[int(cls) + 1]
    return img


def colorize_mask(mask) -> np.ndarray:
    """Full-color image of a mask in the binary-mask palette."""
    return BINARY_PALETTE[check_mask(mask).astype(np.intp) + 1]


def decode_mask_rgb(image, palette=BINARY_PALETTE, offset: int = -1) -> np.ndarray:
    """Map every pixel back to its palette index plus ``offset``.

    With the default binary-mask palette, background decodes to -1 and
    class ``c`` to ``c``.  Pass ``TERRAIN_PALETTE, offset=0`` for the
    terrain colors.  Non-palette colors raise DecodeError naming the pixel.
    """
    image = np.asarray(image)
    palette = np.asarray(palette, dtype=np.int64)
    if image.size == 0:
        return np.zeros(image.shape[:2], dtype=np.int16)
    packed = (image[..., 0].astype(np.int64) << 16) | (image[..., 1].astype(np.int64) << 8) \
        | image[..., 2].astype(np.int64)
    keys = (palette[:, 0] << 16) | (palette[:, 1] << 8) | palette[:, 2]
    order = np.argsort(keys)
    pos = np.clip(np.searchsorted(keys[order], packed), 0, len(keys) - 1)
    found = keys[order][pos] == packed
    if not found.all():
        y, x = np.argwhere(~found)[0]
        raise DecodeError(
            f"pixel (row={y}, col={x}) has color {tuple(int(v) for v in image[y, x])} "
            "not in palette")
    return (order[pos] + offset).astype(np.int16)
