"""Latitude-corrected patch sampling and dataset assembly.

The world is equirectangular, so east-west ground distance per pixel shrinks
by cos(latitude).  Each crop is taken ``1/cos(lat)`` times wider than tall
and area-averaged back down to a square, so features keep their ground size.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import mpmath
import numpy as np

from . import labeler, netpbm
from .labeler import LabelerConfig, TerrainClass
from .worldgen import (DegenerateRangeError, HeightField, WorldRaster, height_to_image,
                       hillshade, image_to_height, render_terrain)

log = logging.getLogger(__name__)

MAX_CENTER_DRAWS = 1000
MAX_DRAWS_PER_PATCH = 10000


class ExhaustionError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    n_patches: int = 5000
    base: int = 64
    lat_max: float = 80.0
    ocean_reject_threshold: float = 0.9
    sun_azimuth: float = 315.0
    sun_altitude: float = 45.0
    seed: int = 0

    def validate(self):
        if self.n_patches < 1:
            raise ValueError("n_patches must be >= 1")
        if self.base < 16 or self.base % 2:
            raise ValueError("base must be even and >= 16")
        if not 0 < self.ocean_reject_threshold <= 1:
            raise ValueError("ocean_reject_threshold must lie in (0, 1]")
        if not 0 < self.lat_max < 90:
            raise ValueError("lat_max must lie in (0, 90)")


@dataclass
class Patch:
    terrain: np.ndarray   # (base, base, 3) uint8
    height: np.ndarray    # (base, base) meters
    mask: np.ndarray      # (base, base) class indices
    center_lat: float
    center_lon: float
    rescale_factor: float
    source_seed: int
    moisture: np.ndarray | None = field(default=None, repr=False)


def rescale_factor(lat: float, lat_max: float = 80.0) -> float:
    """``1/cos(lat)``, correctly rounded (so 60 degrees gives exactly 2.0)."""
    if not lat_max < 90:
        raise ValueError("lat_max must be below 90 degrees")
    if abs(lat) > lat_max:
        raise ValueError(f"|lat| = {abs(lat)} exceeds lat_max = {lat_max}")
    with mpmath.workdps(40):
        return float(mpmath.sec(mpmath.radians(mpmath.mpf(lat))))


def crop_width(base: int, factor: float) -> int:
    return int(np.floor(base * factor + 0.5))


def area_resample_columns(grid: np.ndarray, out_width: int) -> np.ndarray:
    """Box-filter ``grid`` horizontally down to ``out_width`` columns."""
    in_width = grid.shape[1]
    if in_width == out_width:
        return grid.copy()
    edges_in = np.arange(in_width + 1, dtype=np.float64)
    edges_out = np.arange(out_width + 1, dtype=np.float64) * in_width / out_width
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    weights = np.clip(hi - lo, 0.0, None)
    weights /= weights.sum(axis=1, keepdims=True)
    return grid @ weights.T


def nearest_resample_columns(grid: np.ndarray, out_width: int) -> np.ndarray:
    in_width = grid.shape[1]
    src = np.floor((np.arange(out_width) + 0.5) * in_width / out_width).astype(np.intp)
    return grid[:, np.minimum(src, in_width - 1)]


def window_center_lat(world: WorldRaster, top: int, base: int) -> float:
    return float(world.lat_of_row(top + (base - 1) / 2.0))


def crop_window(world: WorldRaster, top: int, left: int, base: int, lat_max: float):
    """Crop and rescale one window; returns (height, moisture, lat, lon, factor).

    Columns wrap around the antimeridian.
    """
    lat = window_center_lat(world, top, base)
    factor = rescale_factor(lat, lat_max)
    wc = crop_width(base, factor)
    h, w = world.shape
    if wc > w or top < 0 or top + base > h:
        raise ValueError("window does not fit in the world")
    cols = (left + np.arange(wc)) % w
    rows = slice(top, top + base)
    elev = area_resample_columns(world.height_field.elevation[rows][:, cols], base)
    moist = area_resample_columns(world.moisture[rows][:, cols], base)
    lon = float(world.lon_of_col(left + (wc - 1) / 2.0))
    lon = (lon + 180.0) % 360.0 - 180.0
    return elev, moist, lat, lon, factor


def draw_window(world: WorldRaster, rng: np.random.Generator, cfg: SamplerConfig):
    h, w = world.shape
    if h < cfg.base:
        raise ExhaustionError("world is shorter than one patch")
    for _ in range(MAX_CENTER_DRAWS):
        top = int(rng.integers(0, h - cfg.base + 1))
        left = int(rng.integers(0, w))
        lat = window_center_lat(world, top, cfg.base)
        if abs(lat) > cfg.lat_max:
            continue
        if crop_width(cfg.base, rescale_factor(lat, cfg.lat_max)) > w:
            continue
        return top, left
    raise ExhaustionError(f"no valid patch center after {MAX_CENTER_DRAWS} draws")


def label_patch(world: WorldRaster, elev, moist, lat, lon, factor, jitter_seed: int,
                cfg: SamplerConfig, labeler_cfg: LabelerConfig) -> Patch:
    rng = np.random.default_rng([labeler_cfg.seed, jitter_seed])
    mask = labeler.pseudo_label(elev, moist, lat, labeler_cfg, rng)
    hf = HeightField(elev, world.height_field.cell_size)
    shade = hillshade(hf, cfg.sun_azimuth, cfg.sun_altitude)
    terrain = render_terrain(hf, mask, shade)
    return Patch(terrain, elev, mask, lat, lon, factor, jitter_seed, moist)


def sample_patch(world: WorldRaster, rng: np.random.Generator, cfg: SamplerConfig,
                 labeler_cfg: LabelerConfig | None = None) -> Patch:
    labeler_cfg = labeler_cfg or LabelerConfig()
    top, left = draw_window(world, rng, cfg)
    jitter_seed = int(rng.integers(0, 2**63))
    elev, moist, lat, lon, factor = crop_window(world, top, left, cfg.base, cfg.lat_max)
    return label_patch(world, elev, moist, lat, lon, factor, jitter_seed, cfg, labeler_cfg)


def is_ocean_only(mask, threshold: float) -> bool:
    mask = np.asarray(mask)
    return bool(np.count_nonzero(mask == TerrainClass.WATER) > threshold * mask.size)


def patch_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def accepted_patch(world: WorldRaster, index: int, cfg: SamplerConfig,
                   labeler_cfg: LabelerConfig) -> Patch:
    """Draw from stream ``index`` until a crop passes the ocean filter."""
    rng = patch_stream(cfg.seed, index)
    for _ in range(MAX_DRAWS_PER_PATCH):
        top, left = draw_window(world, rng, cfg)
        jitter_seed = int(rng.integers(0, 2**63))
        elev, moist, lat, lon, factor = crop_window(world, top, left, cfg.base, cfg.lat_max)
        if elev.max() <= 0 and cfg.ocean_reject_threshold < 1:
            # every centroid has e <= 0, so the label is all water
            continue
        patch = label_patch(world, elev, moist, lat, lon, factor, jitter_seed, cfg, labeler_cfg)
        if not is_ocean_only(patch.mask, cfg.ocean_reject_threshold):
            return patch
    raise ExhaustionError(
        f"patch {index}: no acceptable crop within {MAX_DRAWS_PER_PATCH} draws")


def build_dataset(world: WorldRaster, cfg: SamplerConfig, labeler_cfg: LabelerConfig,
                  workers: int = 1) -> list[Patch]:
    cfg.validate()
    labeler_cfg.validate()

    def one(i):
        return accepted_patch(world, i, cfg, labeler_cfg)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, range(cfg.n_patches)))
    return [one(i) for i in range(cfg.n_patches)]


MANIFEST_HEADER = "# index\tcenter_lat\tcenter_lon\trescale_factor\tlabel_jitter_seed\n"


def _encode_height(elev):
    try:
        return height_to_image(HeightField(elev))
    except DegenerateRangeError:
        # flat grid: an all-zero image with min = max restores the constant
        return np.zeros(np.shape(elev), dtype=np.uint16), float(elev.flat[0]), float(elev.flat[0])


def write_dataset(out_dir, world: WorldRaster, patches: list[Patch]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    img, lo, hi = _encode_height(world.height_field.elevation)
    netpbm.write_netpbm(os.path.join(out_dir, "world_height.pgm"), img, 65535)
    netpbm.write_meta(os.path.join(out_dir, "world_height.meta"), {
        "min_elevation": repr(lo),
        "max_elevation": repr(hi),
        "lat_extent": f"{-world.lat_max!r} {world.lat_max!r}",
        "lon_extent": "-180.0 180.0",
        "seed": world.seed,
    })
    lines = [MANIFEST_HEADER]
    for i, p in enumerate(patches):
        name = f"{i:05d}"
        netpbm.write_netpbm(os.path.join(out_dir, f"terrain_{name}.ppm"), p.terrain)
        himg, plo, phi = _encode_height(p.height)
        netpbm.write_netpbm(os.path.join(out_dir, f"height_{name}.pgm"), himg, 65535)
        netpbm.write_meta(os.path.join(out_dir, f"height_{name}.meta"), {
            "min_elevation": repr(plo),
            "max_elevation": repr(phi),
            "center_lat": repr(p.center_lat),
            "center_lon": repr(p.center_lon),
        })
        netpbm.write_netpbm(os.path.join(out_dir, f"labels_{name}.pgm"), p.mask.astype(np.uint8))
        lines.append(f"{i}\t{p.center_lat!r}\t{p.center_lon!r}\t{p.rescale_factor!r}\t"
                     f"{p.source_seed}\n")
    netpbm.atomic_write_bytes(os.path.join(out_dir, "manifest.txt"), "".join(lines).encode())
    log.info("wrote %d patches to %s", len(patches), out_dir)


@dataclass
class ManifestEntry:
    index: int
    center_lat: float
    center_lon: float
    rescale_factor: float
    label_jitter_seed: int


def read_manifest(data_dir) -> list[ManifestEntry]:
    entries = []
    with open(os.path.join(data_dir, "manifest.txt"), encoding="utf-8") as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            i, lat, lon, f, seed = line.split("\t")
            entries.append(ManifestEntry(int(i), float(lat), float(lon), float(f), int(seed)))
    return entries


def load_patch(data_dir, entry: ManifestEntry) -> Patch:
    """Read back one patch triplet (terrain, height, labels)."""
    name = f"{entry.index:05d}"
    terrain = netpbm.read_ppm(os.path.join(data_dir, f"terrain_{name}.ppm"))
    meta = netpbm.read_meta(os.path.join(data_dir, f"height_{name}.meta"))
    height = image_to_height(netpbm.read_pgm(os.path.join(data_dir, f"height_{name}.pgm")),
                             float(meta["min_elevation"]), float(meta["max_elevation"]))
    mask = labeler.check_mask(netpbm.read_pgm(os.path.join(data_dir, f"labels_{name}.pgm")))
    return Patch(terrain, height, mask, entry.center_lat, entry.center_lon,
                 entry.rescale_factor, entry.label_jitter_seed)


def load_dataset(data_dir) -> list[Patch]:
    return [load_patch(data_dir, e) for e in read_manifest(data_dir)]
