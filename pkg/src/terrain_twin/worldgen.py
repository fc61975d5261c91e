"""Procedural world synthesis: fractal value-noise height and moisture,
Horn-style hillshade, palette rendering and 16-bit height encoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labeler import TERRAIN_PALETTE, TerrainClass, check_mask

MIN_ELEVATION = -4000.0
MAX_ELEVATION = 6000.0
AMBIENT = 0.4

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_K_SEED = np.uint64(0xD6E8FEB86659FD93)
_K_CHAN = np.uint64(0xA0761D6478BD642F)
_K_OCT = np.uint64(0xE7037ED1A0B428DB)
_K_X = np.uint64(0x8EBC6AF09C88C6E3)
_K_Y = np.uint64(0x589965CC75374CC3)

HEIGHT_CHANNEL = 0
MOISTURE_CHANNEL = 1


class DegenerateRangeError(ValueError):
    pass


@dataclass
class HeightField:
    elevation: np.ndarray  # (height, width) meters, sea level = 0
    cell_size: float = 1000.0

    def __post_init__(self):
        self.elevation = np.asarray(self.elevation, dtype=np.float64)
        if self.elevation.ndim != 2:
            raise ValueError("elevation must be a 2-D grid")

    @property
    def height(self) -> int:
        return self.elevation.shape[0]

    @property
    def width(self) -> int:
        return self.elevation.shape[1]


@dataclass
class WorldRaster:
    height_field: HeightField
    moisture: np.ndarray
    lat_max: float = 80.0
    seed: int = 0

    def __post_init__(self):
        if self.moisture.shape != self.height_field.elevation.shape:
            raise ValueError("moisture and elevation grids differ in shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height_field.elevation.shape

    @property
    def deg_per_row(self) -> float:
        return 2.0 * self.lat_max / (self.shape[0] - 1)

    @property
    def deg_per_col(self) -> float:
        return 360.0 / self.shape[1]

    def lat_of_row(self, row):
        return self.lat_max - np.asarray(row, dtype=np.float64) * self.deg_per_row

    def lon_of_col(self, col):
        return -180.0 + np.asarray(col, dtype=np.float64) * self.deg_per_col


def _mix(z):
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def lattice_values(seed: int, channel: int, octave: int, ix, iy) -> np.ndarray:
    """Uniform [0, 1) pseudo-random value at each integer lattice point."""
    ix = np.asarray(ix, dtype=np.int64).astype(np.uint64)
    iy = np.asarray(iy, dtype=np.int64).astype(np.uint64)
    key = ((seed * int(_K_SEED) + channel * int(_K_CHAN) + octave * int(_K_OCT))
           & 0xFFFFFFFFFFFFFFFF)
    z = _mix(np.uint64(key) ^ (ix * _K_X) ^ (iy * _K_Y))
    return (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def octave_cells(width: int, height: int, base_cells: int, octave: int) -> tuple[int, int]:
    cx = base_cells << octave
    cy = max(1, (cx * height + width // 2) // width)
    return cx, cy


def noise_layer(seed: int, channel: int, octave: int, width: int, height: int,
                base_cells: int) -> np.ndarray:
    """One octave of value noise, periodic east-west, smoothstep-interpolated."""
    cx, cy = octave_cells(width, height, base_cells, octave)
    u = (np.arange(width) + 0.5) * cx / width
    v = (np.arange(height) + 0.5) * cy / height
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    tx = u - x0
    ty = v - y0
    sx = tx * tx * (3.0 - 2.0 * tx)
    sy = ty * ty * (3.0 - 2.0 * ty)
    xa = (x0 % cx)[None, :]
    xb = ((x0 + 1) % cx)[None, :]
    ya = y0[:, None]
    yb = (y0 + 1)[:, None]
    v00 = lattice_values(seed, channel, octave, xa, ya)
    v10 = lattice_values(seed, channel, octave, xb, ya)
    v01 = lattice_values(seed, channel, octave, xa, yb)
    v11 = lattice_values(seed, channel, octave, xb, yb)
    sx = sx[None, :]
    sy = sy[:, None]
    top = v00 + (v10 - v00) * sx
    bottom = v01 + (v11 - v01) * sx
    return top + (bottom - top) * sy


def fractal_noise(seed: int, channel: int, width: int, height: int, octaves: int,
                  persistence: float, base_cells: int) -> np.ndarray:
    total = np.zeros((height, width))
    norm = 0.0
    amp = 1.0
    for k in range(octaves):
        total += amp * noise_layer(seed, channel, k, width, height, base_cells)
        norm += amp
        amp *= persistence
    return total / norm


def _check_dims(width, height):
    if int(width) != width or int(height) != height or width < 2 or height < 2:
        raise ValueError(f"grid dimensions must be integers >= 2, got {width}x{height}")


def elevation_from_noise(n, sea_level_bias: float = 0.0, contrast: float = 2.0,
                         land_exponent: float = 2.5):
    """Map fractal noise in [0, 1] to meters in [MIN_ELEVATION, MAX_ELEVATION].

    The noise is contrast-stretched about 0.5 and shifted by the bias.  The
    ocean part maps linearly; land is raised to ``land_exponent`` so lowlands
    are flat and relief concentrates in the highlands.
    """
    u = np.clip((np.asarray(n, dtype=np.float64) - 0.5) * contrast + 0.5 + sea_level_bias,
                0.0, 1.0)
    sea = -MIN_ELEVATION / (MAX_ELEVATION - MIN_ELEVATION)
    land = MAX_ELEVATION * (np.clip(u - sea, 0.0, None) / (1.0 - sea)) ** land_exponent
    ocean = MIN_ELEVATION * np.clip(sea - u, 0.0, None) / sea
    return np.where(u >= sea, land, ocean)


def synth_height(seed: int, width: int, height: int, octaves: int = 6,
                 persistence: float = 0.5, sea_level_bias: float = -0.05,
                 base_cells: int = 4, cell_size: float = 250.0, contrast: float = 2.0,
                 land_exponent: float = 2.5) -> HeightField:
    _check_dims(width, height)
    if octaves < 1:
        raise ValueError("octaves must be >= 1")
    if not 0 < persistence < 1:
        raise ValueError("persistence must lie in (0, 1)")
    n = fractal_noise(seed, HEIGHT_CHANNEL, width, height, octaves, persistence, base_cells)
    return HeightField(elevation_from_noise(n, sea_level_bias, contrast, land_exponent),
                       cell_size)


def synth_moisture(seed: int, width: int, height: int, octaves: int = 3,
                   base_cells: int = 3, contrast: float = 2.0) -> np.ndarray:
    _check_dims(width, height)
    n = fractal_noise(seed, MOISTURE_CHANNEL, width, height, octaves, 0.5, base_cells)
    return np.clip((n - 0.5) * contrast + 0.5, 0.0, 1.0)


def synth_world(seed: int, width: int = 2048, height: int = 1024, octaves: int = 6,
                persistence: float = 0.5, sea_level_bias: float = -0.05,
                lat_max: float = 80.0, cell_size: float = 250.0) -> WorldRaster:
    hf = synth_height(seed, width, height, octaves, persistence, sea_level_bias,
                      cell_size=cell_size)
    return WorldRaster(hf, synth_moisture(seed, width, height), lat_max, seed)


def hillshade(h: HeightField, azimuth: float = 315.0, sun_altitude: float = 45.0) -> np.ndarray:
    """Illumination in [0, 1] from central-difference slope and aspect.

    Aspect is the compass direction of steepest descent; columns run east
    and rows run south.
    """
    if h.cell_size <= 0:
        raise ValueError("cell_size must be positive")
    if not 0 <= azimuth < 360:
        raise ValueError("azimuth must lie in [0, 360)")
    if not 0 < sun_altitude <= 90:
        raise ValueError("sun_altitude must lie in (0, 90]")
    drow, dcol = np.gradient(h.elevation, h.cell_size)
    slope = np.arctan(np.hypot(drow, dcol))
    # downhill vector is (east, north) = (-dcol, +drow)
    aspect = np.arctan2(-dcol, drow)
    zenith = np.radians(90.0 - sun_altitude)
    az = np.radians(azimuth)
    shade = (np.cos(zenith) * np.cos(slope)
             + np.sin(zenith) * np.sin(slope) * np.cos(az - aspect))
    return np.clip(shade, 0.0, 1.0)


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def render_terrain(h: HeightField, mask, shade) -> np.ndarray:
    mask = check_mask(mask)
    shade = np.asarray(shade, dtype=np.float64)
    if mask.shape != h.elevation.shape or shade.shape != mask.shape:
        raise ValueError("height field, mask and shade must share dimensions")
    shade = np.where(mask == TerrainClass.WATER, 1.0, shade)
    factor = AMBIENT + (1.0 - AMBIENT) * shade
    rgb = TERRAIN_PALETTE[mask].astype(np.float64) * factor[..., None]
    return np.clip(round_half_up(rgb), 0, 255).astype(np.uint8)


def height_to_image(h: HeightField) -> tuple[np.ndarray, float, float]:
    """Linear 16-bit encoding; returns the image with its min and max meters."""
    e = h.elevation
    lo, hi = float(e.min()), float(e.max())
    if not lo < hi:
        raise DegenerateRangeError("cannot encode a constant height field")
    img = round_half_up((e - lo) / (hi - lo) * 65535.0)
    return np.clip(img, 0, 65535).astype(np.uint16), lo, hi


def image_to_height(img, lo: float, hi: float) -> np.ndarray:
    return lo + np.asarray(img, dtype=np.float64) / 65535.0 * (hi - lo)
