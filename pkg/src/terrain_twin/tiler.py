"""Tiled inference on large RGB images and mosaic stitching."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import labeler, nnet
from .trainer import ColorStats, normalize_rgb


@dataclass
class TileGrid:
    tile_size: int
    rows: int
    cols: int
    height: int          # original image size
    width: int
    pad_right: int
    pad_bottom: int
    tiles: list[np.ndarray]  # row-major, each tile_size x tile_size x 3

    def source_stats(self) -> ColorStats:
        """Channel mean/std over the unpadded image area."""
        return ColorStats.of([stitch(self.tiles, self)])


def tile_image(img, tile_size: int = 256) -> TileGrid:
    """Cut into non-overlapping tiles, padding right/bottom by mirror reflection."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("image must be at least 1x1")
    rows = math.ceil(h / tile_size)
    cols = math.ceil(w / tile_size)
    pad_b = rows * tile_size - h
    pad_r = cols * tile_size - w
    pad = ((0, pad_b), (0, pad_r)) + ((0, 0),) * (img.ndim - 2)
    padded = np.pad(img, pad, mode="symmetric")
    tiles = [padded[r * tile_size:(r + 1) * tile_size, c * tile_size:(c + 1) * tile_size].copy()
             for r in range(rows) for c in range(cols)]
    return TileGrid(tile_size, rows, cols, h, w, pad_r, pad_b, tiles)


def stitch(masks, grid: TileGrid) -> np.ndarray:
    """Place per-tile outputs row-major and crop the padding away."""
    masks = list(masks)
    if len(masks) != grid.rows * grid.cols:
        raise ValueError(f"expected {grid.rows * grid.cols} tiles, got {len(masks)}")
    ts = grid.tile_size
    first = np.asarray(masks[0])
    out = np.empty((grid.rows * ts, grid.cols * ts) + first.shape[2:], dtype=first.dtype)
    for i, m in enumerate(masks):
        r, c = divmod(i, grid.cols)
        out[r * ts:(r + 1) * ts, c * ts:(c + 1) * ts] = m
    return out[:grid.height, :grid.width]


def color_normalize(tile, stats_src: ColorStats, stats_ref: ColorStats) -> np.ndarray:
    """Match channel mean/std to the reference; zero-variance channels only shift."""
    x = np.asarray(tile, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(stats_src.std > 0, stats_ref.std / stats_src.std, 1.0)
    out = (x - stats_src.mean) * scale + stats_ref.mean
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def infer_tile(model: nnet.UNetModel, tile, stats_ref: ColorStats,
               stats_src: ColorStats | None) -> np.ndarray:
    if stats_src is not None:
        tile = color_normalize(tile, stats_src, stats_ref)
    x = normalize_rgb(tile, stats_ref).transpose(2, 0, 1)[None]
    logits = nnet.unet_forward(model, np.ascontiguousarray(x), training=False)
    return logits[0].argmax(axis=0).astype(np.uint8)


def infer_tiles(model: nnet.UNetModel, grid: TileGrid, stats_ref: ColorStats,
                stats_src: ColorStats | None = None, normalize: bool = True,
                workers: int = 1) -> list[np.ndarray]:
    """Segment every tile.  Source statistics default to the whole image so all
    tiles share one color transform; ``normalize=False`` skips matching."""
    if model.config.in_channels != 3:
        raise nnet.ShapeError("tiled inference needs an RGB (3-channel) model")
    if grid.tile_size % (1 << model.config.depth):
        raise nnet.ShapeError("tile_size must be divisible by 2**depth")
    if normalize and stats_src is None:
        stats_src = grid.source_stats()
    if not normalize:
        stats_src = None

    def one(tile):
        return infer_tile(model, tile, stats_ref, stats_src)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, grid.tiles))
    return [one(t) for t in grid.tiles]


def colorize_mosaic(mask, palette: str = "mask", cls: int | None = None) -> np.ndarray:
    """Color a mosaic.

    ``palette="mask"`` uses the binary-mask colors (water blue, forest cyan,
    ...); ``"terrain"`` uses the terrain-map colors.  Passing ``cls`` gives
    that class's binary view instead.
    """
    if cls is not None:
        return labeler.mask_to_binary_image(mask, cls)
    if palette == "mask":
        return labeler.colorize_mask(mask)
    if palette == "terrain":
        return labeler.TERRAIN_PALETTE[labeler.check_mask(mask)]
    raise ValueError(f"unknown palette {palette!r}")
