import numpy as np
import pytest

from terrain_twin import labeler, nnet, sampler, tiler, trainer
from terrain_twin.trainer import ColorStats


@pytest.fixture(scope="module")
def color_model():
    """Tiny U-Net trained until every terrain color maps to its class."""
    rng = np.random.default_rng(0)
    ps = []
    for i in range(14):
        if i < 7:
            m = np.full((16, 16), i, np.uint8)
        else:
            m = np.kron(rng.integers(0, 7, (2, 2)), np.ones((8, 8), int)).astype(np.uint8)
        ps.append(sampler.Patch(labeler.TERRAIN_PALETTE[m], np.zeros((16, 16)), m, 0, 0, 1, 0))
    res = trainer.train(ps, nnet.UNetConfig(depth=1, base_filters=8),
                        trainer.TrainConfig(max_epochs=150, learning_rate=1e-2, val_every=1000),
                        train_ids=list(range(14)), val_ids=[])
    return res.final


def test_exact_tiling():
    g = tiler.tile_image(np.zeros((512, 512, 3), np.uint8), 256)
    assert (g.rows, g.cols, g.pad_right, g.pad_bottom) == (2, 2, 0, 0)


def test_padded_tiling():
    img = np.random.default_rng(0).integers(0, 256, (300, 300, 3)).astype(np.uint8)
    g = tiler.tile_image(img, 256)
    assert (g.rows, g.cols, g.pad_right, g.pad_bottom) == (2, 2, 212, 212)
    assert all(t.shape == (256, 256, 3) for t in g.tiles)
    assert tiler.stitch(g.tiles, g).shape == (300, 300, 3)
    # mirror padding: column 300 repeats column 299
    assert np.array_equal(g.tiles[1][:, 300 - 256], img[:256, 299])


def test_one_pixel_image():
    img = np.array([[[1, 2, 3]]], np.uint8)
    g = tiler.tile_image(img, 256)
    assert len(g.tiles) == 1 and (g.tiles[0] == [1, 2, 3]).all()
    assert np.array_equal(tiler.stitch(g.tiles, g), img)


def test_round_trip_random_sizes():
    rng = np.random.default_rng(1)
    for _ in range(20):
        h, w = rng.integers(1, 601, 2)
        img = rng.integers(0, 256, (h, w, 3)).astype(np.uint8)
        g = tiler.tile_image(img, 256)
        assert np.array_equal(tiler.stitch(g.tiles, g), img)


def test_index_painting_coverage():
    img = np.zeros((37, 53, 3), np.uint8)
    g = tiler.tile_image(img, 16)
    masks = [np.full((16, 16), i, np.int32) for i in range(len(g.tiles))]
    out = tiler.stitch(masks, g)
    assert out.shape == (37, 53)
    rows, cols = np.indices(out.shape)
    assert np.array_equal(out, (rows // 16) * g.cols + cols // 16)


def test_stitch_count_mismatch():
    g = tiler.tile_image(np.zeros((20, 20, 3), np.uint8), 16)
    with pytest.raises(ValueError):
        tiler.stitch(g.tiles[:3], g)


def test_color_normalize():
    tile = np.random.default_rng(2).integers(0, 256, (8, 8, 3)).astype(np.uint8)
    s = ColorStats.of([tile])
    assert np.array_equal(tiler.color_normalize(tile, s, s), tile)
    ref = ColorStats(np.array([30.0, 60.0, 90.0]), np.array([5.0, 5.0, 5.0]))
    flat = np.broadcast_to(np.round(s.mean).astype(np.uint8), tile.shape)
    exact = ColorStats(np.round(s.mean), s.std)
    assert (tiler.color_normalize(flat, exact, ref) == [30, 60, 90]).all()
    src = ColorStats(np.full(3, 100.0), np.full(3, 10.0))
    dst = ColorStats(np.full(3, 120.0), np.full(3, 20.0))
    assert (tiler.color_normalize(np.full((1, 1, 3), 110, np.uint8), src, dst) == 140).all()


def test_color_normalize_degenerate_channel_shifts():
    tile = np.full((4, 4, 3), 50, np.uint8)
    src = ColorStats.of([tile])
    ref = ColorStats(np.array([80.0, 20.0, 300.0]), np.array([9.0, 9.0, 9.0]))
    assert (tiler.color_normalize(tile, src, ref) == [80, 20, 255]).all()


def test_normalized_means_land_on_reference():
    rng = np.random.default_rng(3)
    tile = rng.normal(90, 25, (64, 64, 3)).clip(0, 255).astype(np.uint8)
    ref = ColorStats(np.array([120.0, 130.0, 110.0]), np.array([30.0, 20.0, 25.0]))
    out = tiler.color_normalize(tile, ColorStats.of([tile]), ref)
    assert np.abs(out.reshape(-1, 3).mean(axis=0) - ref.mean).max() <= 1.0


def test_blue_tiles_become_water(color_model):
    img = np.zeros((40, 40, 3), np.uint8)
    img[:] = labeler.TERRAIN_PALETTE[0]
    g = tiler.tile_image(img, 16)
    masks = tiler.infer_tiles(color_model.model, g, color_model.color_stats, normalize=False)
    assert len(masks) == g.rows * g.cols
    assert (tiler.stitch(masks, g) == 0).all()


def test_identical_tiles_identical_masks(color_model):
    img = np.zeros((16, 32, 3), np.uint8)
    img[:, :16] = np.random.default_rng(4).integers(0, 256, (16, 16, 3))
    img[:, 16:] = img[:, :16]
    g = tiler.tile_image(img, 16)
    masks = tiler.infer_tiles(color_model.model, g, color_model.color_stats)
    assert np.array_equal(masks[0], masks[1])


def test_parallel_matches_sequential(color_model):
    img = np.random.default_rng(5).integers(0, 256, (70, 90, 3)).astype(np.uint8)
    g = tiler.tile_image(img, 16)
    seq = tiler.stitch(tiler.infer_tiles(color_model.model, g, color_model.color_stats), g)
    par = tiler.stitch(tiler.infer_tiles(color_model.model, g, color_model.color_stats,
                                         workers=4), g)
    assert np.array_equal(seq, par)


def test_infer_shape_checks(color_model):
    g = tiler.tile_image(np.zeros((10, 10, 3), np.uint8), 15)
    with pytest.raises(nnet.ShapeError):
        tiler.infer_tiles(color_model.model, g, color_model.color_stats)


def test_colorize_mosaic():
    m = np.zeros((3, 3), np.uint8)
    assert (tiler.colorize_mosaic(m) == [0, 0, 255]).all()
    m[1, 1] = labeler.TerrainClass.FOREST
    b = tiler.colorize_mosaic(m, cls=labeler.TerrainClass.FOREST)
    assert (b[1, 1] == [0, 255, 255]).all() and b.sum() == 2 * 255
    assert np.array_equal(labeler.decode_mask_rgb(tiler.colorize_mosaic(m)), m)
    assert (tiler.colorize_mosaic(m, "terrain")[0, 0] == [17, 141, 215]).all()
    with pytest.raises(ValueError):
        tiler.colorize_mosaic(m, "sepia")
