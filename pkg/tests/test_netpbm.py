import numpy as np
import pytest

from terrain_twin import netpbm


def test_p6_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    path = tmp_path / "a.ppm"
    netpbm.write_netpbm(path, img)
    raw = path.read_bytes()
    back = netpbm.read_netpbm(path)
    assert back.format == "P6"
    assert np.array_equal(back.pixels, img)
    netpbm.write_netpbm(tmp_path / "b.ppm", back)
    assert (tmp_path / "b.ppm").read_bytes() == raw


def test_minimal_header():
    data = b"P6 2 2 255\n" + bytes(range(12))
    img = netpbm.decode(data)
    assert (img.width, img.height, img.maxval) == (2, 2, 255)
    assert img.pixels.shape == (2, 2, 3)
    assert img.pixels[1, 1].tolist() == [9, 10, 11]


def test_comments_in_header():
    data = b"P5\n# made by hand\n3 # width\n1\n# maxval next\n255\n" + b"\x01\x02\x03"
    img = netpbm.decode(data)
    assert img.pixels.tolist() == [[1, 2, 3]]


def test_16bit_is_big_endian(tmp_path):
    arr = np.array([[0x0102, 0xFFFE]], dtype=np.uint16)
    path = tmp_path / "h.pgm"
    netpbm.write_netpbm(path, arr)
    raw = path.read_bytes()
    assert raw.endswith(b"\x01\x02\xff\xfe")
    img = netpbm.read_netpbm(path)
    assert img.format == "P5-16bit"
    assert np.array_equal(img.pixels, arr)


def test_truncated_reports_lengths():
    data = b"P6\n2 2\n255\n" + bytes(11)
    with pytest.raises(netpbm.TruncatedError) as exc:
        netpbm.decode(data)
    assert "expected 12" in str(exc.value) and "got 11" in str(exc.value)
    assert exc.value.offset is not None


def test_bad_magic_and_maxval():
    with pytest.raises(netpbm.BadMagicError):
        netpbm.decode(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(netpbm.BadMaxvalError) as exc:
        netpbm.decode(b"P5\n1 1\n1023\n\x00\x00")
    assert exc.value.offset == 7


def test_distinct_error_classes():
    kinds = {netpbm.BadMagicError, netpbm.BadMaxvalError, netpbm.TruncatedError,
             netpbm.HeaderError}
    assert len(kinds) == 4
    assert all(issubclass(k, netpbm.NetpbmError) for k in kinds)


def test_header_garbage():
    with pytest.raises(netpbm.HeaderError):
        netpbm.decode(b"P5\nx 1\n255\n\x00")


def test_atomic_write_leaves_old_file_on_failure(tmp_path):
    path = tmp_path / "keep.pgm"
    netpbm.write_netpbm(path, np.zeros((2, 2), np.uint8))
    before = path.read_bytes()
    with pytest.raises(ValueError):
        netpbm.write_netpbm(path, np.full((2, 2), 300))
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["keep.pgm"]


def test_meta_round_trip(tmp_path):
    netpbm.write_meta(tmp_path / "x.meta", {"min_elevation": -12.5, "seed": 3})
    assert netpbm.read_meta(tmp_path / "x.meta") == {"min_elevation": "-12.5", "seed": "3"}
