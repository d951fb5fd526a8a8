import csv
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from sdkit.depth_io import (MAX_DEPTH, DepthFormatError, Sample, SparseDepthMap, encode_depth,
                            list_frames, load_split, read_color_png, read_depth_png,
                            write_color_png, write_depth_png, write_sample)

FIXTURES = Path(__file__).parent / "fixtures"


def _raw_png(path, raw):
    Image.fromarray(np.asarray(raw, dtype=np.uint16)).save(path)


def test_pixel_value_decoding(tmp_path):
    _raw_png(tmp_path / "d.png", [[25600, 0], [1, 65535]])
    d = read_depth_png(tmp_path / "d.png")
    assert d.depth[0, 0] == 100.0
    assert d.mask[0, 1] == 0 and d.depth[0, 1] == 0
    assert d.depth[1, 0] == 1 / 256 and d.depth[1, 1] == MAX_DEPTH


def test_encoding_examples():
    np.testing.assert_array_equal(encode_depth(np.array([[0.5, 255.99609375, 0.0]])),
                                  [[128, 65535, 0]])


def test_over_range_is_clamped(tmp_path):
    write_depth_png(np.array([[300.0, 1.0]]), tmp_path / "far.png")
    assert read_depth_png(tmp_path / "far.png").depth[0, 0] == MAX_DEPTH


def test_byte_identical_round_trip(tmp_path, rng):
    d = rng.uniform(0, MAX_DEPTH, (16, 24))
    d[rng.random(d.shape) < 0.5] = 0
    write_depth_png(d, tmp_path / "a.png")
    write_depth_png(read_depth_png(tmp_path / "a.png"), tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    err = np.abs(read_depth_png(tmp_path / "a.png").depth - d)
    assert err.max() <= 1 / 512


def test_rejects_wrong_png_kinds(tmp_path):
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "g8.png")
    with pytest.raises(DepthFormatError, match="16-bit"):
        read_depth_png(tmp_path / "g8.png")
    (tmp_path / "junk.png").write_bytes(b"not a png at all, just some bytes...")
    with pytest.raises(DepthFormatError):
        read_depth_png(tmp_path / "junk.png")
    _raw_png(tmp_path / "d16.png", np.ones((2, 2)))
    with pytest.raises(DepthFormatError, match="RGB"):
        read_color_png(tmp_path / "d16.png")


def test_sparse_map_validation():
    with pytest.raises(ValueError):
        SparseDepthMap(np.array([[-1.0]]))
    with pytest.raises(ValueError):
        SparseDepthMap(np.ones((1, 2, 2)))
    assert SparseDepthMap(np.array([[0.0, 2.0]])).density == 0.5


def test_color_fixture_matches_float_dump():
    color = read_color_png(FIXTURES / "color_4x6.png")
    with open(FIXTURES / "color_4x6.csv") as fh:
        for row in csv.DictReader(fh):
            c, r, k = int(row["channel"]), int(row["row"]), int(row["col"])
            assert color[c, r, k] == float(row["value"])
    assert np.all(color[:, 0, 0] == 1.0) and np.all(color[:, 0, 1] == 0.0)


def test_color_round_trip(tmp_path):
    color = read_color_png(FIXTURES / "color_4x6.png")
    write_color_png(color, tmp_path / "c.png")
    np.testing.assert_array_equal(read_color_png(tmp_path / "c.png"), color)


def test_dataset_layout(tmp_path, rng):
    dense = rng.uniform(1, 80, (8, 8))
    s = Sample(rng.random((3, 8, 8)), SparseDepthMap(np.where(rng.random((8, 8)) < 0.1, dense, 0)),
               SparseDepthMap(dense), "x")
    write_sample(tmp_path, "train", "scene_a", 3, s)
    assert (tmp_path / "train/scene_a/sparse/0000000003.png").exists()
    assert list_frames(tmp_path, "train") == [("scene_a", "0000000003.png")]
    (loaded,) = load_split(tmp_path, "train")
    assert loaded.name == "scene_a/0000000003.png"
    assert abs(loaded.sparse.density - s.sparse.density) < 1e-12
    with pytest.raises(FileNotFoundError):
        load_split(tmp_path, "val")
