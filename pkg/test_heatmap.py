import numpy as np
import pytest
from PIL import Image

from errors import InputError, ShapeError
from heatmap import export_heatmap, export_panel, to_bytes


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def test_constant_maps(tmp_path):
    zeros = _read(export_heatmap(np.zeros((4, 6)), str(tmp_path / "zero.pgm")))
    header = b"P5\n6 4\n255\n"
    assert zeros.startswith(header)
    assert zeros[len(header):] == bytes(24)
    ones = _read(export_heatmap(np.ones((4, 6)), str(tmp_path / "one.pgm")))
    assert ones[len(header):] == b"\xff" * 24


def test_rounding():
    assert np.array_equal(to_bytes([0.0, 0.5, 1.0, 0.001]), [0, 128, 255, 0])
    with pytest.raises(InputError):
        to_bytes([1.2])


def test_heatmap_rejects_color_input(tmp_path):
    with pytest.raises(ShapeError):
        export_heatmap(np.zeros((4, 4, 3)), str(tmp_path / "x.pgm"))


def test_panel_layout(tmp_path, rng):
    image = rng.random((8, 8, 3))
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[2:4, 2:4] = 1
    seg_map = rng.random((8, 8))
    path = export_panel(image, mask, seg_map, str(tmp_path / "panels" / "a00001.ppm"))
    assert _read(path).startswith(b"P6\n24 8\n255\n")
    panel = np.asarray(Image.open(path))
    assert panel.shape == (8, 24, 3)
    assert np.array_equal(panel[:, 8:16, 0], mask * 255)
    assert np.array_equal(panel[:, 16:, 1], to_bytes(seg_map))


def test_panel_shape_mismatch(tmp_path, rng):
    with pytest.raises(ShapeError):
        export_panel(rng.random((8, 8, 3)), np.zeros((4, 4)), rng.random((8, 8)), str(tmp_path / "p.ppm"))
