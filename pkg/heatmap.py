"""
Qualitative output: anomaly maps as PGM (P5) and image | mask | prediction panels as PPM (P6)
"""

import os

import numpy as np
from PIL import Image

from errors import InputError, ShapeError, ExportError


def to_bytes(values):
    """[0, 1] -> uint8 via round(255 v)"""
    values = np.asarray(values, dtype=np.float64)
    if values.size and (values.min() < 0.0 or values.max() > 1.0 or not np.all(np.isfinite(values))):
        raise InputError("heatmap values must lie in [0, 1]")
    return np.rint(255.0 * values).astype(np.uint8)


def _write(image, path):
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        image.save(path, format="PPM")
    except OSError as e:
        raise ExportError(f"cannot write {path}: {e}") from e
    return path


def export_heatmap(seg_map, path):
    """H x W map -> binary PGM, header "P5\\n{W} {H}\\n255\\n" """
    seg_map = np.asarray(seg_map)
    if seg_map.ndim != 2:
        raise ShapeError(f"heatmap must be H x W, got {seg_map.shape}")
    return _write(Image.fromarray(to_bytes(seg_map)), path)


def _rgb(plane):
    return np.repeat(to_bytes(plane)[:, :, None], 3, axis=2)


def export_panel(image, mask, seg_map, path):
    """Side-by-side RGB panel: input image | ground-truth mask | predicted map"""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    seg_map = np.asarray(seg_map)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"panel image must be H x W x 3, got {image.shape}")
    if mask.shape != image.shape[:2] or seg_map.shape != image.shape[:2]:
        raise ShapeError(f"mask {mask.shape} / map {seg_map.shape} do not match image {image.shape[:2]}")
    panel = np.concatenate([to_bytes(image), _rgb(mask.astype(np.float64)), _rgb(seg_map)], axis=1)
    return _write(Image.fromarray(panel), path)
