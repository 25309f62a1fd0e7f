"""
Deterministic synthetic lesion benchmark

Normal images are smooth value-noise textures; abnormal images add 1-3
filled ellipses with an additive intensity shift. Masks are the exact
ellipse pixels. Every sample depends only on (seed, index, class), and the
noise lattice is integer arithmetic so pixel data is platform independent.
"""

import hashlib
import os
from dataclasses import dataclass, replace, field
from typing import List

import numpy as np
from PIL import Image

from errors import SynthDataError, ShapeError

NORMAL = 0
ABNORMAL = 1
CLASS_NAMES = {NORMAL: "normal", ABNORMAL: "abnormal"}

BACKGROUND_LOW = 0.15
BACKGROUND_SPAN = 0.5
FEATHER_FLOOR = 0.25
MAX_PLACEMENT_ATTEMPTS = 50
MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    train_normal: int = 64
    train_abnormal: int = 64
    test_normal: int = 24
    test_abnormal: int = 24
    image_size: int = 64
    lesion_min: int = 1
    lesion_max: int = 3
    contrast: float = 0.5
    texture_scale: int = 16
    min_area: int = 20
    max_area: int = 900
    min_radius: int = 3
    max_radius: int = 10
    feather_radius: int = 0
    category: str = "lesionblob"

    def __post_init__(self):
        counts = (self.train_normal, self.train_abnormal, self.test_normal, self.test_abnormal)
        if any(c <= 0 for c in counts):
            raise SynthDataError(f"per-split class counts must be positive, got {counts}")
        if not 0.0 < self.contrast <= 1.0:
            raise SynthDataError(f"lesion contrast must lie in (0, 1], got {self.contrast}")
        if not 1 <= self.lesion_min <= self.lesion_max:
            raise SynthDataError(f"bad lesion count range [{self.lesion_min}, {self.lesion_max}]")
        if not 1 <= self.min_radius <= self.max_radius:
            raise SynthDataError(f"bad radius range [{self.min_radius}, {self.max_radius}]")
        if not 1 <= self.min_area <= self.max_area:
            raise SynthDataError(f"bad area range [{self.min_area}, {self.max_area}]")
        if self.texture_scale < 1 or self.image_size < 1 or self.feather_radius < 0:
            raise SynthDataError("texture scale and image size must be positive, feather radius non-negative")


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    label: int
    mask: np.ndarray  # H x W uint8 {0, 1}
    sample_id: str
    category: str = "lesionblob"

    def flipped(self):
        """Horizontal flip, mask flipped with the image"""
        return Sample(np.ascontiguousarray(self.image[:, ::-1, :]), self.label,
                      np.ascontiguousarray(self.mask[:, ::-1]), self.sample_id, self.category)


@dataclass
class SyntheticDataset:
    train: List[Sample] = field(default_factory=list)
    test: List[Sample] = field(default_factory=list)


def _generator(spec, index, label, stream):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, index, label, stream])))


def sample_id(index, label):
    return f"{'a' if label == ABNORMAL else 'n'}{index:05d}"


def background(spec, index, label):
    """Value-noise texture (H x W) from an integer lattice with integer bilinear weights"""
    rng = _generator(spec, index, label, 0)
    s = spec.texture_scale
    size = spec.image_size
    cells = size // s + 2
    lattice = rng.integers(0, 256, size=(cells, cells), dtype=np.int64)
    coords = np.arange(size)
    cell, frac = coords // s, coords % s
    iy, ix = cell[:, None], cell[None, :]
    fy, fx = frac[:, None], frac[None, :]
    acc = (lattice[iy, ix] * (s - fy) * (s - fx)
           + lattice[iy, ix + 1] * (s - fy) * fx
           + lattice[iy + 1, ix] * fy * (s - fx)
           + lattice[iy + 1, ix + 1] * fy * fx)
    return BACKGROUND_LOW + BACKGROUND_SPAN * (acc / float(255 * s * s))


def _ellipse(size, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    inside = (dy * rx) ** 2 + (dx * ry) ** 2 <= (rx * ry) ** 2
    return inside, dy, dx


def _feather_weight(dy, dx, ry, rx, feather_radius):
    if feather_radius == 0:
        return np.ones(dy.shape)
    q = np.sqrt((dy / ry) ** 2 + (dx / rx) ** 2)
    depth = np.clip(1.0 - q, 0.0, 1.0) * min(ry, rx)
    return np.minimum(1.0, FEATHER_FLOOR + (1.0 - FEATHER_FLOOR) * depth / feather_radius)


def lesions(spec, index):
    """(mask, weight) for the abnormal sample `index`; weight scales the contrast per pixel"""
    size = spec.image_size
    if 2 * spec.max_radius + 1 > size:
        raise SynthDataError(f"lesion radius {spec.max_radius} cannot fit in a {size}x{size} image")
    rng = _generator(spec, index, ABNORMAL, 1)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        count = int(rng.integers(spec.lesion_min, spec.lesion_max + 1))
        mask = np.zeros((size, size), dtype=bool)
        weight = np.zeros((size, size))
        for _ in range(count):
            ry, rx = (int(r) for r in rng.integers(spec.min_radius, spec.max_radius + 1, size=2))
            cy = int(rng.integers(ry, size - ry))
            cx = int(rng.integers(rx, size - rx))
            inside, dy, dx = _ellipse(size, cy, cx, ry, rx)
            mask |= inside
            w = _feather_weight(dy, dx, ry, rx, spec.feather_radius)
            weight = np.maximum(weight, np.where(inside, w, 0.0))
        if spec.min_area <= int(mask.sum()) <= spec.max_area:
            return mask.astype(np.uint8), weight
    raise SynthDataError(
        f"could not place lesions with area in [{spec.min_area}, {spec.max_area}] "
        f"after {MAX_PLACEMENT_ATTEMPTS} attempts (sample {index})")


def generate_sample(spec, index, label):
    if index < 0:
        raise SynthDataError(f"sample index must be non-negative, got {index}")
    if label not in CLASS_NAMES:
        raise SynthDataError(f"unknown class {label!r}")
    gray = background(spec, index, label)
    size = spec.image_size
    if label == ABNORMAL:
        mask, weight = lesions(spec, index)
        gray = np.clip(gray + spec.contrast * weight * mask, 0.0, 1.0)
    else:
        mask = np.zeros((size, size), dtype=np.uint8)
    image = np.repeat(gray[:, :, None], 3, axis=2)
    return Sample(image, label, mask, sample_id(index, label), spec.category)


def generate_dataset(spec, verbose=False):
    """Train indices come first per class, test indices continue after them"""
    dataset = SyntheticDataset()
    for split, n_normal, n_abnormal, offset_n, offset_a in (
            ("train", spec.train_normal, spec.train_abnormal, 0, 0),
            ("test", spec.test_normal, spec.test_abnormal, spec.train_normal, spec.train_abnormal)):
        samples = [generate_sample(spec, offset_n + i, NORMAL) for i in range(n_normal)]
        samples += [generate_sample(spec, offset_a + i, ABNORMAL) for i in range(n_abnormal)]
        setattr(dataset, split, samples)
    if verbose:
        print(f"[SynthData] Generated {len(dataset.train)} train / {len(dataset.test)} test samples "
              f"(seed={spec.seed}, contrast={spec.contrast}, feather={spec.feather_radius})")
    return dataset


def low_contrast_variant(spec, contrast=0.12, feather_radius=3):
    """Hard split: weaker lesions with soft rims, same layout generator"""
    if not 0.0 < contrast <= spec.contrast:
        raise SynthDataError(f"low-contrast variant needs 0 < contrast <= {spec.contrast}, got {contrast}")
    return replace(spec, contrast=contrast, feather_radius=feather_radius)


def dataset_digest(samples):
    """sha256 over ids, labels, pixel and mask bytes"""
    digest = hashlib.sha256()
    for sample in samples:
        digest.update(sample.sample_id.encode("utf-8"))
        digest.update(bytes([sample.label]))
        digest.update(np.ascontiguousarray(sample.image, dtype="<f8").tobytes())
        digest.update(np.ascontiguousarray(sample.mask, dtype=np.uint8).tobytes())
    return digest.hexdigest()


def _to_gray_bytes(values):
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_split(samples, directory):
    """Write images/masks as PGM (P5) and a manifest line per sample"""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "masks"), exist_ok=True)
    lines = []
    for sample in samples:
        image_rel = os.path.join("images", f"{sample.sample_id}.pgm")
        mask_rel = os.path.join("masks", f"{sample.sample_id}.pgm")
        Image.fromarray(_to_gray_bytes(sample.image[:, :, 0])).save(os.path.join(directory, image_rel), format="PPM")
        Image.fromarray(sample.mask.astype(np.uint8) * 255).save(os.path.join(directory, mask_rel), format="PPM")
        lines.append(f"{sample.sample_id}\t{CLASS_NAMES[sample.label]}\t{image_rel}\t{mask_rel}")
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as f:
        f.write("# sample_id\tclass\timage\tmask\n")
        f.write("\n".join(lines) + "\n")


def export_dataset(dataset, output_dir, verbose=True):
    for split in ("train", "test"):
        export_split(getattr(dataset, split), os.path.join(output_dir, split))
    if verbose:
        print(f"[SynthData] Exported dataset to {output_dir}")


def load_split(directory, category="lesionblob"):
    """Read a manifest directory written by export_split (or any dataset in the same format)"""
    manifest = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise SynthDataError(f"no {MANIFEST_NAME} in {directory}")
    labels = {name: label for label, name in CLASS_NAMES.items()}
    samples = []
    with open(manifest, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            # tab separated; paths may contain spaces
            parts = line.split("\t")
            if len(parts) != 4 or parts[1] not in labels:
                raise SynthDataError(f"{manifest}:{line_no}: expected 'id<TAB>class<TAB>image<TAB>mask'")
            sid, cls, image_rel, mask_rel = parts
            gray = np.asarray(Image.open(os.path.join(directory, image_rel)).convert("L"), dtype=np.float64) / 255.0
            mask = (np.asarray(Image.open(os.path.join(directory, mask_rel)).convert("L")) > 127).astype(np.uint8)
            if gray.shape != mask.shape:
                raise ShapeError(f"{sid}: image {gray.shape} and mask {mask.shape} differ")
            label = labels[cls]
            if (label == NORMAL) == bool(mask.any()):
                raise SynthDataError(f"{sid}: class '{cls}' contradicts its mask")
            samples.append(Sample(np.repeat(gray[:, :, None], 3, axis=2), label, mask, sid, category))
    return samples


def load_dataset(data_dir, category="lesionblob"):
    return SyntheticDataset(train=load_split(os.path.join(data_dir, "train"), category),
                            test=load_split(os.path.join(data_dir, "test"), category))
