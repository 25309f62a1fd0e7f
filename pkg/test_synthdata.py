import os

import numpy as np
import pytest

from errors import SynthDataError
from synthdata import (DatasetSpec, generate_dataset, generate_sample, low_contrast_variant, dataset_digest,
                       export_dataset, export_split, load_dataset, load_split, background, NORMAL, ABNORMAL,
                       MANIFEST_NAME)

SMALL = dict(train_normal=4, train_abnormal=4, test_normal=3, test_abnormal=3, image_size=32,
             texture_scale=8, min_radius=2, max_radius=6, min_area=10, max_area=400)


@pytest.fixture
def spec():
    return DatasetSpec(seed=7, **SMALL)


def test_same_spec_same_bytes(spec):
    first = generate_dataset(spec)
    second = generate_dataset(spec)
    assert dataset_digest(first.train + first.test) == dataset_digest(second.train + second.test)
    other = generate_dataset(DatasetSpec(seed=8, **SMALL))
    assert dataset_digest(first.train) != dataset_digest(other.train)


def test_counts_and_disjoint_ids(spec):
    data = generate_dataset(spec)
    assert len(data.train) == 8 and len(data.test) == 6
    assert sum(s.label for s in data.train) == 4
    assert {s.sample_id for s in data.train}.isdisjoint({s.sample_id for s in data.test})


def test_masks_agree_with_labels(spec):
    data = generate_dataset(spec)
    for sample in data.train + data.test:
        assert sample.image.shape == (32, 32, 3)
        assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0
        if sample.label == NORMAL:
            assert not sample.mask.any()
        else:
            assert spec.min_area <= int(sample.mask.sum()) <= spec.max_area


def test_full_contrast_lesion_pixels_stand_out():
    spec = DatasetSpec(seed=2, contrast=1.0, **SMALL)
    sample = generate_sample(spec, 0, ABNORMAL)
    inside = sample.mask.astype(bool)
    assert np.all(sample.image[inside, 0] > background(spec, 0, ABNORMAL)[inside])
    assert np.array_equal(sample.image[~inside, 0], background(spec, 0, ABNORMAL)[~inside])


def test_feather_zero_is_the_hard_edged_generator(spec):
    from dataclasses import replace
    a = generate_sample(spec, 3, ABNORMAL)
    b = generate_sample(replace(spec, feather_radius=0), 3, ABNORMAL)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)


def test_low_contrast_variant_keeps_layout(spec):
    hard = low_contrast_variant(spec)
    assert hard.contrast == 0.12 and hard.feather_radius == 3
    easy, soft = generate_sample(spec, 1, ABNORMAL), generate_sample(hard, 1, ABNORMAL)
    assert np.array_equal(easy.mask, soft.mask)
    inside = easy.mask.astype(bool)
    assert soft.image[inside, 0].sum() < easy.image[inside, 0].sum()
    with pytest.raises(SynthDataError):
        low_contrast_variant(spec, contrast=0.9)


def test_invalid_specs():
    with pytest.raises(SynthDataError):
        DatasetSpec(train_normal=0)
    with pytest.raises(SynthDataError):
        DatasetSpec(contrast=0.0)
    with pytest.raises(SynthDataError):
        generate_sample(DatasetSpec(image_size=16, max_radius=10), 0, ABNORMAL)


def test_flip_moves_mask_with_image(spec):
    sample = generate_sample(spec, 0, ABNORMAL)
    flipped = sample.flipped()
    assert np.array_equal(flipped.mask, sample.mask[:, ::-1])
    assert np.array_equal(flipped.image, sample.image[:, ::-1, :])


def test_export_and_load_round_trip(spec, tmp_path):
    data = generate_dataset(spec)
    export_dataset(data, str(tmp_path), verbose=False)
    assert os.path.exists(tmp_path / "train" / MANIFEST_NAME)
    with open(tmp_path / "train" / "images" / f"{data.train[0].sample_id}.pgm", "rb") as f:
        assert f.read(11) == b"P5\n32 32\n25"
    loaded = load_dataset(str(tmp_path))
    assert [s.sample_id for s in loaded.test] == [s.sample_id for s in data.test]
    for original, back in zip(data.test, loaded.test):
        assert back.label == original.label
        assert np.array_equal(back.mask, original.mask)
        assert np.abs(back.image - original.image).max() <= 0.5 / 255 + 1e-12


def test_load_rejects_contradicting_manifest(spec, tmp_path):
    data = generate_dataset(spec)
    export_dataset(data, str(tmp_path), verbose=False)
    manifest = tmp_path / "test" / MANIFEST_NAME
    text = manifest.read_text(encoding="utf-8").replace("\tabnormal\t", "\tnormal\t", 1)
    manifest.write_text(text, encoding="utf-8")
    with pytest.raises(SynthDataError):
        load_dataset(str(tmp_path))


def test_load_split_keeps_spaces_in_paths(spec, tmp_path):
    data = generate_dataset(spec)
    split = tmp_path / "scan set"
    export_split(data.test, str(split))
    first = data.test[-1].sample_id
    os.rename(split / "images" / f"{first}.pgm", split / "images" / f"{first} copy.pgm")
    manifest = split / MANIFEST_NAME
    old, new = os.path.join("images", f"{first}.pgm"), os.path.join("images", f"{first} copy.pgm")
    text = manifest.read_text(encoding="utf-8").replace(old, new)
    manifest.write_text(text, encoding="utf-8")
    loaded = load_split(str(split))
    assert [s.sample_id for s in loaded] == [s.sample_id for s in data.test]
    assert np.array_equal(loaded[-1].mask, data.test[-1].mask)


def test_load_split_rejects_space_separated_lines(spec, tmp_path):
    data = generate_dataset(spec)
    export_split(data.test[:1], str(tmp_path))
    manifest = tmp_path / MANIFEST_NAME
    manifest.write_text(manifest.read_text(encoding="utf-8").replace("\t", " "), encoding="utf-8")
    with pytest.raises(SynthDataError):
        load_split(str(tmp_path))
