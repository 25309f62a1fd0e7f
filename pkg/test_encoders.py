import numpy as np
import pytest

from encoders import (Vocabulary, DEFAULT_VOCABULARY, TokenSequence, VisionEncoder, TextEncoder,
                      tokenize, smooth_max_pool, NORMAL_TEMPLATE, ABNORMAL_TEMPLATE, POOL_SHARPNESS)
from errors import ShapeError, InputError, VocabularyError
from numerics import Tensor, Tape, backward, finite_diff_check, sum_all


def test_tokenize_known_words():
    ids = tokenize("a photo of a normal [obj]", "brain")
    assert len(ids) == 6
    assert DEFAULT_VOCABULARY.unk_id not in ids
    assert ids == tokenize("a photo of a normal [obj]", "brain")


def test_tokenize_synthetic_category():
    assert len(tokenize(ABNORMAL_TEMPLATE, "lesionblob")) == 6


def test_tokenize_unknown_word_maps_to_unk():
    ids = tokenize(NORMAL_TEMPLATE, "kidney")
    assert ids[-1] == DEFAULT_VOCABULARY.unk_id


def test_tokenize_empty_template():
    with pytest.raises(VocabularyError):
        tokenize("   ", "brain")


def test_vocabulary_reserved_ids():
    vocab = Vocabulary(["x", "y"])
    assert vocab.pad_id == 0 and vocab.unk_id == 1
    assert len(vocab) == 4


def test_token_sequence_overflow():
    with pytest.raises(ShapeError):
        TokenSequence([2, 3, 4], [Tensor(np.zeros(4))] * 2, length=4)


def test_encode_image_shape_and_determinism(rng):
    encoder = VisionEncoder(image_size=64, patch_size=8, dim=32, depth=2, heads=4)
    image = rng.random((64, 64, 3))
    out = encoder.encode_image(image)
    assert out.shape == (65, 32)
    assert np.array_equal(out.data, encoder.encode_image(image.copy()).data)
    assert np.isfinite(np.linalg.norm(out.data)) and np.linalg.norm(out.data) > 0


def test_encode_image_rejects_bad_inputs():
    encoder = VisionEncoder(image_size=16, patch_size=4, dim=8, depth=1, heads=2)
    with pytest.raises(ShapeError):
        encoder.encode_image(np.zeros((15, 15, 3)))
    with pytest.raises(InputError):
        encoder.encode_image(np.full((16, 16, 3), 1.5))


def test_patch_embeddings_follow_patch_permutation(rng):
    encoder = VisionEncoder(image_size=16, patch_size=4, dim=8, depth=1, heads=2)
    image = rng.random((16, 16, 3))
    swapped = image.copy()
    swapped[0:4, 0:4], swapped[4:8, 8:12] = image[4:8, 8:12], image[0:4, 0:4]
    a = encoder.embed_patches(image).data
    b = encoder.embed_patches(swapped).data
    first, other = 0, 1 * 4 + 2
    assert np.array_equal(a[first], b[other]) and np.array_equal(a[other], b[first])
    rest = [i for i in range(16) if i not in (first, other)]
    assert np.array_equal(a[rest], b[rest])


def test_encode_text_shape_and_position_sensitivity():
    encoder = TextEncoder(dim=32, depth=2, heads=4, length=16)
    ids = tokenize(NORMAL_TEMPLATE, "brain")
    out = encoder.encode_text(TokenSequence(ids, [], 16))
    assert out.shape == (16, 32)
    swapped = [ids[1], ids[0]] + ids[2:]
    assert not np.array_equal(out.data, encoder.encode_text(TokenSequence(swapped, [], 16)).data)


def test_encode_text_length_mismatch():
    encoder = TextEncoder(dim=8, depth=1, heads=2, length=8)
    with pytest.raises(ShapeError):
        encoder.encode_text(TokenSequence([2, 3], [], 9))


def test_frozen_encoder_gets_no_gradient_but_prompt_does(rng):
    encoder = TextEncoder(dim=8, depth=1, heads=2, length=8)
    token = Tensor(rng.normal(size=8), requires_grad=True)
    seq = TokenSequence(tokenize(NORMAL_TEMPLATE, "brain"), [token], 8)
    with Tape() as tape:
        loss = sum_all(encoder.encode_text(seq))
    backward(loss, tape)
    assert token.grad is not None and np.any(token.grad != 0)
    assert all(t.grad is None for _, t in encoder.named_parameters())


def test_prompt_token_gradient_matches_finite_differences(rng):
    encoder = TextEncoder(dim=8, depth=1, heads=2, length=8)
    weights = Tensor(rng.normal(size=(8, 8)))
    token = Tensor(rng.normal(scale=0.5, size=8))
    ids = tokenize(ABNORMAL_TEMPLATE, "lesionblob")
    err = finite_diff_check(lambda p: sum_all(encoder.encode_text(TokenSequence(ids, [p], 8)) * weights), token)
    assert err <= 1e-4


def test_unfrozen_encoder_is_trainable():
    encoder = VisionEncoder(image_size=16, patch_size=4, dim=8, depth=1, heads=2, frozen=False)
    assert all(t.requires_grad for _, t in encoder.named_parameters())


def test_smooth_max_pool_follows_an_outlier_row():
    rows = np.zeros((64, 4))
    rows[17] = 3.0
    pooled = smooth_max_pool(Tensor(rows), Tensor(np.eye(4)))
    assert pooled.shape == (4,)
    assert np.allclose(pooled.data, 3.0, rtol=0, atol=1e-6)


def test_smooth_max_pool_ignores_row_order_and_stays_in_range(rng):
    rows, proj = rng.normal(size=(20, 6)), rng.normal(size=(6, 6))
    pooled = smooth_max_pool(Tensor(rows), Tensor(proj)).data
    shuffled = smooth_max_pool(Tensor(rows[rng.permutation(20)]), Tensor(proj)).data
    assert np.allclose(pooled, shuffled, rtol=0, atol=1e-12)
    scores = rows @ proj
    assert np.all(pooled <= scores.max(axis=0) + 1e-12)
    assert np.all(pooled >= scores.mean(axis=0) - 1e-12)


def test_class_row_matches_hand_computation(rng):
    encoder = VisionEncoder(image_size=16, patch_size=4, dim=8, depth=1, heads=2)
    normed = rng.normal(size=(17, 8))
    scores = normed[1:] @ encoder.pool_proj.data
    weights = np.exp(POOL_SHARPNESS * (scores - scores.max(axis=0)))
    weights /= weights.sum(axis=0)
    v = normed[0] + (weights * scores).sum(axis=0)
    expected = (v - v.mean()) / np.sqrt(v.var() + 1e-5)
    assert np.allclose(encoder.class_row(Tensor(normed)).data[0], expected, rtol=0, atol=1e-12)


def test_class_row_carries_patch_content(rng):
    encoder = VisionEncoder(image_size=16, patch_size=4, dim=8, depth=1, heads=2)
    image = rng.random((16, 16)) * 0.5
    bright = image.copy()
    bright[4:8, 4:8] = 1.0
    plain = encoder.encode_image(np.repeat(image[:, :, None], 3, axis=2)).data
    lesion = encoder.encode_image(np.repeat(bright[:, :, None], 3, axis=2)).data
    class_shift = np.linalg.norm(plain[0] - lesion[0])
    untouched = [i for i in range(1, 17) if i != 1 + 1 * 4 + 1]
    patch_shift = np.linalg.norm(plain[untouched] - lesion[untouched], axis=1).max()
    assert class_shift > patch_shift
