import numpy as np
import pytest

from errors import ShapeError
from model import LesionSegModel
from numerics import Tensor, softmax, bilinear_upsample, reshape
from tpca import (TokenPatchCrossAttention, SegDecoder, cross_attention_weights, fuse_features,
                  decode_segmentation, upsample_probabilities, patch_grid)


def test_single_token_single_patch_attention_is_one(rng):
    tpca = TokenPatchCrossAttention(dim=8, heads=2)
    attention = tpca.attention_weights(Tensor(rng.normal(size=(1, 8))), Tensor(rng.normal(size=(1, 8))))
    assert attention.shape == (2, 1, 1)
    assert np.array_equal(attention.data, np.ones((2, 1, 1)))


def test_identical_patches_give_uniform_rows(rng):
    tpca = TokenPatchCrossAttention(dim=8, heads=2)
    patches = Tensor(np.tile(rng.normal(size=8), (4, 1)))
    attention = tpca.attention_weights(Tensor(rng.normal(size=(3, 8))), patches).data
    assert np.allclose(attention, 0.25, atol=1e-15)


def test_attention_rows_sum_to_one(rng):
    tpca = TokenPatchCrossAttention(dim=32, heads=4)
    attention = cross_attention_weights(Tensor(rng.normal(size=(16, 32))), Tensor(rng.normal(size=(64, 32))), tpca).data
    assert attention.shape == (4, 16, 64)
    assert np.all(attention >= 0)
    assert np.allclose(attention.sum(axis=2), 1.0, atol=1e-9)


def test_attention_width_mismatch(rng):
    tpca = TokenPatchCrossAttention(dim=8, heads=2)
    with pytest.raises(ShapeError):
        tpca.attention_weights(Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(4, 8))))


def test_fuse_features_appends_averaged_attention(rng):
    patches = Tensor(rng.normal(size=(4, 8)))
    raw = rng.random((2, 3, 4))
    attention = Tensor(raw / raw.sum(axis=2, keepdims=True))
    fused = fuse_features(patches, attention).data
    assert fused.shape == (4, 11)
    assert np.array_equal(fused[:, :8], patches.data)
    assert np.allclose(fused[:, 8 + 1], attention.data.mean(axis=0)[1], atol=1e-15)


def test_fuse_features_masks_pad_queries(rng):
    patches = Tensor(rng.normal(size=(4, 8)))
    attention = Tensor(np.full((2, 3, 4), 0.25))
    fused = fuse_features(patches, attention, query_mask=np.array([[1.0], [1.0], [0.0]])).data
    assert fused.shape == (4, 11)
    assert np.array_equal(fused[:, 10], np.zeros(4))
    assert np.allclose(fused[:, 8], 0.25)


def test_fuse_features_patch_count_mismatch(rng):
    with pytest.raises(ShapeError):
        fuse_features(Tensor(rng.normal(size=(4, 8))), Tensor(np.full((2, 3, 5), 0.2)))


def test_equal_logits_give_half_everywhere():
    decoder = SegDecoder(in_dim=11, hidden=8)
    for tensor in (decoder.w1, decoder.w2):
        tensor.data = np.zeros_like(tensor.data)
    seg_map = decode_segmentation(Tensor(np.ones((4, 11))), decoder, 16, 16).data
    assert seg_map.shape == (16, 16)
    assert np.allclose(seg_map, 0.5, atol=1e-15)


def test_non_square_patch_count():
    with pytest.raises(ShapeError):
        patch_grid(12)
    decoder = SegDecoder(in_dim=11, hidden=4)
    with pytest.raises(ShapeError):
        decode_segmentation(Tensor(np.zeros((12, 11))), decoder, 16, 16)


def test_decoder_width_mismatch():
    with pytest.raises(ShapeError):
        SegDecoder(in_dim=11, hidden=4).logits(Tensor(np.zeros((4, 8))))


def test_upsampling_happens_before_softmax(rng):
    logits = rng.normal(scale=3.0, size=(2, 2, 2))
    out = upsample_probabilities(Tensor(logits), 5, 5).data
    expected = softmax(bilinear_upsample(Tensor(logits), 5, 5), axis=2).data
    assert np.array_equal(out, expected)
    assert np.allclose(out.sum(axis=2), 1.0, atol=1e-12)
    probs_first = bilinear_upsample(softmax(Tensor(logits), axis=2), 5, 5).data
    assert not np.allclose(out, probs_first)


def test_seg_map_values_are_probabilities(rng):
    decoder = SegDecoder(in_dim=11, hidden=8, seed=2)
    seg_map = decode_segmentation(Tensor(rng.normal(size=(16, 11))), decoder, 32, 32).data
    assert seg_map.shape == (32, 32)
    assert np.all((seg_map >= 0) & (seg_map <= 1))


def test_head_dim_must_fit():
    with pytest.raises(ShapeError):
        TokenPatchCrossAttention(dim=8, heads=16)


@pytest.mark.parametrize("draw", range(100))
def test_model_outputs_are_normalized(draw, micro_settings):
    model = LesionSegModel(micro_settings.with_train(seed=draw).train)
    image = np.random.default_rng(draw).random((16, 16, 3))
    out = model.forward(image, model.encode_prompts())
    assert np.allclose(out.attention.data.sum(axis=2), 1.0, rtol=0, atol=1e-9)
    side = patch_grid(out.fused.shape[0])
    probs = upsample_probabilities(reshape(model.decoder.logits(out.fused), (side, side, 2)), 16, 16).data
    assert np.allclose(probs.sum(axis=2), 1.0, rtol=0, atol=1e-9)
    assert np.array_equal(probs[:, :, 1], out.seg_map.data)


def test_patch_permutation_permutes_attention_and_fused_rows(rng):
    tpca = TokenPatchCrossAttention(dim=8, heads=2)
    tokens = Tensor(rng.normal(size=(5, 8)))
    patches = rng.normal(size=(9, 8))
    order = rng.permutation(9)
    attention = tpca.attention_weights(tokens, Tensor(patches))
    permuted = tpca.attention_weights(tokens, Tensor(patches[order]))
    assert np.allclose(permuted.data, attention.data[:, :, order], rtol=0, atol=1e-12)
    fused = fuse_features(Tensor(patches), attention).data
    fused_permuted = fuse_features(Tensor(patches[order]), permuted).data
    assert np.allclose(fused_permuted, fused[order], rtol=0, atol=1e-12)


def _row_entropy(attention):
    return -(attention * np.log(attention)).sum(axis=2)


def test_scaling_text_features_sharpens_attention(rng):
    tpca = TokenPatchCrossAttention(dim=8, heads=2)
    tokens = rng.normal(size=(5, 8))
    patches = Tensor(rng.normal(size=(9, 8)))
    base = tpca.attention_weights(Tensor(tokens), patches).data
    scaled = tpca.attention_weights(Tensor(3.0 * tokens), patches).data
    assert not np.allclose(base, scaled)
    assert np.all(_row_entropy(scaled) < _row_entropy(base))
