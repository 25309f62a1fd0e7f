"""
Token-Patch Cross-Attention and the segmentation decoder

Abnormal-prompt tokens are the queries, SegAdapter patches the keys. The
head-averaged attention weights are appended to the patch features (not used
as a mask) and a two-layer decoder turns each fused patch into 2 logits,
which are upsampled before the per-pixel softmax.
"""

import math

import numpy as np

from errors import ShapeError
from encoders import INIT_STD
from numerics import (Tensor, matmul, softmax, stack, mean_axis, transpose, concat_axis,
                      leaky_relu, reshape, bilinear_upsample)


class TokenPatchCrossAttention:
    """W_q, W_k projections; no value projection"""

    def __init__(self, dim, heads=4, head_dim=None, seed=0):
        head_dim = head_dim or dim // heads
        if head_dim < 1 or heads * head_dim > dim:
            raise ShapeError(f"need heads * head_dim <= dim and head_dim >= 1 (got {heads} x {head_dim}, dim {dim})")
        rng = np.random.default_rng([seed, 505])
        self.dim, self.heads, self.head_dim = dim, heads, head_dim
        # wider init than the adapters so initial attention is not uniform
        std = 1.0 / math.sqrt(dim)
        self.w_q = Tensor(rng.normal(0.0, std, size=(dim, heads * head_dim)), requires_grad=True, name="tpca.w_q")
        self.w_k = Tensor(rng.normal(0.0, std, size=(dim, heads * head_dim)), requires_grad=True, name="tpca.w_k")

    def named_parameters(self):
        return [("tpca.w_q", self.w_q), ("tpca.w_k", self.w_k)]

    def attention_weights(self, text_abnormal, patches):
        return cross_attention_weights(text_abnormal, patches, self)


def cross_attention_weights(text_abnormal, patches, params):
    """h x N_t x N_i; each token row is a softmax over the patches"""
    if text_abnormal.shape[1] != params.dim or patches.shape[1] != params.dim:
        raise ShapeError(f"token/patch width must be {params.dim}, got {text_abnormal.shape} and {patches.shape}")
    queries = matmul(text_abnormal, params.w_q)
    keys = matmul(patches, params.w_k)
    scale = 1.0 / math.sqrt(params.head_dim)
    heads = []
    for j in range(params.heads):
        cols = slice(j * params.head_dim, (j + 1) * params.head_dim)
        logits = matmul(queries[:, cols], keys[:, cols].T) * scale
        heads.append(softmax(logits, axis=1))
    return stack(heads, axis=0)


def fuse_features(patches, attention, query_mask=None):
    """Concat(F_i^s, Permute(Mean_h(A))) -> N_i x (D + N_t)

    query_mask (N_t x 1, 0 for PAD slots) zeroes PAD-token columns when given.
    """
    if attention.data.ndim != 3 or attention.shape[2] != patches.shape[0]:
        raise ShapeError(f"attention {attention.shape} does not match {patches.shape[0]} patches")
    averaged = mean_axis(attention, axis=0)
    if query_mask is not None:
        averaged = averaged * query_mask
    return concat_axis(patches, transpose(averaged), axis=1)


class SegDecoder:
    """Linear -> LeakyReLU -> Linear, per patch, to (normal, abnormal) logits"""

    def __init__(self, in_dim, hidden, seed=0, bias=True):
        rng = np.random.default_rng([seed, 606])
        self.in_dim, self.hidden, self.bias = in_dim, hidden, bias
        self.w1 = Tensor(rng.normal(0.0, INIT_STD, size=(in_dim, hidden)), requires_grad=True, name="decoder.w1")
        self.w2 = Tensor(rng.normal(0.0, INIT_STD, size=(hidden, 2)), requires_grad=True, name="decoder.w2")
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True, name="decoder.b1") if bias else None
        self.b2 = Tensor(np.zeros(2), requires_grad=True, name="decoder.b2") if bias else None

    def named_parameters(self):
        named = [("decoder.w1", self.w1), ("decoder.w2", self.w2)]
        if self.bias:
            named.extend([("decoder.b1", self.b1), ("decoder.b2", self.b2)])
        return named

    def logits(self, fused):
        if fused.shape[1] != self.in_dim:
            raise ShapeError(f"decoder expects width {self.in_dim}, got {fused.shape[1]}")
        h = matmul(fused, self.w1)
        if self.bias:
            h = h + self.b1
        h = matmul(leaky_relu(h), self.w2)
        return h + self.b2 if self.bias else h


def patch_grid(n_patches):
    side = math.isqrt(n_patches)
    if side * side != n_patches:
        raise ShapeError(f"{n_patches} patches do not form a square grid")
    return side


def decode_segmentation(fused, decoder, height, width):
    """Per-patch logits -> grid -> bilinear upsample -> softmax -> abnormal channel (H x W)"""
    side = patch_grid(fused.shape[0])
    grid = reshape(decoder.logits(fused), (side, side, 2))
    return upsample_probabilities(grid, height, width)[:, :, 1]


def upsample_probabilities(logit_grid, height, width):
    """Logits are interpolated first; the 2-way softmax runs per output pixel"""
    return softmax(bilinear_upsample(logit_grid, height, width), axis=2)
