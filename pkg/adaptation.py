"""
Trainable bridge from frozen encoder features to task features
- ImageAdapter / AdapterBranch: four parallel adapters averaged (Det and Seg branches)
- PromptLearner: K shared learnable tokens appended to the two anchor templates
"""

import numpy as np

from errors import ShapeError
from encoders import (TokenSequence, tokenize, NORMAL_TEMPLATE, ABNORMAL_TEMPLATE,
                      DEFAULT_VOCABULARY, INIT_STD)
from numerics import Tensor, matmul, layer_norm, leaky_relu

N_STAGES = 4


class ImageAdapter:
    """One adapter A_k: W1 -> LN1 -> LeakyReLU -> W2 -> LN2 -> LeakyReLU, row-wise"""

    def __init__(self, dim, rng, prefix, bias=True):
        self.prefix = prefix
        self.bias = bias
        params = {
            "w1": rng.normal(0.0, INIT_STD, size=(dim, dim)),
            "ln1_gain": np.ones(dim), "ln1_bias": np.zeros(dim),
            "w2": rng.normal(0.0, INIT_STD, size=(dim, dim)),
            "ln2_gain": np.ones(dim), "ln2_bias": np.zeros(dim),
        }
        if bias:
            params["b1"] = np.zeros(dim)
            params["b2"] = np.zeros(dim)
        self.params = {key: Tensor(value, requires_grad=True, name=f"{prefix}.{key}")
                       for key, value in params.items()}

    def named_parameters(self):
        return [(f"{self.prefix}.{key}", tensor) for key, tensor in sorted(self.params.items())]

    def __call__(self, features):
        p = self.params
        h = matmul(features, p["w1"])
        if self.bias:
            h = h + p["b1"]
        h = leaky_relu(layer_norm(h, p["ln1_gain"], p["ln1_bias"]))
        h = matmul(h, p["w2"])
        if self.bias:
            h = h + p["b2"]
        return leaky_relu(layer_norm(h, p["ln2_gain"], p["ln2_bias"]))


def apply_adapter(features, branch, stage):
    """A_k(F0) for stage k in 1..4 of `branch`"""
    if not 1 <= stage <= N_STAGES:
        raise ValueError(f"adapter stage must be in 1..{N_STAGES}, got {stage}")
    return branch.stages[stage - 1](features)


def fuse_stage_outputs(outputs):
    """Mean of the four stage outputs, summed pairwise so tied stages reproduce one stage exactly"""
    if len(outputs) != N_STAGES:
        raise ShapeError(f"expected {N_STAGES} adapter outputs, got {len(outputs)}")
    return ((outputs[0] + outputs[1]) + (outputs[2] + outputs[3])) * 0.25


class AdapterBranch:
    """Four adapters applied to the same F0 and averaged"""

    def __init__(self, dim, seed, name, bias=True):
        rng = np.random.default_rng([seed, 303, 0 if name == "det" else 1])
        self.name = name
        self.stages = [ImageAdapter(dim, rng, f"{name}_adapter.stage{k + 1}", bias=bias)
                       for k in range(N_STAGES)]

    def named_parameters(self):
        named = []
        for stage in self.stages:
            named.extend(stage.named_parameters())
        return named

    def __call__(self, features):
        return fuse_adapters(features, self)


def fuse_adapters(features, branch):
    if len(branch.stages) != N_STAGES:
        raise ShapeError(f"adapter branch must have {N_STAGES} stages, got {len(branch.stages)}")
    return fuse_stage_outputs([stage(features) for stage in branch.stages])


def det_features(encoded, branch):
    """DetAdapter keeps every row; row 0 stays the global class token"""
    return branch(encoded)


def seg_features(encoded, branch):
    """SegAdapter sees the patch rows only (the class token has no location)"""
    if encoded.shape[0] < 2:
        raise ShapeError("encoder output must hold a class token and at least one patch")
    return branch(encoded[1:])


class PromptLearner:
    """K learnable tokens shared by the normal and the abnormal prompt"""

    def __init__(self, dim, n_tokens=10, length=16, category="lesionblob",
                 vocabulary=DEFAULT_VOCABULARY, seed=0):
        rng = np.random.default_rng([seed, 404])
        self.dim, self.length, self.category = dim, length, category
        self.normal_ids = tokenize(NORMAL_TEMPLATE, category, vocabulary)
        self.abnormal_ids = tokenize(ABNORMAL_TEMPLATE, category, vocabulary)
        self.tokens = [Tensor(rng.normal(0.0, INIT_STD, size=dim), requires_grad=True,
                              name=f"prompt.token{k + 1:02d}")
                       for k in range(n_tokens)]

    @property
    def n_tokens(self):
        return len(self.tokens)

    def named_parameters(self):
        return [(f"prompt.token{k + 1:02d}", token) for k, token in enumerate(self.tokens)]

    def build_prompts(self):
        return build_prompts(self)


def build_prompts(params):
    """(normal, abnormal) TokenSequences: anchors, the shared p_1..p_K, then PAD"""
    for anchor in (params.normal_ids, params.abnormal_ids):
        if len(anchor) + params.n_tokens > params.length:
            raise ShapeError(
                f"anchor of {len(anchor)} words + {params.n_tokens} learnable tokens "
                f"exceeds the text length {params.length}")
    normal = TokenSequence(list(params.normal_ids), list(params.tokens), params.length)
    abnormal = TokenSequence(list(params.abnormal_ids), list(params.tokens), params.length)
    return normal, abnormal
