"""
LesionSegModel: frozen encoders -> Det/Seg adapters -> classifier + TPCA decoder

One forward path shared by training (tape-tracked) and evaluation
(predict, no tape).
"""

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from adaptation import AdapterBranch, PromptLearner, det_features, seg_features
from classifier import Prototypes, text_prototypes, anomaly_score
from encoders import VisionEncoder, TextEncoder, DEFAULT_VOCABULARY
from errors import ShapeError
from numerics import Tensor, suspend_tape
from tpca import TokenPatchCrossAttention, SegDecoder, fuse_features, decode_segmentation


@dataclass
class TextFeatures:
    normal: Tensor  # N_t x D
    abnormal: Tensor  # N_t x D
    prototypes: Prototypes
    query_mask: Optional[np.ndarray] = None


@dataclass
class ForwardOutput:
    score: Tensor  # 0-d, S
    seg_map: Tensor  # H x W, abnormal probability per pixel
    image_feature: Tensor  # f0, D
    attention: Optional[Tensor]  # h x N_t x N_i, None with TPCA off
    fused: Tensor  # N_i x (D + N_t), or N_i x D with TPCA off


@dataclass
class PredictionPair:
    score: float
    seg_map: np.ndarray


class ModelParams:
    """Ordered name -> Tensor registry over every parameter of the model"""

    def __init__(self, named):
        self.named = list(named)
        names = [name for name, _ in self.named]
        if len(set(names)) != len(names):
            raise ShapeError("duplicate parameter names in model registry")
        self._by_name = dict(self.named)

    def __getitem__(self, name):
        return self._by_name[name]

    def __contains__(self, name):
        return name in self._by_name

    def __iter__(self):
        return iter(self.named)

    def __len__(self):
        return len(self.named)

    def trainable(self):
        return [(name, t) for name, t in self.named if t.requires_grad]

    def frozen(self):
        return [(name, t) for name, t in self.named if not t.requires_grad]

    def zero_grad(self):
        for _, tensor in self.trainable():
            tensor.zero_grad()

    def count(self, trainable=True):
        return sum(t.size for _, t in (self.trainable() if trainable else self.frozen()))

    def digest(self, frozen_only=False):
        """sha256 over names and little-endian float64 payloads"""
        digest = hashlib.sha256()
        for name, tensor in (self.frozen() if frozen_only else self.named):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
        return digest.hexdigest()


class LesionSegModel:
    """Wires the components described by a TrainConfig"""

    def __init__(self, config, vocabulary=DEFAULT_VOCABULARY):
        self.config = config
        dim, seed = config.embed_dim, config.seed
        self.vision = VisionEncoder(config.image_size, config.patch_size, dim, config.vision_depth,
                                    config.encoder_heads, seed, frozen=config.freeze_encoder)
        self.text = TextEncoder(vocabulary, dim, config.text_depth, config.encoder_heads,
                                config.text_length, seed, frozen=config.freeze_encoder)
        self.det_branch = AdapterBranch(dim, seed, "det", bias=config.linear_bias)
        self.seg_branch = AdapterBranch(dim, seed, "seg", bias=config.linear_bias)
        n_tokens = config.n_learnable_tokens if config.use_learnable_prompt else 0
        self.prompt = PromptLearner(dim, n_tokens, config.text_length, config.category, vocabulary, seed)
        if config.use_tpca:
            self.tpca = TokenPatchCrossAttention(dim, config.tpca_heads, seed=seed)
            fused_width = dim + config.text_length
        else:
            self.tpca = None
            fused_width = dim
        self.decoder = SegDecoder(fused_width, config.decoder_hidden or dim, seed, bias=config.linear_bias)
        self.params = ModelParams(self.named_parameters())
        self._feature_cache = {}

    def named_parameters(self):
        named = self.vision.named_parameters() + self.text.named_parameters()
        named += self.det_branch.named_parameters() + self.seg_branch.named_parameters()
        named += self.prompt.named_parameters()
        if self.tpca is not None:
            named += self.tpca.named_parameters()
        return named + self.decoder.named_parameters()

    @property
    def fused_width(self):
        return self.decoder.in_dim

    def encode_prompts(self):
        normal_seq, abnormal_seq = self.prompt.build_prompts()
        normal = self.text.encode_text(normal_seq)
        abnormal = self.text.encode_text(abnormal_seq)
        query_mask = abnormal_seq.query_mask() if self.config.mask_pad_queries else None
        return TextFeatures(normal, abnormal, text_prototypes(normal, abnormal), query_mask)

    def image_features(self, image, key=None):
        """Encoder output F0; cached per key while the encoder is frozen"""
        if key is not None and self.config.freeze_encoder:
            cached = self._feature_cache.get(key)
            if cached is None:
                with suspend_tape():
                    cached = self.vision.encode_image(image)
                self._feature_cache[key] = cached
            return cached
        return self.vision.encode_image(image)

    def clear_cache(self):
        self._feature_cache.clear()

    def forward(self, image, text_features, key=None):
        encoded = self.image_features(image, key)
        # adapters are row-wise, so the class row alone gives f0
        f0 = det_features(encoded[0:1], self.det_branch)[0]
        score = anomaly_score(f0, text_features.prototypes)
        patches = seg_features(encoded, self.seg_branch)
        if self.tpca is not None:
            attention = self.tpca.attention_weights(text_features.abnormal, patches)
            fused = fuse_features(patches, attention, text_features.query_mask)
        else:
            attention, fused = None, patches
        size = self.config.image_size
        seg_map = decode_segmentation(fused, self.decoder, size, size)
        return ForwardOutput(score, seg_map, f0, attention, fused)

    def predict(self, image, text_features=None, key=None):
        with suspend_tape():
            if text_features is None:
                text_features = self.encode_prompts()
            out = self.forward(image, text_features, key)
        return PredictionPair(out.score.item(), out.seg_map.data.copy())
