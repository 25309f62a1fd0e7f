"""
Surrogate frozen encoders standing in for the CLIP vision and text towers
Seeded Gaussian weights, fixed after construction unless freeze is disabled.
"""

from dataclasses import dataclass, field
from typing import List

import numpy as np

from errors import ShapeError, InputError, VocabularyError
from numerics import (Tensor, matmul, softmax, layer_norm, leaky_relu, concat,
                      stack, take, sum_axis, reshape)

PAD = "<pad>"
UNK = "<unk>"

NORMAL_TEMPLATE = "a photo of a normal [obj]"
ABNORMAL_TEMPLATE = "a photo of a damaged [obj]"

# Closed vocabulary: template words plus the category names the data can carry
TEMPLATE_WORDS = ("a", "photo", "of", "normal", "damaged")
CATEGORY_WORDS = ("brain", "retina", "lung", "breast", "lesionblob")

INIT_STD = 0.02
# Softmax temperature of the class-token pooling head; large enough that one
# outlier patch dominates a column
POOL_SHARPNESS = 8.0


class Vocabulary:
    """Word <-> id table; id 0 is PAD, id 1 is UNK"""

    def __init__(self, words=TEMPLATE_WORDS + CATEGORY_WORDS):
        self.tokens = [PAD, UNK]
        for word in words:
            if word not in self.tokens:
                self.tokens.append(word)
        self._index = {token: i for i, token in enumerate(self.tokens)}

    @property
    def pad_id(self):
        return self._index[PAD]

    @property
    def unk_id(self):
        return self._index[UNK]

    def id_of(self, word):
        return self._index.get(word, self.unk_id)

    def __contains__(self, word):
        return word in self._index

    def __len__(self):
        return len(self.tokens)


DEFAULT_VOCABULARY = Vocabulary()


def tokenize(template, obj, vocabulary=DEFAULT_VOCABULARY):
    """Fill the [obj] slot and split on whitespace; unknown words map to UNK"""
    if not template or not template.strip():
        raise VocabularyError("cannot tokenize an empty template")
    text = template.replace("[obj]", obj)
    return [vocabulary.id_of(word) for word in text.lower().split()]


@dataclass
class TokenSequence:
    """Anchor word ids, then learnable embeddings, then PAD up to `length`"""
    anchor_ids: List[int]
    learnable: List[Tensor] = field(default_factory=list)
    length: int = 16

    def __post_init__(self):
        if len(self.anchor_ids) + len(self.learnable) > self.length:
            raise ShapeError(
                f"{len(self.anchor_ids)} anchor + {len(self.learnable)} learnable tokens "
                f"overflow the text length {self.length}")

    @property
    def pad_count(self):
        return self.length - len(self.anchor_ids) - len(self.learnable)

    def query_mask(self):
        """1 for real (anchor or learnable) slots, 0 for PAD"""
        mask = np.zeros((self.length, 1))
        mask[: self.length - self.pad_count] = 1.0
        return mask


def _gaussian(rng, shape, std=INIT_STD):
    return rng.normal(0.0, std, size=shape)


class TransformerBlock:
    """Pre-LN self-attention + MLP block shared by both surrogate towers"""

    def __init__(self, dim, heads, rng, prefix):
        if dim % heads:
            raise ShapeError(f"embed dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.prefix = prefix
        weights = {
            "ln1_gain": np.ones(dim), "ln1_bias": np.zeros(dim),
            "w_qkv": _gaussian(rng, (dim, 3 * dim)), "b_qkv": np.zeros(3 * dim),
            "w_out": _gaussian(rng, (dim, dim)), "b_out": np.zeros(dim),
            "ln2_gain": np.ones(dim), "ln2_bias": np.zeros(dim),
            "w_fc1": _gaussian(rng, (dim, 2 * dim)), "b_fc1": np.zeros(2 * dim),
            "w_fc2": _gaussian(rng, (2 * dim, dim)), "b_fc2": np.zeros(dim),
        }
        self.params = {key: Tensor(value, name=f"{prefix}.{key}") for key, value in weights.items()}

    def named_parameters(self):
        return [(f"{self.prefix}.{key}", tensor) for key, tensor in self.params.items()]

    def __call__(self, x):
        p = self.params
        head_dim = self.dim // self.heads
        h = layer_norm(x, p["ln1_gain"], p["ln1_bias"])
        qkv = matmul(h, p["w_qkv"]) + p["b_qkv"]
        outputs = []
        for j in range(self.heads):
            q = qkv[:, j * head_dim:(j + 1) * head_dim]
            k = qkv[:, self.dim + j * head_dim:self.dim + (j + 1) * head_dim]
            v = qkv[:, 2 * self.dim + j * head_dim:2 * self.dim + (j + 1) * head_dim]
            weights = softmax(matmul(q, k.T) * (1.0 / np.sqrt(head_dim)), axis=1)
            outputs.append(matmul(weights, v))
        attended = concat(outputs, axis=1) if len(outputs) > 1 else outputs[0]
        x = x + (matmul(attended, p["w_out"]) + p["b_out"])
        h = layer_norm(x, p["ln2_gain"], p["ln2_bias"])
        h = leaky_relu(matmul(h, p["w_fc1"]) + p["b_fc1"])
        return x + (matmul(h, p["w_fc2"]) + p["b_fc2"])


def smooth_max_pool(rows, projection, sharpness=POOL_SHARPNESS):
    """Column-wise softmax-weighted mean of rows @ projection (N x D -> D)

    Tends to the column max as sharpness grows; invariant to row order.
    """
    scores = matmul(rows, projection)
    weights = softmax(scores * sharpness, axis=0)
    return sum_axis(weights * scores, axis=0)


def _set_frozen(named, frozen):
    for _, tensor in named:
        tensor.requires_grad = not frozen


class VisionEncoder:
    """Patchify -> linear embed -> [CLS] + positions -> blocks -> LN -> pooling head

    Output row 0 is the class token, rows 1..N_i follow the patch grid in
    row-major order. Random frozen attention barely mixes patch content into
    row 0, so a frozen pooling head adds a smooth max over projected patch
    rows to the class token before a final LN (CLIP's attention pool also
    writes its global summary into the first output row).
    """

    def __init__(self, image_size=64, patch_size=8, dim=32, depth=2, heads=4, seed=0, frozen=True):
        if image_size % patch_size:
            raise ShapeError(f"image size {image_size} is not divisible by patch size {patch_size}")
        rng = np.random.default_rng([seed, 101])
        self.image_size, self.patch_size, self.dim = image_size, patch_size, dim
        self.grid = image_size // patch_size
        self.n_patches = self.grid * self.grid
        patch_width = patch_size * patch_size * 3
        self.patch_proj = Tensor(_gaussian(rng, (patch_width, dim)), name="vision.patch_proj")
        self.class_embedding = Tensor(_gaussian(rng, (1, dim)), name="vision.class_embedding")
        self.positional = Tensor(_gaussian(rng, (self.n_patches + 1, dim)), name="vision.positional")
        self.blocks = [TransformerBlock(dim, heads, rng, f"vision.block{i}") for i in range(depth)]
        self.ln_gain = Tensor(np.ones(dim), name="vision.ln_post_gain")
        self.ln_bias = Tensor(np.zeros(dim), name="vision.ln_post_bias")
        # drawn last so the transformer weights do not depend on the head
        self.pool_proj = Tensor(_gaussian(rng, (dim, dim), std=1.0 / np.sqrt(dim)), name="vision.pool_proj")
        self.pool_ln_gain = Tensor(np.ones(dim), name="vision.pool_ln_gain")
        self.pool_ln_bias = Tensor(np.zeros(dim), name="vision.pool_ln_bias")
        self.frozen = frozen
        _set_frozen(self.named_parameters(), frozen)

    def named_parameters(self):
        named = [("vision.patch_proj", self.patch_proj),
                 ("vision.class_embedding", self.class_embedding),
                 ("vision.positional", self.positional)]
        for block in self.blocks:
            named.extend(block.named_parameters())
        named.extend([("vision.ln_post_gain", self.ln_gain), ("vision.ln_post_bias", self.ln_bias),
                      ("vision.pool_proj", self.pool_proj),
                      ("vision.pool_ln_gain", self.pool_ln_gain), ("vision.pool_ln_bias", self.pool_ln_bias)])
        return named

    def patchify(self, image):
        image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected an H x W x 3 image, got {image.shape}")
        height, width, _ = image.shape
        p = self.patch_size
        if height % p or width % p:
            raise ShapeError(f"image {height}x{width} is not divisible by patch size {p}")
        if height != self.image_size or width != self.image_size:
            raise ShapeError(f"encoder was built for {self.image_size}x{self.image_size}, got {height}x{width}")
        if image.min() < 0.0 or image.max() > 1.0:
            raise InputError("pixel values must lie in [0, 1]")
        grid_h, grid_w = height // p, width // p
        patches = image.reshape(grid_h, p, grid_w, p, 3).transpose(0, 2, 1, 3, 4)
        return patches.reshape(grid_h * grid_w, p * p * 3)

    def embed_patches(self, image):
        """Patch embeddings before the class token and positions are added"""
        return matmul(Tensor(self.patchify(image)), self.patch_proj)

    def encode_image(self, image):
        tokens = concat([self.class_embedding, self.embed_patches(image)], axis=0)
        x = tokens + self.positional
        for block in self.blocks:
            x = block(x)
        x = layer_norm(x, self.ln_gain, self.ln_bias)
        return concat([self.class_row(x), x[1:]], axis=0)

    def class_row(self, normed):
        """LN(cls + smooth_max(patches @ pool_proj)) as a 1 x D row"""
        pooled = reshape(smooth_max_pool(normed[1:], self.pool_proj), (1, self.dim))
        return layer_norm(normed[0:1] + pooled, self.pool_ln_gain, self.pool_ln_bias)


class TextEncoder:
    """Per-token text features (N_t x D) for a TokenSequence"""

    def __init__(self, vocabulary=DEFAULT_VOCABULARY, dim=32, depth=2, heads=4, length=16, seed=0, frozen=True):
        rng = np.random.default_rng([seed, 202])
        self.vocabulary = vocabulary
        self.dim, self.length = dim, length
        self.token_embedding = Tensor(_gaussian(rng, (len(vocabulary), dim)), name="text.token_embedding")
        self.positional = Tensor(_gaussian(rng, (length, dim)), name="text.positional")
        self.blocks = [TransformerBlock(dim, heads, rng, f"text.block{i}") for i in range(depth)]
        self.ln_gain = Tensor(np.ones(dim), name="text.ln_final_gain")
        self.ln_bias = Tensor(np.zeros(dim), name="text.ln_final_bias")
        self.frozen = frozen
        _set_frozen(self.named_parameters(), frozen)

    def named_parameters(self):
        named = [("text.token_embedding", self.token_embedding), ("text.positional", self.positional)]
        for block in self.blocks:
            named.extend(block.named_parameters())
        named.extend([("text.ln_final_gain", self.ln_gain), ("text.ln_final_bias", self.ln_bias)])
        return named

    def embed_sequence(self, sequence):
        parts = []
        if sequence.anchor_ids:
            parts.append(take(self.token_embedding, np.array(sequence.anchor_ids)))
        if sequence.learnable:
            for token in sequence.learnable:
                if token.shape != (self.dim,):
                    raise ShapeError(f"learnable token must have shape ({self.dim},), got {token.shape}")
            parts.append(stack(sequence.learnable, axis=0))
        if sequence.pad_count:
            parts.append(take(self.token_embedding, np.full(sequence.pad_count, self.vocabulary.pad_id)))
        return concat(parts, axis=0) if len(parts) > 1 else parts[0]

    def encode_text(self, sequence):
        if sequence.length != self.length:
            raise ShapeError(f"token sequence length {sequence.length} != text length {self.length}")
        x = self.embed_sequence(sequence) + self.positional
        for block in self.blocks:
            x = block(x)
        return layer_norm(x, self.ln_gain, self.ln_bias)
