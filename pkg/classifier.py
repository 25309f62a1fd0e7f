"""
Image-level anomaly score from the DetAdapter class token and the mean text prototypes
"""

from dataclasses import dataclass

from errors import ShapeError
from numerics import Tensor, mean_axis, stack, matmul, reshape, softmax

DECISION_THRESHOLD = 0.5


@dataclass
class Prototypes:
    normal: Tensor
    abnormal: Tensor

    @property
    def stacked(self):
        """T = [t_n, t_a] (2 x D), raw means, no normalization"""
        return stack([self.normal, self.abnormal], axis=0)

    def swapped(self):
        return Prototypes(self.abnormal, self.normal)


def text_prototypes(normal_tokens, abnormal_tokens):
    if normal_tokens.shape != abnormal_tokens.shape:
        raise ShapeError(f"prompt features differ in shape: {normal_tokens.shape} vs {abnormal_tokens.shape}")
    return Prototypes(mean_axis(normal_tokens, axis=0), mean_axis(abnormal_tokens, axis=0))


def class_logits(global_token, prototypes):
    """[f0 . t_n, f0 . t_a]"""
    dim = prototypes.normal.shape[0]
    if global_token.shape != (dim,):
        raise ShapeError(f"global token must have shape ({dim},), got {global_token.shape}")
    return reshape(matmul(prototypes.stacked, reshape(global_token, (dim, 1))), (2,))


def class_probabilities(global_token, prototypes):
    """softmax over (normal, abnormal)"""
    return softmax(class_logits(global_token, prototypes), axis=0)


def anomaly_score(global_token, prototypes):
    """S: the abnormal entry of the two-way softmax"""
    return class_probabilities(global_token, prototypes)[1]


def predict_label(score):
    """1 (abnormal) when S > 0.5; a tie at exactly 0.5 counts as normal"""
    return int(float(score) > DECISION_THRESHOLD)
