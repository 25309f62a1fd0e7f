import numpy as np
import pytest

from adaptation import (AdapterBranch, PromptLearner, apply_adapter, build_prompts, det_features,
                        seg_features, fuse_stage_outputs)
from encoders import TextEncoder, DEFAULT_VOCABULARY
from errors import ShapeError
from numerics import Tensor, Tape, backward, sum_all


def _tie_stages(branch):
    first = branch.stages[0].params
    for stage in branch.stages[1:]:
        for key, tensor in stage.params.items():
            tensor.data = first[key].data.copy()


def test_adapter_preserves_shape(rng):
    branch = AdapterBranch(dim=32, seed=0, name="det")
    features = Tensor(rng.normal(size=(65, 32)))
    assert det_features(features, branch).shape == (65, 32)
    assert seg_features(features, AdapterBranch(dim=32, seed=0, name="seg")).shape == (64, 32)


def test_zero_input_with_zero_biases_gives_zero():
    branch = AdapterBranch(dim=8, seed=3, name="det")
    out = branch(Tensor(np.zeros((5, 8))))
    assert np.array_equal(out.data, np.zeros((5, 8)))


def test_tied_stages_reproduce_a_single_stage(rng):
    branch = AdapterBranch(dim=8, seed=1, name="det")
    _tie_stages(branch)
    features = Tensor(rng.normal(size=(6, 8)))
    single = apply_adapter(features, branch, 1)
    assert np.array_equal(branch(features).data, single.data)


def test_zeroed_stage_scales_output_by_three_quarters(rng):
    branch = AdapterBranch(dim=8, seed=1, name="det")
    _tie_stages(branch)
    features = Tensor(rng.normal(size=(6, 8)))
    single = apply_adapter(features, branch, 1).data
    for tensor in branch.stages[3].params.values():
        if tensor.name.endswith(("w1", "w2")):
            tensor.data = np.zeros_like(tensor.data)
    assert np.allclose(branch(features).data, 0.75 * single, atol=1e-12)


def test_stage_index_out_of_range(rng):
    branch = AdapterBranch(dim=8, seed=0, name="det")
    with pytest.raises(ValueError):
        apply_adapter(Tensor(rng.normal(size=(2, 8))), branch, 5)
    with pytest.raises(ShapeError):
        fuse_stage_outputs([Tensor(np.zeros(2))] * 3)


def test_det_and_seg_branches_are_independent(rng):
    det = AdapterBranch(dim=8, seed=0, name="det")
    seg = AdapterBranch(dim=8, seed=0, name="seg")
    assert not np.array_equal(det.stages[0].params["w1"].data, seg.stages[0].params["w1"].data)
    features = Tensor(rng.normal(size=(5, 8)))
    weights = rng.normal(size=(5, 8))
    with Tape() as tape:
        loss = sum_all(det_features(features, det) * weights)
    backward(loss, tape)
    assert all(t.grad is not None for _, t in det.named_parameters())
    assert all(t.grad is None for _, t in seg.named_parameters())


def test_build_prompts_fills_slots_with_learnable_tokens():
    prompt = PromptLearner(dim=32, n_tokens=10, length=16, category="brain")
    normal, abnormal = build_prompts(prompt)
    assert normal.pad_count == 0 and abnormal.pad_count == 0
    assert all(a is b for a, b in zip(normal.learnable, abnormal.learnable))
    assert normal.anchor_ids != abnormal.anchor_ids


def test_build_prompts_without_learnable_tokens_pads():
    prompt = PromptLearner(dim=8, n_tokens=0, length=16, category="brain")
    normal, _ = build_prompts(prompt)
    assert normal.learnable == [] and normal.pad_count == 10
    assert normal.query_mask().sum() == 6


def test_build_prompts_overflow():
    prompt = PromptLearner(dim=8, n_tokens=11, length=16, category="brain")
    with pytest.raises(ShapeError):
        build_prompts(prompt)


def test_shared_token_gradient_collects_both_prompts(rng):
    prompt = PromptLearner(dim=8, n_tokens=2, length=8, category="brain")
    encoder = TextEncoder(vocabulary=DEFAULT_VOCABULARY, dim=8, depth=1, heads=2, length=8)
    normal, abnormal = prompt.build_prompts()
    weights = rng.normal(size=(8, 8))
    with Tape() as tape:
        only_normal = sum_all(encoder.encode_text(normal) * weights)
    backward(only_normal, tape)
    from_normal = prompt.tokens[0].grad.copy()
    prompt.tokens[0].zero_grad()
    with Tape() as tape:
        both = sum_all(encoder.encode_text(normal) * weights) + sum_all(encoder.encode_text(abnormal) * weights)
    backward(both, tape)
    assert not np.allclose(prompt.tokens[0].grad, from_normal)


def test_prompt_parameter_names():
    prompt = PromptLearner(dim=4, n_tokens=3, length=16)
    assert [name for name, _ in prompt.named_parameters()] == ["prompt.token01", "prompt.token02", "prompt.token03"]
    assert all(name == t.name for name, t in prompt.named_parameters())
