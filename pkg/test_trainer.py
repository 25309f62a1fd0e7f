import os

import numpy as np
import pandas as pd
import pytest

from checkpoint import load_checkpoint
from errors import InputError, ConfigError, TrainingDivergedError
from config import load_settings
from synthdata import SyntheticDataset, generate_dataset
from trainer import (Trainer, evaluate_model, evaluate_checkpoint, gradient_suite, operator_checks,
                     LOG_COLUMNS, LAST_CHECKPOINT, BEST_CHECKPOINT, EPOCH_LOG)


def test_training_writes_log_and_checkpoints(micro_settings, micro_dataset):
    result = Trainer(micro_settings, micro_dataset, verbose=False).train()
    out = micro_settings.train.output_dir
    for name in (LAST_CHECKPOINT, BEST_CHECKPOINT, EPOCH_LOG):
        assert os.path.exists(os.path.join(out, name))
    log = pd.read_csv(os.path.join(out, EPOCH_LOG))
    assert list(log.columns) == LOG_COLUMNS
    assert len(log) == 2
    first = log.iloc[0]
    assert np.isfinite(first[["l_cls", "l_seg", "l_mc", "l_total"]].astype(float)).all()
    assert first["l_total"] == pytest.approx(first["l_cls"] + first["l_seg"] + first["l_mc"])
    assert result.best_epoch in result.reports


def test_same_seed_same_run(micro_settings, micro_dataset):
    a = Trainer(micro_settings, micro_dataset, output_dir="", verbose=False).train()
    b = Trainer(micro_settings, micro_dataset, output_dir="", verbose=False).train()
    pd.testing.assert_frame_equal(a.log, b.log)
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()


def test_frozen_encoders_do_not_move(micro_settings, micro_dataset):
    trainer = Trainer(micro_settings, micro_dataset, output_dir="", verbose=False)
    frozen_before = trainer.model.params.digest(frozen_only=True)
    everything_before = trainer.model.params.digest()
    trainer.train()
    assert trainer.model.params.digest(frozen_only=True) == frozen_before
    assert trainer.model.params.digest() != everything_before


def test_evaluation_is_repeatable(micro_model, micro_dataset):
    first, preds_a = evaluate_model(micro_model, micro_dataset.test)
    second, preds_b = evaluate_model(micro_model, micro_dataset.test)
    assert first.to_text() == second.to_text()
    assert all(np.array_equal(a[1], b[1]) for a, b in zip(preds_a, preds_b))


def test_best_checkpoint_reproduces_its_report(micro_settings, micro_dataset):
    result = Trainer(micro_settings, micro_dataset, verbose=False).train()
    checkpoint = load_checkpoint(os.path.join(micro_settings.train.output_dir, BEST_CHECKPOINT))
    report, _ = evaluate_checkpoint(checkpoint, micro_dataset.test)
    assert report.to_text() == result.reports[result.best_epoch].to_text()


def test_single_class_training_split(micro_settings, micro_dataset):
    normals = SyntheticDataset([s for s in micro_dataset.train if s.label == 0], micro_dataset.test)
    with pytest.raises(InputError):
        Trainer(micro_settings, normals, verbose=False)


def test_image_size_mismatch(micro_settings, micro_dataset):
    with pytest.raises(ConfigError):
        Trainer(micro_settings.with_train(image_size=32), micro_dataset, verbose=False)


def test_evaluate_checkpoint_rejects_size_mismatches(micro_settings, micro_dataset):
    trainer = Trainer(micro_settings.with_train(epochs=1), micro_dataset, output_dir="", verbose=False)
    checkpoint = trainer.train().checkpoint
    with pytest.raises(ConfigError):
        evaluate_checkpoint(checkpoint, micro_dataset.test, image_size=32)
    bigger = generate_dataset(micro_settings.with_train(image_size=32).dataset_spec())
    with pytest.raises(ConfigError):
        evaluate_checkpoint(checkpoint, bigger.test, image_size=32)
    report, _ = evaluate_checkpoint(checkpoint, micro_dataset.test, image_size=16)
    assert report.n_images == len(micro_dataset.test)


def test_divergence_is_reported_with_checkpoint(micro_settings, micro_dataset):
    trainer = Trainer(micro_settings, micro_dataset, verbose=False)
    trainer.model.decoder.w2.data[...] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        trainer.train()
    assert info.value.checkpoint_path.endswith(LAST_CHECKPOINT)


def test_epoch_plan_is_seeded(micro_settings, micro_dataset):
    trainer = Trainer(micro_settings, micro_dataset, output_dir="", verbose=False)
    order_a, flips_a = trainer.epoch_plan(3)
    order_b, flips_b = trainer.epoch_plan(3)
    assert np.array_equal(order_a, order_b) and np.array_equal(flips_a, flips_b)
    no_flip = Trainer(micro_settings.with_train(augment_flip=False), micro_dataset, output_dir="", verbose=False)
    assert not no_flip.epoch_plan(3)[1].any()


def test_operator_checks_cover_the_kernels():
    names = [name for name, _, _ in operator_checks()]
    for kernel in ("matmul", "softmax", "layer_norm", "leaky_relu", "cosine_similarity", "bilinear_upsample",
                   "bce_loss", "dice_loss", "focal_loss", "mc_loss"):
        assert kernel in names


def test_gradient_suite_passes(micro_settings):
    rows = gradient_suite(micro_settings, tolerance=1e-4, verbose=False)
    assert any(row.name.startswith("end_to_end[prompt") for row in rows)
    assert any(row.name == "end_to_end[tpca.w_q]" for row in rows)
    failed = [(row.name, row.max_rel_error) for row in rows if not row.passed]
    assert not failed


DESK_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs", "desk.cfg")


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    settings = load_settings(DESK_CONFIG, env={})
    settings = settings.with_train(output_dir=str(tmp_path_factory.mktemp("desk")))
    dataset = generate_dataset(settings.dataset_spec())
    return Trainer(settings, dataset, verbose=False).train()


@pytest.mark.slow
def test_desk_run_reaches_reference_dice_and_accuracy(desk_run):
    final = desk_run.reports[max(desk_run.reports)]
    assert final.dice_percent >= 70.0
    assert final.accuracy_percent >= 90.0


@pytest.mark.slow
def test_desk_run_total_loss_falls_by_epoch_ten(desk_run):
    log = desk_run.log.set_index("epoch")
    assert log.loc[10, "l_total"] < log.loc[0, "l_total"]


@pytest.mark.slow
def test_desk_run_classifier_leaves_the_coin_flip(desk_run):
    final = desk_run.reports[max(desk_run.reports)]
    assert final.image_auroc_percent > 90.0
    assert desk_run.log["l_cls"].iloc[-1] < 0.65
