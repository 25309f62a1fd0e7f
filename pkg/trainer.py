"""
Training loop, evaluation and the gradient-check suite

Trainer.train runs seeded mini-batch Adam on L = L_cls + L_seg (+ L_MC),
logs a LossBreakdown per epoch, evaluates on the test split every
`eval_every` epochs and keeps last.ckpt / best.ckpt in the output directory.
"""

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from checkpoint import Checkpoint, restore_model
from errors import (InputError, ConfigError, LossError, NumericsError, OptimizerError,
                    TrainingDivergedError)
from classifier import Prototypes
from losses import bce_loss, dice_loss, focal_loss, seg_loss, mc_loss, total_loss
from metrics import build_report
from model import LesionSegModel
import numerics as nx
from numerics import DIAGNOSTICS, Tape, Tensor, backward, suspend_tape, finite_diff_check
from optimizer import Adam
from synthdata import generate_sample

LOG_COLUMNS = ["epoch", "l_cls", "l_dice", "l_focal", "l_seg", "l_mc", "l_total",
               "zero_norm_cosine", "test_dice", "test_accuracy"]
LAST_CHECKPOINT = "last.ckpt"
BEST_CHECKPOINT = "best.ckpt"
EPOCH_LOG = "epoch_log.csv"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: pd.DataFrame
    best_dice: Optional[float] = None
    best_epoch: Optional[int] = None
    reports: Dict[int, object] = field(default_factory=dict)
    output_dir: Optional[str] = None


def batch_losses(model, outputs, samples, text_features):
    """LossBreakdown for one batch of forward outputs"""
    labels = [s.label for s in samples]
    l_cls = bce_loss([o.score for o in outputs], labels)
    l_seg, dice, focal = seg_loss([o.seg_map for o in outputs], [s.mask for s in samples], with_parts=True)
    l_mc = None
    if model.config.use_mc_loss:
        l_mc = mc_loss([o.image_feature for o in outputs], text_features.prototypes, labels,
                       model.config.margin)
    return total_loss(l_cls, l_seg, l_mc, l_dice=dice, l_focal=focal)


def evaluate_model(model, samples):
    """Full forward pass on `samples`; returns (MetricsReport, [PredictionPair-like])"""
    if not samples:
        raise InputError("cannot evaluate an empty split")
    with suspend_tape():
        text_features = model.encode_prompts()
        outputs = [model.forward(s.image, text_features) for s in samples]
        breakdown = batch_losses(model, outputs, samples, text_features)
    seg_maps = [o.seg_map.data.copy() for o in outputs]
    scores = [o.score.item() for o in outputs]
    report = build_report(seg_maps, [s.mask for s in samples], scores, [s.label for s in samples],
                          breakdown.as_row())
    return report, list(zip(scores, seg_maps))


def model_from_checkpoint(checkpoint, expected_image_size=None):
    settings = checkpoint.settings()
    if expected_image_size is not None and settings.train.image_size != expected_image_size:
        raise ConfigError(f"checkpoint was trained at {settings.train.image_size}px but the data is "
                          f"{expected_image_size}px")
    model = LesionSegModel(settings.train)
    restore_model(checkpoint, model)
    return model, settings


def evaluate_checkpoint(checkpoint, samples, image_size=None):
    """Rebuild the model from `checkpoint` and evaluate it on `samples`

    `image_size` is the size the caller's configuration asks for; the samples
    and the checkpoint must both agree with it.
    """
    if not samples:
        raise InputError("cannot evaluate an empty split")
    size = samples[0].image.shape[0]
    if image_size is not None and image_size != size:
        raise ConfigError(f"config image_size {image_size} but samples are {size}px")
    model, _ = model_from_checkpoint(checkpoint, size)
    return evaluate_model(model, samples)


class Trainer:
    def __init__(self, settings, dataset, model=None, output_dir=None, verbose=True):
        self.settings = settings
        self.config = settings.train
        self.dataset = dataset
        labels = {s.label for s in dataset.train}
        if labels != {0, 1}:
            raise InputError("training split must contain both normal and abnormal samples")
        size = dataset.train[0].image.shape[0]
        if size != self.config.image_size:
            raise ConfigError(f"config image_size {self.config.image_size} but samples are {size}px")
        self.model = model or LesionSegModel(self.config)
        self.optimizer = Adam(self.model.params.trainable(), lr=self.config.learning_rate)
        self.output_dir = output_dir if output_dir is not None else self.config.output_dir
        self.verbose = verbose
        if verbose:
            print(f"[Trainer] {self.model.params.count()} trainable / "
                  f"{self.model.params.count(trainable=False)} frozen values, "
                  f"{len(dataset.train)} train samples")

    def _path(self, name):
        return os.path.join(self.output_dir, name) if self.output_dir else None

    def _save(self, name):
        checkpoint = Checkpoint.from_model(self.model, self.settings, self.optimizer)
        path = self._path(name)
        if path:
            checkpoint.save(path)
        return checkpoint

    def epoch_plan(self, epoch):
        """Seeded (order, flips) for one epoch"""
        rng = np.random.default_rng([self.config.seed, 707, epoch])
        n = len(self.dataset.train)
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5
        if not self.config.augment_flip:
            flips[:] = False
        return order, flips

    def step(self, samples, flips):
        """One Adam step on a mini-batch; returns its LossBreakdown"""
        self.optimizer.zero_grad()
        views = [s.flipped() if f else s for s, f in zip(samples, flips)]
        with Tape() as tape:
            text_features = self.model.encode_prompts()
            outputs = [self.model.forward(v.image, text_features, key=("train", v.sample_id, bool(f)))
                       for v, f in zip(views, flips)]
            breakdown = batch_losses(self.model, outputs, views, text_features)
        backward(breakdown.total, tape)
        self.optimizer.step()
        return breakdown

    def run_epoch(self, epoch):
        order, flips = self.epoch_plan(epoch)
        train = self.dataset.train
        totals = dict.fromkeys(LOG_COLUMNS[1:7], 0.0)
        bs = self.config.batch_size
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            breakdown = self.step([train[i] for i in idx], [flips[i] for i in idx])
            for key, value in breakdown.as_row().items():
                totals[key] += value * len(idx)
        return {key: value / len(order) for key, value in totals.items()}

    def train(self):
        config = self.config
        if self.output_dir:
            os.makedirs(self.output_dir, exist_ok=True)
        rows, reports = [], {}
        best_dice, best_epoch = None, None
        checkpoint = self._save(LAST_CHECKPOINT)
        DIAGNOSTICS.reset()

        for epoch in range(config.epochs):
            try:
                row = self.run_epoch(epoch)
            except (LossError, NumericsError, OptimizerError) as e:
                raise TrainingDivergedError(f"training diverged at epoch {epoch}: {e}",
                                            self._path(LAST_CHECKPOINT)) from e
            row = {"epoch": epoch, **row, "test_dice": np.nan, "test_accuracy": np.nan}

            if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
                report, _ = evaluate_model(self.model, self.dataset.test)
                reports[epoch] = report
                row["test_dice"] = report.dice_percent
                row["test_accuracy"] = report.accuracy_percent
                if best_dice is None or report.dice_percent > best_dice:
                    best_dice, best_epoch = report.dice_percent, epoch
                    self._save(BEST_CHECKPOINT)

            row["zero_norm_cosine"] = DIAGNOSTICS.reset()["zero_norm_cosine"]
            rows.append(row)
            checkpoint = self._save(LAST_CHECKPOINT)
            if self.verbose:
                self._print_epoch(row)

        log = pd.DataFrame(rows, columns=LOG_COLUMNS)
        if self.output_dir:
            log.to_csv(self._path(EPOCH_LOG), index=False)
        if self.verbose:
            print(f"[Trainer] Done. Best test Dice {best_dice:.2f}% at epoch {best_epoch}")
        return TrainResult(checkpoint, log, best_dice, best_epoch, reports, self.output_dir)

    def _print_epoch(self, row):
        line = (f"[Trainer] epoch {row['epoch'] + 1}/{self.config.epochs} | L={row['l_total']:.4f} "
                f"(cls {row['l_cls']:.4f}, seg {row['l_seg']:.4f}, mc {row['l_mc']:.4f})")
        if not np.isnan(row["test_dice"]):
            line += f" | test Dice {row['test_dice']:.2f}% acc {row['test_accuracy']:.2f}%"
        print(line)
        if row["zero_norm_cosine"]:
            print(f"[WARNING] {row['zero_norm_cosine']} zero-norm cosine inputs this epoch (treated as 0)")


def train(settings, dataset, output_dir=None, verbose=True):
    return Trainer(settings, dataset, output_dir=output_dir, verbose=verbose).train()


# ---------------------------------------------------------------------------
# Gradient suite
# ---------------------------------------------------------------------------

@dataclass
class GradCheck:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.normal(size=shape)
    return np.sign(x) * (gap + np.abs(x))


def operator_checks(seed=0):
    """(name, f, x) triples covering every differentiable kernel and loss"""
    rng = np.random.default_rng([seed, 808])
    a = rng.normal(size=(3, 4))
    gain, bias = rng.normal(size=4), rng.normal(size=4)
    w = rng.normal(size=(4, 2))
    v = rng.normal(size=4)
    grid = rng.normal(size=(2, 2, 2))
    mask = (rng.random((4, 4)) < 0.4).astype(float)
    probs = rng.uniform(0.05, 0.95, size=(4, 4))
    scores = rng.uniform(0.05, 0.95, size=4)
    protos = Prototypes(Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4)))
    weights = rng.normal(size=(3, 4))

    def weighted(out):
        return nx.sum_all(out * Tensor(rng_fixed(out.shape)))

    fixed = {}

    def rng_fixed(shape):
        if shape not in fixed:
            fixed[shape] = np.random.default_rng([seed, 809, len(fixed)]).normal(size=shape)
        return fixed[shape]

    return [
        ("matmul", lambda x: weighted(nx.matmul(x, Tensor(w))), Tensor(a)),
        ("softmax", lambda x: weighted(nx.softmax(x, axis=1)), Tensor(a)),
        ("layer_norm", lambda x: weighted(nx.layer_norm(x, Tensor(gain), Tensor(bias))), Tensor(a)),
        ("layer_norm_gain", lambda g: weighted(nx.layer_norm(Tensor(a), g, Tensor(bias))), Tensor(gain)),
        ("leaky_relu", lambda x: weighted(nx.leaky_relu(x)), Tensor(_away_from_zero(rng, (3, 4)))),
        ("mean_axis", lambda x: weighted(nx.mean_axis(x, axis=0)), Tensor(a)),
        ("concat", lambda x: weighted(nx.concat_axis(x, x * 2.0, axis=1)), Tensor(a)),
        ("cosine_similarity", lambda x: nx.cosine_similarity(x, Tensor(weights[0])), Tensor(v)),
        ("bilinear_upsample", lambda x: weighted(nx.bilinear_upsample(x, 5, 5)), Tensor(grid)),
        ("bce_loss", lambda x: bce_loss(x, [0, 1, 1, 0]), Tensor(scores)),
        ("dice_loss", lambda x: dice_loss(x, mask), Tensor(probs)),
        ("focal_loss", lambda x: focal_loss(x, mask), Tensor(probs)),
        ("mc_loss", lambda x: mc_loss([x, x * -1.0], protos, [0, 1], 0.8), Tensor(v)),
    ]


def _micro_batch(settings):
    spec = settings.dataset_spec()
    return [generate_sample(spec, 0, 0), generate_sample(spec, 0, 1)]


def end_to_end_checks(settings, coords_per_param=4):
    """Total-loss gradient of selected trainable tensors on a two-image micro batch"""
    model = LesionSegModel(settings.train)
    samples = _micro_batch(settings)

    def objective(_):
        text_features = model.encode_prompts()
        outputs = [model.forward(s.image, text_features) for s in samples]
        return batch_losses(model, outputs, samples, text_features).total

    checks = []
    wanted = ("det_adapter.stage1.w1", "det_adapter.stage2.ln1_gain", "seg_adapter.stage1.w2",
              "prompt.token01", "tpca.w_q", "tpca.w_k", "decoder.w1", "decoder.b2")
    for name in wanted:
        if name not in model.params:
            continue
        tensor = model.params[name]
        coords = range(min(coords_per_param, tensor.size))
        checks.append((f"end_to_end[{name}]", objective, tensor, coords))
    return checks


def gradient_suite(settings, tolerance=1e-4, h=1e-5, verbose=True):
    """Run every check; returns a list of GradCheck rows"""
    rows: List[GradCheck] = []
    for name, f, x in operator_checks(settings.train.seed):
        rows.append(GradCheck(name, finite_diff_check(f, x, h=h), tolerance))
    for name, f, x, coords in end_to_end_checks(settings):
        rows.append(GradCheck(name, finite_diff_check(f, x, h=h, coords=coords), tolerance))
    if verbose:
        for row in rows:
            status = "ok" if row.passed else "FAIL"
            print(f"[GradCheck] {row.name:<40} max rel err {row.max_rel_error:.3e}  {status}")
    return rows
