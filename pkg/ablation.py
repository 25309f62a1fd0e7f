"""
Ablation grids: margin tau, number of learnable tokens, component toggles

Every grid point trains a fresh model with the shared seed and evaluates
it on the test split. Tables are written as ablation_<kind>.csv.
"""

import os
from dataclasses import dataclass
from typing import Optional

import pandas as pd

from errors import ConfigError
from trainer import Trainer, evaluate_model

MARGIN_GRID = (0.2, 0.4, 0.6, 0.8)
TOKEN_GRID = (10, 20, 35)

# (row label, use_learnable_prompt, use_tpca, use_mc_loss)
COMPONENT_ROWS = (
    ("adapters only", False, False, False),
    ("+ learnable prompt", True, False, False),
    ("+ token-patch attention", True, True, False),
    ("+ margin loss (full)", True, True, True),
)
TPCA_OFF_LABEL = "full without token-patch attention"

TABLE_COLUMNS = ["setting", "value", "split", "dice_percent", "accuracy_percent",
                 "pauc_percent", "image_auroc_percent", "final_l_total"]


@dataclass
class AblationResult:
    kind: str
    table: pd.DataFrame
    path: Optional[str] = None
    hard_full_beats_tpca_off: Optional[bool] = None


def _run(settings, dataset, setting, value, split, verbose):
    trainer = Trainer(settings, dataset, output_dir="", verbose=False)
    result = trainer.train()
    report, _ = evaluate_model(trainer.model, dataset.test)
    if verbose:
        print(f"[Ablation] {setting}={value} ({split}): Dice {report.dice_percent:.2f}% "
              f"acc {report.accuracy_percent:.2f}%")
    return {
        "setting": setting, "value": value, "split": split,
        "dice_percent": report.dice_percent, "accuracy_percent": report.accuracy_percent,
        "pauc_percent": report.pauc_percent, "image_auroc_percent": report.image_auroc_percent,
        "final_l_total": float(result.log["l_total"].iloc[-1]),
    }


def margin_grid(settings, dataset, grid=MARGIN_GRID, verbose=True):
    if not grid:
        raise ConfigError("margin grid is empty")
    return [_run(settings.with_train(margin=float(tau), use_mc_loss=True), dataset,
                 "margin", float(tau), "easy", verbose) for tau in grid]


def token_grid(settings, dataset, grid=TOKEN_GRID, verbose=True):
    """Text length grows to fit the anchor words plus K tokens"""
    if not grid:
        raise ConfigError("token grid is empty")
    rows = []
    for k in grid:
        length = max(settings.train.text_length, settings.train.anchor_length + int(k))
        point = settings.with_train(n_learnable_tokens=int(k), text_length=length, use_learnable_prompt=True)
        rows.append(_run(point, dataset, "learnable_tokens", int(k), "easy", verbose))
    return rows


def component_grid(settings, dataset, hard_dataset=None, verbose=True):
    rows = []
    for label, prompt, tpca, mc in COMPONENT_ROWS:
        point = settings.with_train(use_learnable_prompt=prompt, use_tpca=tpca, use_mc_loss=mc)
        rows.append(_run(point, dataset, label, "", "easy", verbose))
    if hard_dataset is not None:
        rows.extend(hard_split_rows(settings, hard_dataset, verbose))
    return rows


def hard_split_rows(settings, hard_dataset, verbose=True):
    """Full model and the full model without TPCA, both on the low-contrast split"""
    full = settings.with_train(use_learnable_prompt=True, use_tpca=True, use_mc_loss=True)
    return [_run(full, hard_dataset, COMPONENT_ROWS[-1][0], "", "low-contrast", verbose),
            _run(full.with_train(use_tpca=False), hard_dataset, TPCA_OFF_LABEL, "", "low-contrast", verbose)]


def full_beats_tpca_off(table):
    """(verdict, full Dice, TPCA-off Dice) over the low-contrast rows of `table`"""
    hard = table[table["split"] == "low-contrast"].set_index("setting")["dice_percent"]
    full, off = float(hard[COMPONENT_ROWS[-1][0]]), float(hard[TPCA_OFF_LABEL])
    return full >= off, full, off


def ablate(kind, settings, dataset, hard_dataset=None, output_dir=None, verbose=True):
    """Run one grid (`margin`, `tokens` or `components`) and write its table"""
    if kind == "margin":
        rows = margin_grid(settings, dataset, verbose=verbose)
    elif kind == "tokens":
        rows = token_grid(settings, dataset, verbose=verbose)
    elif kind == "components":
        rows = component_grid(settings, dataset, hard_dataset, verbose=verbose)
    else:
        raise ConfigError(f"unknown ablation '{kind}' (expected margin, tokens or components)")

    table = pd.DataFrame(rows, columns=TABLE_COLUMNS)
    verdict = None
    if kind == "components" and hard_dataset is not None:
        verdict, full, off = full_beats_tpca_off(table)
        if verbose:
            print(f"[Ablation] low-contrast: full Dice {full:.2f}% vs TPCA-off {off:.2f}% -> "
                  f"{'full model ahead' if verdict else 'TPCA-off ahead'}")

    path = None
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        path = os.path.join(output_dir, f"ablation_{kind}.csv")
        table.to_csv(path, index=False)
        if verbose:
            print(f"[Ablation] Wrote {len(table)} rows to {path}")
    return AblationResult(kind, table, path, verdict)
