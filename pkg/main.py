# lesionseg desk pipeline - command line entry point
import argparse
import os
import sys

import pandas as pd
from dotenv import load_dotenv

from ablation import ablate
from checkpoint import load_checkpoint
from config import TRAIN_KEYS, DATA_KEYS, load_settings
from errors import LesionSegError
from heatmap import export_heatmap, export_panel
from synthdata import generate_dataset, export_dataset, load_dataset, dataset_digest
from trainer import Trainer, gradient_suite, evaluate_checkpoint, LAST_CHECKPOINT, BEST_CHECKPOINT

load_dotenv()

HERE = os.path.dirname(os.path.abspath(__file__))
MICRO_CONFIG = os.path.join(HERE, "configs", "micro.cfg")


def _flag(key):
    return "--" + key.replace("_", "-")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--data-dir", help="read train/ and test/ manifest splits instead of generating data")
    keys = argparse.ArgumentParser(add_help=False)
    group = keys.add_argument_group("configuration keys (override the config file)")
    for key in list(TRAIN_KEYS) + list(DATA_KEYS):
        group.add_argument(_flag(key), dest=key, default=None, metavar="VALUE")

    parser = argparse.ArgumentParser(prog="lesionseg", description="Desk-scale lesion segmentation training and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", parents=[common, keys], help="generate and export the synthetic benchmark")
    p.add_argument("--out", help="export directory (default: <output_dir>/data)")
    p.add_argument("--hard", action="store_true", help="export the low-contrast variant")
    p.set_defaults(handler=cmd_generate_data)

    p = sub.add_parser("train", parents=[common, keys], help="train a model")
    p.set_defaults(handler=cmd_train)

    for name, handler, help_text in (("evaluate", cmd_evaluate, "evaluate a checkpoint on the test split"),
                                     ("sweep-threshold", cmd_sweep, "Dice across thresholds 0.3..0.7")):
        p = sub.add_parser(name, parents=[common, keys], help=help_text)
        p.add_argument("--checkpoint", help="checkpoint path (default: <output_dir>/best.ckpt)")
        p.add_argument("--hard", action="store_true", help="evaluate on the low-contrast split")
        p.set_defaults(handler=handler)

    p = sub.add_parser("gradcheck", parents=[common, keys], help="finite-difference gradient suite")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(handler=cmd_gradcheck)

    for kind in ("margin", "tokens", "components"):
        p = sub.add_parser(f"ablate-{kind}", parents=[common, keys], help=f"{kind} ablation grid")
        if kind == "components":
            p.add_argument("--hard", action="store_true", help="also compare full vs TPCA-off on the low-contrast split")
        p.set_defaults(handler=cmd_ablate, kind=kind)

    p = sub.add_parser("export-heatmap", parents=[common, keys], help="write anomaly maps for test images")
    p.add_argument("--checkpoint", help="checkpoint path (default: <output_dir>/best.ckpt)")
    p.add_argument("--count", type=int, default=8, help="number of test images to export")
    p.add_argument("--no-panel", action="store_true", help="skip the image | mask | prediction panels")
    p.set_defaults(handler=cmd_export_heatmap)
    return parser


def _settings(args, default_config=None):
    overrides = {key: getattr(args, key, None) for key in list(TRAIN_KEYS) + list(DATA_KEYS)}
    return load_settings(args.config or default_config, overrides=overrides)


def _dataset(args, settings, hard=False):
    if args.data_dir:
        print(f"[INFO] Loading dataset from {args.data_dir}")
        return load_dataset(args.data_dir, settings.train.category)
    spec = settings.hard_dataset_spec() if hard else settings.dataset_spec()
    return generate_dataset(spec, verbose=True)


def _checkpoint_path(args, settings):
    if args.checkpoint:
        return args.checkpoint
    best = os.path.join(settings.train.output_dir, BEST_CHECKPOINT)
    return best if os.path.exists(best) else os.path.join(settings.train.output_dir, LAST_CHECKPOINT)


def cmd_generate_data(args):
    settings = _settings(args)
    dataset = _dataset(args, settings, hard=args.hard)
    out = args.out or os.path.join(settings.train.output_dir, "data")
    export_dataset(dataset, out)
    print(f"[INFO] Dataset digest: {dataset_digest(dataset.train + dataset.test)}")
    return 0


def cmd_train(args):
    settings = _settings(args)
    dataset = _dataset(args, settings)
    result = Trainer(settings, dataset).train()
    print(f"[INFO] Checkpoints and epoch log in {result.output_dir}")
    return 0


def _evaluate(args):
    settings = _settings(args)
    path = _checkpoint_path(args, settings)
    checkpoint = load_checkpoint(path)
    dataset = _dataset(args, settings, hard=getattr(args, "hard", False))
    print(f"[INFO] Evaluating {path} on {len(dataset.test)} test images")
    report, predictions = evaluate_checkpoint(checkpoint, dataset.test, settings.train.image_size)
    report_path, sweep_path = report.save(settings.train.output_dir)
    return report, predictions, dataset, report_path, sweep_path


def cmd_evaluate(args):
    report, _, _, report_path, _ = _evaluate(args)
    print(report.to_text(), end="")
    print(f"[INFO] Report written to {report_path}")
    return 0


def cmd_sweep(args):
    report, _, _, _, sweep_path = _evaluate(args)
    with pd.option_context("display.float_format", "{:.2f}".format):
        print(report.sweep_frame())
    print(f"[INFO] Sweep table written to {sweep_path}")
    return 0


def cmd_gradcheck(args):
    settings = _settings(args, default_config=MICRO_CONFIG)
    rows = gradient_suite(settings, tolerance=args.tolerance)
    failed = [row.name for row in rows if not row.passed]
    if failed:
        print(f"[ERROR] {len(failed)} gradient checks above tolerance: {', '.join(failed)}")
        return 1
    print(f"[INFO] All {len(rows)} gradient checks passed")
    return 0


def cmd_ablate(args):
    settings = _settings(args)
    dataset = _dataset(args, settings)
    hard = None
    if getattr(args, "hard", False):
        hard = generate_dataset(settings.hard_dataset_spec(), verbose=True)
    result = ablate(args.kind, settings, dataset, hard, output_dir=settings.train.output_dir)
    with pd.option_context("display.float_format", "{:.2f}".format, "display.width", 120):
        print(result.table)
    return 0


def cmd_export_heatmap(args):
    _, predictions, dataset, _, _ = _evaluate(args)
    out = _settings(args).train.output_dir
    for sample, (_, seg_map) in list(zip(dataset.test, predictions))[: max(args.count, 0)]:
        export_heatmap(seg_map, os.path.join(out, "heatmaps", f"{sample.sample_id}.pgm"))
        if not args.no_panel:
            export_panel(sample.image, sample.mask, seg_map, os.path.join(out, "panels", f"{sample.sample_id}.ppm"))
    print(f"[INFO] Exported {min(args.count, len(predictions))} heatmaps to {os.path.join(out, 'heatmaps')}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except LesionSegError as e:
        print(f"[ERROR] {e}")
        return 1
    except KeyboardInterrupt:
        print("\n[INFO] Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
