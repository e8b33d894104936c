"""Command line entry point: train, eval, report, synth.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
"""
import argparse
import json
import logging
from pathlib import Path
import sys

from .data import MANIFEST_NAME, DataError, apply_manifest, ingest, prepare_low_shot, split_848, write_manifest
from .metrics import evaluate, misclassification_report, read_per_class, write_report
from .model import load_checkpoint
from .synth import synth_resembling_glyphs, write_dataset
from .training import ConfigError, DivergenceError, TrainingLog, load_config, run_ce, run_stage1, run_stage2, save_config

log = logging.getLogger("ccfg")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4


def prepared_dataset(data_root, config=None, manifest=None, out_dir=None):
    """Ingest ``data_root`` and assign splits.

    An explicit manifest wins, then ``<root>/split_manifest.tsv``; otherwise the
    low-shot filter and 8:4:8 split are run with the config's seed.
    """
    dataset = ingest(data_root)
    manifest = Path(manifest) if manifest else Path(data_root) / MANIFEST_NAME
    if manifest.exists():
        dataset = apply_manifest(dataset, manifest)
    elif config is not None:
        dataset = split_848(prepare_low_shot(dataset, config.min_samples, config.cap, config.seed), config.seed)
    else:
        raise DataError(f"no split manifest at {manifest}; pass --manifest or train first")
    if out_dir is not None:
        write_manifest(dataset, Path(out_dir) / MANIFEST_NAME)
    return dataset


def cmd_train(args):
    config = load_config(args.config, stage=args.stage)
    if args.init and config.init_mode in ("scratch", "pretrained"):
        config = config.replace(init_mode="stage1_checkpoint")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = prepared_dataset(args.data, config, args.manifest, out)
    save_config(config, out / f"config_stage{config.stage}.yaml")
    if config.stage == "1":
        result = run_stage1(config, dataset, out)
    elif config.stage == "2":
        result = run_stage2(config, dataset, args.init, out)
    else:
        result = run_ce(config, dataset, out)
    tag = f"stage{config.stage}"
    for split in ("val", "test"):
        if dataset.subset(split) and config.stage != "1":
            report = evaluate(result.model, dataset, split)
            write_report(report, out, f"{tag}_{split}", dataset.class_names)
            print(f"{split}: accuracy {report.accuracy:.4f} macro_f1 {report.macro_f1:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(args):
    model, manifest = load_checkpoint(args.ckpt)
    manifest_path = args.manifest or Path(args.ckpt).parent / MANIFEST_NAME
    dataset = prepared_dataset(args.data, manifest=manifest_path)
    if manifest.get("class_names") and manifest["class_names"] != dataset.class_names:
        raise DataError("checkpoint class names differ from the dataset's")
    report = evaluate(model, dataset, args.split)
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    write_report(report, out, f"eval_{args.split}", dataset.class_names)
    print(f"{args.split}: accuracy {report.accuracy:.4f} macro_f1 {report.macro_f1:.4f} n={report.num_samples}")
    for sample_id, pred, true in misclassification_report(report, args.top_confused):
        print(f"  {sample_id}\tpredicted {dataset.class_names[pred]}\ttrue {dataset.class_names[true]}")
    return 0


def cmd_report(args):
    root = Path(args.log)
    logs = sorted(root.glob("log_*.jsonl"))
    if not logs:
        raise DataError(f"no training logs in {root}")
    for path in logs:
        records = TrainingLog.read(path).records
        keys = [k for k in records[0] if k not in ("epoch", "steps") and not isinstance(records[0][k], list)]
        print(f"== {path.name}")
        print("epoch\t" + "\t".join(keys))
        for r in records:
            print(f"{r['epoch']}\t" + "\t".join("-" if r[k] is None else f"{r[k]:.6g}" for k in keys))
    for path in sorted(root.glob("metrics_*.txt")):
        print(f"== {path.name}")
        print(path.read_text(encoding="utf-8").split("\n\n")[0])
    for path in sorted(root.glob("per_class_*.csv")):
        accs = read_per_class(path)
        print(f"== {path.name}: {len(accs)} classes, mean per-class accuracy {accs.mean():.4f}")
    for path in sorted(root.glob("histogram_*.csv")):
        print(f"== {path.name}")
        print(path.read_text(encoding="utf-8").rstrip())
    return 0


def cmd_synth(args):
    dataset = synth_resembling_glyphs(args.groups, args.per_group, args.samples, args.seed, args.noise)
    write_dataset(dataset, args.out)
    print(json.dumps({"classes": dataset.num_classes, "samples": len(dataset.samples), "out": str(args.out)}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="ccfg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", choices=["1", "2", "ce"], required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="stage-1 (or CE) checkpoint to initialize stage 2 from")
    p.add_argument("--manifest", help="split manifest to reuse")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["val", "test"], default="test")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--top-confused", type=int, default=3)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="print epoch tables, metrics and histograms from a run directory")
    p.add_argument("--log", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write a synthetic resembling-glyph corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--groups", type=int, required=True)
    p.add_argument("--per-group", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--noise", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
