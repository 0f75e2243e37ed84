"""Command-line entry point.

Subcommands: generate | train | eval | filter-debug | report | ablate.
Any config key can be overridden as ``--section.key value``; exit codes
are 0 ok, 1 I/O error, 2 config error, 3 checkpoint version mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import config as cfgmod
from . import figures, report as reportmod
from .config import ConfigError
from .data import ValidationError, boxes_in_region, load_dataset
from .evaluate import evaluate_detection, run_inference
from .losses import compute_area_min, gate_verdicts
from .model import CheckpointVersionError, load_checkpoint
from .train import run_ablation, save_trace, train

log = logging.getLogger("sparsecell")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_VERSION = 0, 1, 2, 3


def _parse_overrides(extra):
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, _, val = key.partition("=")
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok!r} is missing a value")
            i += 1
            val = extra[i]
        out[key.replace("-", "_") if "." not in key else key] = cfgmod.parse_value(val)
        i += 1
    return out


def _resolve(args, extra):
    overrides = _parse_overrides(extra)
    # convenience aliases
    if "region_fraction" in overrides:
        overrides["corpus.region_fraction"] = overrides.pop("region_fraction")
    file_cfg = cfgmod.load_config_file(args.config) if args.config else {}
    cli_cfg = dict(overrides)
    if args.seed is not None:
        cli_cfg["seed"] = args.seed
    if args.out is not None:
        cli_cfg["out"] = args.out
    cfg = cfgmod.resolve(file_cfg, cli_cfg)
    explicit = set(file_cfg) | set(cli_cfg)
    # the global seed feeds any section seed that was not set explicitly
    if "corpus.seed" not in explicit:
        cfg["corpus.seed"] = cfg["seed"]
    return cfg


def _run_dir(cfg, args, command: str) -> Path:
    base = Path(cfg["out"])
    name = args.run_name or f"{command}-{time.strftime('%Y%m%d-%H%M%S')}-{cfgmod.fingerprint(cfg)[:8]}"
    run = base / name
    run.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, run / "resolved_config.txt")
    return run


def _load_data(args, cfg):
    ds = load_dataset(args.data)
    corpus_dir = Path(args.corpus_dir) if args.corpus_dir else Path(args.data).parent
    return ds, corpus_dir


def cmd_generate(args, extra):
    cfg = _resolve(args, extra)
    from .synth import generate_corpus

    spec = cfgmod.corpus_spec(cfg)
    out = Path(cfg["out"])
    train_path, test_path = generate_corpus(spec, out)
    cfgmod.write_resolved(cfg, out / "resolved_config.txt")
    print(f"train manifest: {train_path}")
    print(f"test manifest:  {test_path}")
    return EXIT_OK


def cmd_train(args, extra):
    cfg = _resolve(args, extra)
    tc = cfgmod.train_config(cfg)
    if args.mode:
        tc.mode = args.mode
        tc.validate()
    ds, corpus_dir = _load_data(args, cfg)
    run = _run_dir(cfg, args, "train")
    model, trace = train(ds, corpus_dir, tc, seed=cfg["seed"],
                         checkpoint_path=run / "checkpoint.bin")
    save_trace(trace, run / "trace.csv")
    figures.plot_loss_trace(trace, run / "loss_curve.png")
    print(f"checkpoint: {run / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_eval(args, extra):
    cfg = _resolve(args, extra)
    model = load_checkpoint(args.checkpoint)
    ds, corpus_dir = _load_data(args, cfg)
    run = _run_dir(cfg, args, "eval")
    rep = evaluate_detection(
        model, ds, corpus_dir,
        conf_threshold=cfg["eval.conf_threshold"], nms_iou=cfg["eval.nms_iou"],
        config_fingerprint=cfgmod.fingerprint(cfg))
    rep.save(run / "report.json")
    (run / "report.txt").write_text(rep.text_table() + "\n")
    figures.plot_per_class_ap(rep, run / "per_class_ap.png")
    figures.plot_attribute_f1(rep, run / "attribute_f1.png")
    log.info("evaluation wallclock: %.1f s", rep.wallclock)
    print(rep.text_table())
    return EXIT_OK


def cmd_filter_debug(args, extra):
    cfg = _resolve(args, extra)
    model = load_checkpoint(args.checkpoint)
    ds, corpus_dir = _load_data(args, cfg)
    run = _run_dir(cfg, args, "filter-debug")
    sparse = cfgmod.train_config(cfg).sparse
    from dataclasses import replace
    sparse = replace(sparse, area_min=compute_area_min(ds))

    counts = {"pseudo": 0, "candidate": 0, "discard": 0}
    with open(run / "filter_debug.jsonl", "w") as f:
        for rec, preds, _ in run_inference(model, ds, corpus_dir,
                                           conf_threshold=cfg["train.decode_conf"],
                                           nms_iou=cfg["train.decode_nms"],
                                           with_attributes=False):
            _, outside = boxes_in_region(preds, rec.region)
            for row in gate_verdicts(outside, sparse):
                row["image_id"] = rec.image_id
                counts[row["verdict"]] += 1
                f.write(json.dumps(row) + "\n")
    print(json.dumps(counts))
    return EXIT_OK


def cmd_report(args, extra):
    cfg = _resolve(args, extra)
    model = load_checkpoint(args.checkpoint)
    ds, corpus_dir = _load_data(args, cfg)
    run = _run_dir(cfg, args, "report")
    results = run_inference(model, ds, corpus_dir,
                            conf_threshold=cfg["report.conf_threshold"],
                            nms_iou=cfg["eval.nms_iou"])
    text = reportmod.render_report(results, ds.class_names)
    (run / "morphology_report.txt").write_text(text)
    reportmod.write_counts_csv(results, ds.class_names, run / "counts.csv")
    films = reportmod.accumulate(results)
    for film, bank in films.items():
        rates = {
            name: (bank["attr_positive"].get(name, 0) / bank["n_detections"]
                   if bank["n_detections"] else 0.0)
            for name in reportmod.ATTRIBUTE_NAMES
        }
        figures.plot_film_summary(bank["class_counts"], ds.class_names, rates,
                                  run / f"film_{film}.png")
    print(text)
    return EXIT_OK


def cmd_ablate(args, extra):
    cfg = _resolve(args, extra)
    tc = cfgmod.train_config(cfg)
    ds, corpus_dir = _load_data(args, cfg)
    test_ds = load_dataset(args.test)
    run = _run_dir(cfg, args, "ablate")
    table = run_ablation(ds, test_ds, corpus_dir, tc,
                         n_seeds=cfg["ablate.n_seeds"], base_seed=cfg["seed"],
                         out_dir=run, eval_conf=cfg["eval.conf_threshold"],
                         eval_nms=cfg["eval.nms_iou"])
    figures.plot_ablation(table, run / "ablation.png")
    for row in table:
        print(f"{row['row']:<10} mAP@50 {row['map50_mean']:.4f}±{row['map50_std']:.4f}  "
              f"mAP@50-95 {row['map50_95_mean']:.4f}±{row['map50_95_std']:.4f}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="sparsecell",
                                description="Cell detection with sparse-region "
                                            "annotations and morphology attributes")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, default=None, help="global seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--run-name", default=None, help="fixed run directory name")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", help="write a synthetic corpus")
    for name, needs_test in (("train", False), ("ablate", True)):
        sp = sub.add_parser(name)
        sp.add_argument("--data", required=True, help="train manifest")
        sp.add_argument("--corpus-dir", default=None)
        if needs_test:
            sp.add_argument("--test", required=True, help="test manifest")
        else:
            sp.add_argument("--mode", choices=("attridet", "sla_det", "sla_det_attri"),
                            default=None)
    for name in ("eval", "filter-debug", "report"):
        sp = sub.add_parser(name)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--corpus-dir", default=None)
    return p


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "filter-debug": cmd_filter_debug,
    "report": cmd_report,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args, extra = build_parser().parse_known_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, extra)
    except CheckpointVersionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VERSION
    except (ConfigError, ValidationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
