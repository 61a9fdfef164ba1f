"""Command-line front end: gen-data, pretrain-teacher, run, eval, report."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import config as C
from . import experiment as E
from . import models
from .config import ConfigError
from .data import AugmentSpec, eval_transform
from .metrics import evaluate
from .pipeline import MODES
from .serialization import read_tensors, write_pgm, write_ppm


def _parse_float(text):
    if text in ("inf", "Inf", "INF"):
        return math.inf
    return float(text)


def _csv_list(text, conv):
    return [conv(item) for item in text.split(",") if item]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spirit",
        description="Compress a segmentation teacher into a compact student by "
                    "cross-domain feature distillation, at desk scale on procedural data.",
    )
    parser.add_argument("--config", help="experiment config JSON (defaults used when omitted)")
    parser.add_argument("--out", default="spirit_out", help="output root directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the three domain datasets")
    p.add_argument("--export-samples", type=int, default=0, metavar="N",
                   help="also export N samples per domain as PPM/PGM images")

    sub.add_parser("pretrain-teacher", help="train the teacher on the source domain")

    p = sub.add_parser("run", help="execute a (mode, r, seed) sweep")
    p.add_argument("--modes", help="comma-separated subset of "
                                   "scratch,sd,esd,ftt_frozen,ftt_finetuned")
    p.add_argument("--r-list", help="comma-separated mix ratios for esd (inf allowed)")
    p.add_argument("--seeds", help="comma-separated run seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out target set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", choices=("student", "teacher", "transfer"), default="student")

    p = sub.add_parser("report", help="summarize run records into tables and plot data")
    p.add_argument("--results", help="runs directory (default <out>/runs)")

    p = sub.add_parser("show-config", help="print the effective config as JSON")
    return parser


def _load_config(args):
    env_seed = os.environ.get("SPIRIT_SEED")
    if env_seed is not None:
        try:
            env_seed = int(env_seed)
        except ValueError:
            raise ConfigError("SPIRIT_SEED", f"must be an integer, got {env_seed!r}") from None
    return C.load_config(args.config, env_seed=env_seed)


def cmd_gen_data(args):
    cfg = _load_config(args)
    data_dir = os.path.join(args.out, "data")
    entries = E.generate_data_files(cfg, data_dir)
    for entry in entries:
        print(f"wrote {entry['file']}: domain={entry['domain']} n={entry['n']} "
              f"resolution={entry['resolution']} seed={entry['seed']}")
    if args.export_samples > 0:
        preview = os.path.join(data_dir, "preview")
        os.makedirs(preview, exist_ok=True)
        datasets = E.load_data_files(data_dir)
        for key, dataset in datasets.items():
            for i in range(min(args.export_samples, len(dataset))):
                s = dataset[i]
                write_ppm(os.path.join(preview, f"{key}_{i:03d}.ppm"), s.image)
                write_pgm(os.path.join(preview, f"{key}_{i:03d}_mask.pgm"), s.mask, 2)
        print(f"wrote previews to {preview}")
    return 0


def cmd_pretrain_teacher(args):
    cfg = _load_config(args)
    data_dir = os.path.join(args.out, "data")
    datasets = E.load_data_files(data_dir)
    teacher, curve, report = E.pretrain_and_save(cfg, datasets, args.out)
    print(f"teacher trained for {len(curve)} steps, final loss {curve[-1]:.4f}")
    print(f"source mIOU {report.mean_miou:.4f} on held-out source samples")
    print(f"wrote {E.teacher_path(args.out)}")
    return 0


def cmd_run(args):
    cfg = _load_config(args)
    modes = tuple(_csv_list(args.modes, str)) if args.modes else cfg.modes
    for mode in modes:
        if mode not in MODES:
            raise ConfigError("modes", f"unknown mode '{mode}'")
    r_list = tuple(_csv_list(args.r_list, _parse_float)) if args.r_list else cfg.r_list
    seeds = tuple(_csv_list(args.seeds, int)) if args.seeds else cfg.seeds
    data_dir = os.path.join(args.out, "data")
    records = E.run_sweep(cfg, data_dir, args.out, modes, r_list, seeds,
                          jobs=max(1, args.jobs), log=lambda msg: print(msg, flush=True))
    print(f"{len(records)} run record(s) in {os.path.join(args.out, 'runs')}")
    print(f"wrote {os.path.join(args.out, 'results.csv')}")
    return 0


def _rebuild_for_eval(cfg, kind, state):
    rng = np.random.default_rng(0)
    if kind == "teacher":
        return models.build_teacher(cfg.arch, rng)
    teacher = models.build_teacher(cfg.arch, rng)
    split = models.split_teacher(teacher, cfg.arch.effective_split_index)
    net = cfg.arch.resolution
    feat_c, feat_h, _ = split.front.output_shape((cfg.arch.in_channels, net, net))
    head = models.build_student_head(feat_c, cfg.arch.classes,
                                     max(net // (4 * feat_h), 1), rng, cfg.arch.grouping)
    if kind == "transfer":
        return models.concat_graphs(("front", split.front), ("head", head))
    extractor = models.build_extractor_from_front(split.front, rng, cfg.arch.grouping)
    return models.concat_graphs(("extractor", extractor), ("head", head))


def cmd_eval(args):
    cfg = _load_config(args)
    model = _rebuild_for_eval(cfg, args.kind, None)
    model.load_state(read_tensors(args.checkpoint))
    eval_target = E.build_dataset(cfg, "eval_target")
    spec = AugmentSpec(crop=cfg.augment["crop"], flip_prob=0.0, pool=True)
    report = evaluate(model, eval_target, threshold=cfg.threshold,
                      transform=eval_transform(spec))
    payload = report.to_dict()
    payload.pop("per_image_miou")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_report(args):
    runs_dir = args.results or os.path.join(args.out, "runs")
    records = E.load_records(runs_dir)
    report_dir = os.path.join(args.out, "report")
    rows = E.write_report(records, report_dir)
    print(E.format_summary(rows), end="")
    print(f"wrote plot data to {report_dir}")
    return 0


def cmd_show_config(args):
    cfg = _load_config(args)
    print(json.dumps(C.to_dict(cfg), indent=2, sort_keys=True))
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain-teacher": cmd_pretrain_teacher,
    "run": cmd_run,
    "eval": cmd_eval,
    "report": cmd_report,
    "show-config": cmd_show_config,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
