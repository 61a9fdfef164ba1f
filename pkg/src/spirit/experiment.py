"""Experiment workspace: datasets on disk, sweeps, results CSV, report data.

File layout under the output root::

    data/{source,target,proximity}.tensors   dataset containers
    data/manifest.json                        seeds, params, domain tags
    teacher.ckpt                              pretrained teacher parameters
    runs/<mode>[_r<r>]_s<seed>.json|.ckpt     one RunRecord + checkpoint per run
    results.csv                               one row per run
    report/*.csv                              plot-ready series
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import config as C
from .data import (AugmentSpec, eval_transform, generate_domain, load_dataset,
                   manifest_entry, read_manifest, save_dataset, write_manifest)
from .metrics import evaluate
from .pipeline import RunRecord, RunSetup, pretrain_teacher, run_key, run_mode
from .serialization import read_tensors

__all__ = [
    "build_dataset", "generate_data_files", "load_data_files", "pretrain_and_save",
    "build_run_setup", "sweep_tasks", "execute_task", "run_sweep", "load_records",
    "write_results_csv", "aggregate", "format_summary", "write_report", "teacher_path",
]

DATASET_FILES = ("source", "target", "proximity")


def build_dataset(cfg, key):
    dc = cfg.datasets[key]
    return generate_domain(cfg.domain_seed(key), dc.resolved_params(), dc.n,
                           dc.resolution, domain=dc.role)


def generate_data_files(cfg, data_dir):
    """Write the three domain datasets plus a manifest; idempotent by content."""
    os.makedirs(data_dir, exist_ok=True)
    entries = []
    for key in DATASET_FILES:
        dataset = build_dataset(cfg, key)
        filename = f"{key}.tensors"
        save_dataset(dataset, os.path.join(data_dir, filename))
        entries.append(manifest_entry(dataset, filename))
    write_manifest(os.path.join(data_dir, "manifest.json"), entries)
    return entries


def load_data_files(data_dir):
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(
            f"no dataset manifest at {manifest_path}; run `spirit gen-data` first"
        )
    datasets = {}
    for entry in read_manifest(manifest_path):
        path = os.path.join(data_dir, entry["file"])
        key = os.path.splitext(entry["file"])[0]
        datasets[key] = load_dataset(path, entry)
    missing = set(DATASET_FILES) - set(datasets)
    if missing:
        raise FileNotFoundError(f"manifest lacks datasets: {sorted(missing)}")
    return datasets


def teacher_path(out_dir):
    return os.path.join(out_dir, "teacher.ckpt")


def pretrain_and_save(cfg, datasets, out_dir):
    """Train the teacher on the source domain, checkpoint it, report source mIOU."""
    teacher, curve = pretrain_teacher(datasets["source"], cfg.pretrain, cfg.arch,
                                      seed=cfg.master_seed,
                                      augment_spec=C.source_augment_spec(cfg))
    os.makedirs(out_dir, exist_ok=True)
    path = teacher_path(out_dir)
    teacher.save(path)
    eval_source = build_dataset(cfg, "eval_source")
    spec = AugmentSpec(crop=cfg.augment["crop"], flip_prob=0.0, pool=True)
    report = evaluate(teacher, eval_source, threshold=cfg.threshold,
                      transform=eval_transform(spec))
    info = {"steps": len(curve), "final_loss": curve[-1], "source_miou": report.mean_miou}
    with open(os.path.join(out_dir, "teacher.json"), "w") as f:
        json.dump(info, f, indent=2, sort_keys=True)
        f.write("\n")
    return teacher, curve, report


def build_run_setup(cfg, datasets, teacher_state=None):
    return RunSetup(
        arch=cfg.arch,
        stages=cfg.stages,
        target=datasets["target"],
        proximity=datasets["proximity"],
        eval_target=build_dataset(cfg, "eval_target"),
        teacher_state=teacher_state,
        target_augment=C.target_augment_spec(cfg),
        proximity_augment=C.proximity_augment_spec(cfg),
        threshold=cfg.threshold,
        master_seed=cfg.master_seed,
    )


def sweep_tasks(modes, r_list, seeds):
    """The (mode, r, seed) tuples of a sweep, in deterministic order."""
    tasks = []
    for mode in modes:
        if mode == "esd":
            for r in r_list:
                for seed in seeds:
                    tasks.append((mode, float(r), seed))
        else:
            for seed in seeds:
                tasks.append((mode, None, seed))
    return tasks


def execute_task(setup, runs_dir, mode, r, seed, force=False):
    """Run one tuple unless its record already exists; returns (key, skipped)."""
    key = run_key(mode, r, seed)
    record_path = os.path.join(runs_dir, f"{key}.json")
    if not force and os.path.exists(record_path):
        return key, True
    record, model = run_mode(setup, mode, seed, r)
    os.makedirs(runs_dir, exist_ok=True)
    model.save(os.path.join(runs_dir, f"{key}.ckpt"))
    record.checkpoint = f"{key}.ckpt"
    with open(record_path, "w") as f:
        json.dump(record.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return key, False


_WORKER = {}


def _worker_init(cfg_dict, data_dir, teacher_file):
    cfg = C.from_dict(cfg_dict)
    datasets = load_data_files(data_dir)
    state = read_tensors(teacher_file) if teacher_file else None
    _WORKER["setup"] = build_run_setup(cfg, datasets, state)


def _worker_run(args):
    runs_dir, mode, r, seed = args
    return execute_task(_WORKER["setup"], runs_dir, mode, r, seed)


def run_sweep(cfg, data_dir, out_dir, modes, r_list, seeds, jobs=1, log=None):
    """Execute every missing (mode, r, seed) tuple and rebuild results.csv."""
    tasks = sweep_tasks(modes, r_list, seeds)
    runs_dir = os.path.join(out_dir, "runs")
    os.makedirs(runs_dir, exist_ok=True)

    needs_teacher = any(mode != "scratch" for mode, _, _ in tasks)
    teacher_file = teacher_path(out_dir)
    if needs_teacher and not os.path.exists(teacher_file):
        raise FileNotFoundError(
            f"no teacher checkpoint at {teacher_file}; run `spirit pretrain-teacher` first"
        )
    teacher_file = teacher_file if needs_teacher else None

    pending = [t for t in tasks
               if not os.path.exists(os.path.join(runs_dir, f"{run_key(*t)}.json"))]
    done = len(tasks) - len(pending)
    if log and done:
        log(f"skipping {done} completed run(s)")

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init,
                                 initargs=(C.to_dict(cfg), data_dir, teacher_file)) as pool:
            for key, skipped in pool.map(_worker_run,
                                         [(runs_dir, m, r, s) for m, r, s in pending]):
                if log:
                    log(f"done {key}")
    else:
        datasets = load_data_files(data_dir)
        state = read_tensors(teacher_file) if teacher_file else None
        setup = build_run_setup(cfg, datasets, state)
        for mode, r, seed in pending:
            key, _ = execute_task(setup, runs_dir, mode, r, seed)
            if log:
                log(f"done {key}")

    records = load_records(runs_dir)
    write_results_csv(os.path.join(out_dir, "results.csv"), records)
    return records


def load_records(runs_dir):
    if not os.path.isdir(runs_dir):
        raise FileNotFoundError(f"no runs directory at {runs_dir}")
    records = []
    for name in sorted(os.listdir(runs_dir)):
        if name.endswith(".json"):
            with open(os.path.join(runs_dir, name)) as f:
                records.append(RunRecord.from_dict(json.load(f)))
    if not records:
        raise FileNotFoundError(f"no run records in {runs_dir}")
    return sorted(records, key=_record_order)


def _record_order(record):
    mode_rank = {m: i for i, m in enumerate(("scratch", "sd", "esd", "ftt_frozen", "ftt_finetuned"))}
    r = record.r if record.r is not None else -1.0
    return (mode_rank.get(record.mode, 99), r, record.seed)


CSV_COLUMNS = ("mode", "r", "seed", "miou", "hp_acc", "variance", "params",
               "gflops", "steps_stage1", "steps_stage2", "steps_stage3")


def _csv_row(record):
    m = record.metrics
    return {
        "mode": record.mode,
        "r": "" if record.r is None else ("inf" if math.isinf(record.r) else repr(record.r)),
        "seed": record.seed,
        "miou": repr(m.mean_miou),
        "hp_acc": repr(m.hp_acc),
        "variance": repr(m.variance),
        "params": m.params,
        "gflops": repr(m.flops / 1e9),
        "steps_stage1": record.steps.get("stage1", 0),
        "steps_stage2": record.steps.get("stage2", 0),
        "steps_stage3": record.steps.get("stage3", 0),
    }


def write_results_csv(path, records):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for record in records:
            writer.writerow(_csv_row(record))


def aggregate(records):
    """Seed-averaged summary per (mode, r) in deterministic order."""
    groups = {}
    for record in records:
        groups.setdefault((record.mode, record.r), []).append(record)
    rows = []
    for (mode, r), group in sorted(groups.items(), key=lambda kv: _record_order(kv[1][0])[:2]):
        ms = [g.metrics for g in group]
        rows.append({
            "mode": mode,
            "r": r,
            "runs": len(group),
            "miou": float(np.mean([m.mean_miou for m in ms])),
            "hp_acc": float(np.mean([m.hp_acc for m in ms])),
            "variance": float(np.mean([m.variance for m in ms])),
            "params": int(ms[0].params),
            "gflops": float(np.mean([m.flops for m in ms])) / 1e9,
        })
    return rows


def format_summary(rows):
    out = io.StringIO()
    header = f"{'mode':<14}{'r':>6}{'runs':>6}{'mIOU':>10}{'HP-Acc':>10}{'Var':>12}{'params':>10}{'GFLOPs':>12}"
    out.write(header + "\n")
    out.write("-" * len(header) + "\n")
    for row in rows:
        r = "" if row["r"] is None else ("inf" if math.isinf(row["r"]) else format(row["r"], "g"))
        out.write(
            f"{row['mode']:<14}{r:>6}{row['runs']:>6}"
            f"{row['miou']:>10.4f}{row['hp_acc']:>10.4f}{row['variance']:>12.3e}"
            f"{row['params']:>10}{row['gflops']:>12.6f}\n"
        )
    return out.getvalue()


def write_report(records, report_dir):
    """Plot-ready series mirroring the quality/efficiency comparisons."""
    os.makedirs(report_dir, exist_ok=True)
    rows = aggregate(records)

    def label(row):
        if row["r"] is None:
            return row["mode"]
        r = "inf" if math.isinf(row["r"]) else format(row["r"], "g")
        return f"{row['mode']}_r{r}"

    with open(os.path.join(report_dir, "miou_vs_gflops.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "gflops", "miou"])
        for row in rows:
            w.writerow([label(row), repr(row["gflops"]), repr(row["miou"])])

    with open(os.path.join(report_dir, "var_vs_hpacc.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "variance", "hp_acc"])
        for row in rows:
            w.writerow([label(row), repr(row["variance"]), repr(row["hp_acc"])])

    esd_rows = [row for row in rows if row["mode"] == "esd" and row["r"] is not None
                and not math.isinf(row["r"])]
    with open(os.path.join(report_dir, "miou_vs_r.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["r", "miou", "hp_acc", "variance"])
        for row in sorted(esd_rows, key=lambda x: x["r"]):
            w.writerow([format(row["r"], "g"), repr(row["miou"]),
                        repr(row["hp_acc"]), repr(row["variance"])])
    return rows
