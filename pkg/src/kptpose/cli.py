"""Command line: gen-data / train / eval / ablate / viz / grad-check.

Configuration comes from an optional JSON file plus per-key flag overrides
(every TrainConfig field maps to `--its-name`).  Exit codes: 2 for bad
flags (argparse), 3 for unreadable or invalid configs, 4 for missing
input files, 1 for runtime failures such as a non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import harness, metrics, posedec, synthgen, viz
from .harness import TrainConfig

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


def _str2bool(s):
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def add_config_flags(parser, skip=()):
    group = parser.add_argument_group("config overrides")
    for f in fields(TrainConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            group.add_argument(flag, dest=f.name, type=_str2bool, default=None,
                               metavar="BOOL")
        else:
            group.add_argument(flag, dest=f.name, type=type(f.default), default=None)


def config_from_args(args):
    base = {}
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise CliError(f"config file not found: {args.config}", EXIT_CONFIG)
        try:
            with open(args.config) as fh:
                base = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"unreadable config {args.config}: {e}", EXIT_CONFIG)
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid config: {e}", EXIT_CONFIG)


def _load_samples(path):
    if not os.path.exists(path):
        raise CliError(f"dataset file not found: {path}", EXIT_MISSING)
    try:
        return synthgen.read_dataset(path)
    except synthgen.DatasetFormatError as e:
        raise CliError(f"cannot read dataset {path}: {e}", EXIT_MISSING)


def _progress_printer(columns):
    header = "step " + " ".join(f"{c:>10}" for c in columns + ["total"])
    print(header)

    def emit(row):
        vals = " ".join(f"{row[c]:10.4f}" for c in columns + ["total"])
        print(f"{row['step']:4d} {vals}")

    return emit


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args):
    config = config_from_args(args)
    samples = []
    for i in range(args.count):
        samples.append(synthgen.sample_scene(args.seed + i, config.scene_config()))
    synthgen.write_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args):
    config = config_from_args(args)
    samples = _load_samples(args.data)
    os.makedirs(args.out, exist_ok=True)
    trainer = harness.Trainer(config, samples)
    progress = _progress_printer(trainer.loss_columns())
    try:
        trainer.run(max_steps=args.steps,
                    checkpoint_path=f"{args.out}/checkpoint.kpfc",
                    log_path=f"{args.out}/trainlog.csv",
                    progress=progress)
    except harness.NanLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"checkpoint: {args.out}/checkpoint.kpfc")
    print(f"log: {args.out}/trainlog.csv")
    return EXIT_OK


def _report_rows(records):
    rows = []
    for rec in records:
        hand_err = [metrics.mpjpe(p, g) for p, g in rec.get("hand_errors", [])]
        rows.append({
            "index": rec["index"],
            "bucket": "interacting" if rec["interacting"] else "single",
            "skipped": int(bool(rec.get("skipped"))),
            "mpjpe_mm": f"{np.mean(hand_err):.6f}" if hand_err else "",
            "mrrpe_mm": f"{metrics.mrrpe(*rec['t_lr']):.6f}" if rec.get("t_lr") is not None else "",
            "mssd_cm": f"{rec['mssd_mm'] / 10.0:.6f}" if rec.get("mssd_mm") is not None else "",
        })
    return rows


def cmd_eval(args):
    samples = _load_samples(args.data)
    if args.poses:
        return _eval_pose_files(args, samples)
    if not os.path.exists(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}", EXIT_MISSING)
    trainer = harness.load_checkpoint(args.checkpoint, samples)
    report, records = harness.evaluate(trainer, samples)
    print(report)
    if args.dump_poses:
        os.makedirs(args.dump_poses, exist_ok=True)
        _dump_poses(trainer, samples, args.dump_poses)
        print(f"poses: {args.dump_poses}")
    if args.report:
        _write_report_csv(args.report, report, records)
        print(f"report: {args.report}")
    return EXIT_OK


def _dump_poses(trainer, samples, out_dir):
    config = trainer.config
    _, records = harness.evaluate(trainer, samples, collect_attention=True)
    for rec in records:
        if rec.get("skipped"):
            continue
        sample = samples[rec["index"]]
        joints, t_lr = posedec.predictions_for_eval(
            config.representation, rec["decoded"], sample, config.heatmap_size)
        posedec.save_pose(f"{out_dir}/pose_{rec['index']:06d}.json",
                          posedec.pose_to_dict(config.representation, joints, t_lr))


def _eval_pose_files(args, samples):
    """Score saved pose files against the dataset's ground truth."""
    records = []
    for idx, sample in enumerate(samples):
        path = f"{args.poses}/pose_{idx:06d}.json"
        rec = {"index": idx, "interacting": sample.interacting, "object_name": None}
        if not os.path.exists(path):
            rec["skipped"] = True
            records.append(rec)
            continue
        _, joints, t_lr, _ = posedec.load_pose(path)
        rec["hand_errors"] = [(joints[h], sample.joints3d[h] - sample.joints3d[h, 0])
                              for h in range(2) if sample.hands_present[h]]
        if sample.interacting:
            rec["t_lr"] = (t_lr, sample.t_lr())
        records.append(rec)
    report = metrics.compute_report(records)
    print(report)
    if args.report:
        _write_report_csv(args.report, report, records)
    return EXIT_OK


def _write_report_csv(path, report, records):
    rows = _report_rows(records)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else ["index"])
        writer.writeheader()
        writer.writerows(rows)
        fh.write("# " + " | ".join(report.lines()).replace("\n", " ") + "\n")


def cmd_ablate(args):
    config = config_from_args(args)
    samples = _load_samples(args.data)
    eval_samples = _load_samples(args.eval_data) if args.eval_data else samples
    os.makedirs(args.out, exist_ok=True)
    rows = harness.run_ablations(config, samples, eval_samples, args.out, max_steps=args.steps)
    for row in rows:
        print(" ".join(f"{k}={v}" for k, v in row.items()))
    print(f"comparison: {args.out}/ablations.csv")
    return EXIT_OK


def cmd_viz(args):
    samples = _load_samples(args.data)
    if not os.path.exists(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}", EXIT_MISSING)
    if not 0 <= args.index < len(samples):
        raise CliError(f"sample index {args.index} outside dataset of {len(samples)}",
                       EXIT_USAGE)
    trainer = harness.load_checkpoint(args.checkpoint, samples)
    os.makedirs(args.out, exist_ok=True)
    names = None
    if args.queries:
        names = [trainer.model.queries.role(int(i)) for i in args.queries.split(",")]
    try:
        paths = viz.visualize(trainer.model, samples[args.index], args.out, names)
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_grad_check(args):
    results = harness.run_gradcheck_suite(trials=args.trials, tolerance=args.tolerance)
    ok = True
    for name, err in results.items():
        status = "pass" if err < args.tolerance else "FAIL"
        ok &= err < args.tolerance
        print(f"{name:24s} max rel err {err:.3e}  {status}")
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="kptpose",
                                     description="two-hand + object pose estimation on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0, help="base scene seed (sample i uses seed+i)")
    p.add_argument("--config")
    add_config_flags(p, skip=("seed",))
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None, help="step cap for this invocation")
    p.add_argument("--config")
    add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or saved pose files")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--poses", help="directory of pose_*.json files to score instead")
    p.add_argument("--report", help="write per-sample CSV here")
    p.add_argument("--dump-poses", help="write per-sample pose JSON files here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="baseline / no-identity-loss / detr-style comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--config")
    add_config_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("viz", help="SVG visualizations for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--queries", help="comma-separated query indices")
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_grad_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except synthgen.GenerationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
