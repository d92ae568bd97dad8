"""Command line entry point: ``layerkd <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .geometry import AngleReport
from .models import load_checkpoint
from .tasks import gen_classification_task, gen_seq2seq_task, load_token_file, TokenFormat, write_token_files


def _csv(kind):
    return lambda s: [kind(v) for v in s.split(",") if v]


def _plan_from_args(args) -> harness.ExperimentPlan:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {
        "output_dir": args.out,
        "depths": args.depths,
        "strategies": args.strategies,
        "init_schemes": args.inits,
        "seeds": args.seeds,
        "workers": args.workers,
        "teacher_seed": args.teacher_seed,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if args.allow_weak_teacher:
        raw["allow_weak_teacher"] = True
    for item in args.set or []:
        key, _, value = item.partition("=")
        section, _, field = key.partition(".")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        if field:
            raw.setdefault(section, {})[field] = parsed
        else:
            raw[section] = parsed
    return harness.ExperimentPlan.from_dict(raw)


def _add_plan_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment plan")
    p.add_argument("--out", help="output directory (overrides the plan)")
    p.add_argument("--depths", type=_csv(int))
    p.add_argument("--strategies", type=_csv(str))
    p.add_argument("--inits", type=_csv(str))
    p.add_argument("--seeds", type=_csv(int))
    p.add_argument("--workers", type=int)
    p.add_argument("--teacher-seed", type=int)
    p.add_argument("--allow-weak-teacher", action="store_true")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a plan field, e.g. --set distill.steps=300 --set task.size=4000")


def cmd_gen_data(args) -> int:
    gen = gen_classification_task if args.kind == "classification" else gen_seq2seq_task
    ds = gen(args.seed, args.size, args.seq_len, args.vocab_size)
    out = write_token_files(ds, args.out)
    counts = {s: len(ds.indices(s)) for s in ("train", "dev", "test")}
    print(f"wrote {len(ds)} examples to {out} (seed={args.seed}, splits={counts})")
    return 0


def cmd_train_teacher(args) -> int:
    plan = _plan_from_args(args)
    plan.out.mkdir(parents=True, exist_ok=True)
    rec = harness.train_teacher(plan, force=args.force)
    metric = rec["metric"]
    flag = "  [WEAK: below floor]" if rec["weak"] else ""
    print(f"teacher {rec['teacher_id']} seed={rec['seed']}: dev {metric} {rec['dev'][metric]:.4f}, "
          f"test {rec['test'][metric]:.4f}{flag}")
    return 1 if rec["weak"] and not plan.allow_weak_teacher else 0


def cmd_sweep(args) -> int:
    plan = _plan_from_args(args)
    try:
        results, agg = harness.run_sweep(plan)
    except harness.WeakTeacherError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    failed = [r for r in results if r.status != "success"]
    paths = harness.report_tables(plan.out)
    print(paths["txt"].read_text(), end="")
    print(f"{len(results)} runs ({len(failed)} failed); report in {paths['txt'].parent}")
    return 1 if failed else 0


def cmd_geometry(args) -> int:
    if args.merge:
        reports = [AngleReport.read(p) for p in args.merge]
        merged = reports[0]
        for r in reports[1:]:
            merged = merged.merge(r)
        line = harness.write_geometry(merged, args.out)
        print(line)
        return 0
    k, n = (int(v) for v in args.shard.split("/"))
    opts = dict(aggregation=args.aggregation, split=args.split, limit=args.limit, shard=(k, n), stack=args.stack)
    if args.run:
        plan = harness.ExperimentPlan.load(Path(args.plan_dir) / "plan.json")
        plan.output_dir = args.plan_dir
        _, line = harness.analyze_run(plan, args.run, project=args.project, out_dir=args.out, **opts)
    else:
        if not (args.teacher and args.student and args.data):
            print("error: give --run (with --plan-dir) or --teacher, --student and --data", file=sys.stderr)
            return 2
        teacher, student = load_checkpoint(args.teacher), load_checkpoint(args.student)
        ds = load_token_file(args.data, TokenFormat(kind=args.kind))
        _, line = harness.analyze_geometry(student, teacher, ds, args.out or "geometry", **opts)
    print(line)
    return 0


def cmd_report(args) -> int:
    paths = harness.report_tables(args.out)
    print(paths["txt"].read_text(), end="")
    for k, p in paths.items():
        print(f"{k}: {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerkd", description="Layer-selection distillation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic task as token files")
    p.add_argument("--kind", choices=("classification", "seq2seq"), default="classification")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, default=8000)
    p.add_argument("--seq-len", type=int, default=10)
    p.add_argument("--vocab-size", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the plan's teacher")
    _add_plan_args(p)
    p.add_argument("--force", action="store_true", help="retrain even if a matching teacher exists")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("sweep", help="run strategy x init x depth x seed cells (resumable)")
    _add_plan_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("geometry", help="teacher-layer angle diagnostic")
    p.add_argument("--plan-dir", help="sweep output directory (with --run)")
    p.add_argument("--run", help="run id inside --plan-dir")
    p.add_argument("--teacher", help="teacher checkpoint directory")
    p.add_argument("--student", help="student checkpoint directory")
    p.add_argument("--data", help="token-file dataset directory")
    p.add_argument("--kind", choices=("classification", "seq2seq"), default="classification")
    p.add_argument("--aggregation", choices=("per_token", "mean_pooled"), default="per_token")
    p.add_argument("--split", default="dev")
    p.add_argument("--limit", type=int, default=256)
    p.add_argument("--shard", default="0/1", help="k/n: analyse the k-th of n contiguous slices")
    p.add_argument("--stack", choices=("encoder", "decoder"), default="encoder")
    p.add_argument("--project", action="store_true", help="pass mapped student layers through their projections")
    p.add_argument("--merge", nargs="+", metavar="REPORT", help="merge angle_report.txt files instead of computing")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_geometry)

    p = sub.add_parser("report", help="render tables and figures from a sweep directory")
    p.add_argument("--out", required=True, help="sweep output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "geometry" and args.merge and not args.out:
        args.out = "geometry"
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
