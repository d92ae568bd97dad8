"""Experiment orchestration: teachers, strategy sweeps, geometry and reports.

Output layout under ``plan.output_dir``::

    plan.json
    teacher/            checkpoint/, metrics.json, log.jsonl
    runs/<run_id>/      manifest.json, log.jsonl, checkpoint/, metrics.json
                        geometry/ (when analysed)
    report/             report.txt, report.tsv, strategies.png

``metrics.json`` is written last, via rename, and doubles as the completion
marker that lets an interrupted sweep resume.
"""

from __future__ import annotations

import concurrent.futures as cf
import hashlib
import itertools
import json
import logging
import math
import os
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import plotting
from .distill import (
    MATCHING_STRATEGIES,
    STRATEGIES,
    DistillConfig,
    LayerMapping,
    ProjectionSet,
    build_projections,
    distill,
    make_student,
)
from .geometry import AngleReport, build_angle_report
from .models import ModelSpec, TransformerModel, build_model, load_checkpoint, save_checkpoint
from .tensor import load_tensor, save_tensor
from .tasks import Dataset, TokenFormat, decoder_inputs, gen_classification_task, gen_seq2seq_task, load_token_file
from .training import TrainConfig, evaluate, primary_metric, train_supervised

log = logging.getLogger(__name__)

DEFAULT_TASK = {"kind": "classification", "seed": 0, "size": 8000, "seq_len": 10, "vocab_size": 8}
DEFAULT_TEACHER = {"num_layers": 12, "hidden_dim": 32, "num_heads": 4, "ffn_dim": 64}
DEFAULT_TEACHER_TRAIN = {"steps": 1500, "lr": 1e-3, "optimizer": "adam", "warmup": 200, "eval_every": 250, "target_metric": 0.99}
DEFAULT_DISTILL = {"lambda": 1.0, "lr": 0.05, "momentum": 0.9, "steps": 600, "batch_size": 32, "warmup": 50,
                   "eval_every": 50, "transfer_size": 500}


class PlanError(ValueError):
    pass


class WeakTeacherError(RuntimeError):
    pass


@dataclass
class ExperimentPlan:
    task: dict = field(default_factory=lambda: dict(DEFAULT_TASK))
    teacher_spec: dict = field(default_factory=lambda: dict(DEFAULT_TEACHER))
    teacher_train: dict = field(default_factory=lambda: dict(DEFAULT_TEACHER_TRAIN))
    teacher_seed: int = 0
    teacher_floor: float = 0.95
    allow_weak_teacher: bool = False
    depths: list = field(default_factory=lambda: [3])
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    init_schemes: list = field(default_factory=lambda: ["random", "weight_copy"])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    distill: dict = field(default_factory=lambda: dict(DEFAULT_DISTILL))
    output_dir: str = "runs"
    workers: int = 1
    isolate: bool = False

    def validate(self) -> "ExperimentPlan":
        for s in self.strategies:
            if s not in STRATEGIES:
                raise PlanError(f"unknown strategy {s!r}")
        if self.strategies and "none" not in self.strategies:
            raise PlanError("every plan needs the 'none' baseline")
        if not self.depths or not self.seeds or not self.init_schemes:
            raise PlanError("depths, seeds and init_schemes must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise PlanError("seeds must be distinct")
        teacher_depth = self.teacher_spec.get("num_layers", DEFAULT_TEACHER["num_layers"])
        for d in self.depths:
            if not 1 <= int(d) <= teacher_depth:
                raise PlanError(f"student depth {d} not in [1, {teacher_depth}]")
        DistillConfig.from_dict(self.distill)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise PlanError(f"unknown plan fields: {sorted(unknown)}")
        plan = cls(**d)
        # fill partial sub-dicts from defaults
        plan.task = {**DEFAULT_TASK, **plan.task} if "data_dir" not in plan.task else dict(plan.task)
        plan.teacher_train = {**DEFAULT_TEACHER_TRAIN, **plan.teacher_train}
        plan.distill = {**DEFAULT_DISTILL, **plan.distill}
        return plan.validate()

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def cells(self) -> list[dict]:
        """Every (depth, init, strategy, seed) cell, in a fixed order."""
        return [
            {"depth": int(d), "init_scheme": i, "strategy": s, "seed": int(seed)}
            for d, i, s, seed in itertools.product(self.depths, self.init_schemes, self.strategies, self.seeds)
        ]


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:10]


def teacher_id(plan: ExperimentPlan) -> str:
    return _digest({"task": plan.task, "spec": plan.teacher_spec, "train": plan.teacher_train, "seed": plan.teacher_seed})


def run_id(plan: ExperimentPlan, cell: dict) -> str:
    """Readable factors plus a digest of everything else that shapes the run."""
    shared = {"teacher": teacher_id(plan), "distill": plan.distill}
    return f"{cell['strategy']}-{cell['init_scheme']}-d{cell['depth']}-s{cell['seed']}-{_digest(shared)}"


# ---------------------------------------------------------------------------
# data and teacher


def load_task(task: dict) -> Dataset:
    if "data_dir" in task:
        return load_token_file(task["data_dir"], TokenFormat(kind=task.get("kind", "classification")))
    gen = {"classification": gen_classification_task, "seq2seq": gen_seq2seq_task}.get(task["kind"])
    if gen is None:
        raise PlanError(f"unknown task kind {task['kind']!r}")
    return gen(task["seed"], task["size"], task["seq_len"], task["vocab_size"])


def teacher_model_spec(plan: ExperimentPlan, ds: Dataset) -> ModelSpec:
    kind = "encoder_classifier" if ds.kind == "classification" else "encoder_decoder"
    base = {"kind": kind, "vocab_size": ds.vocab_size, "max_seq_len": max(ds.max_len, 1),
            "num_classes": max(ds.num_classes, 2)}
    return ModelSpec(**{**base, **plan.teacher_spec}).validate()


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, default=_json_default))
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def train_teacher(plan: ExperimentPlan, force: bool = False) -> dict:
    """Train (or reuse) the plan's teacher; returns its metrics record.

    The record has ``weak=True`` when the best dev metric is below
    ``plan.teacher_floor``.
    """
    tdir = plan.out / "teacher"
    metrics_path = tdir / "metrics.json"
    tid = teacher_id(plan)
    if metrics_path.exists() and not force:
        rec = json.loads(metrics_path.read_text())
        if rec.get("teacher_id") == tid:
            return rec
    ds = load_task(plan.task)
    spec = teacher_model_spec(plan, ds)
    model = build_model(spec, plan.teacher_seed)
    cfg = TrainConfig(**{**plan.teacher_train, "seed": plan.teacher_seed})
    tdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with open(tdir / "log.jsonl", "w") as fh:
        summary = train_supervised(model, ds, cfg, lambda r: fh.write(json.dumps(r) + "\n"))
    save_checkpoint(model, tdir / "checkpoint", {"teacher_id": tid})
    rec = {
        "teacher_id": tid,
        "seed": plan.teacher_seed,
        "spec": spec.to_dict(),
        "train": cfg.to_dict(),
        **summary,
        "dev": evaluate(model, ds, "dev"),
        "test": evaluate(model, ds, "test"),
        "fingerprint": model.fingerprint(),
        "wall_time": time.perf_counter() - t0,
    }
    rec["weak"] = rec["dev"][summary["metric"]] < plan.teacher_floor
    _write_json(metrics_path, rec)
    return rec


def load_teacher(plan: ExperimentPlan) -> TransformerModel:
    return load_checkpoint(plan.out / "teacher" / "checkpoint")


# ---------------------------------------------------------------------------
# sweep


@dataclass
class RunResult:
    run_id: str
    factors: dict
    status: str
    dev: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)
    loss_summary: dict = field(default_factory=dict)
    best_step: int = 0
    wall_time: float = 0.0
    checkpoint: str = ""
    seed: int = 0
    error: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(**d)


def _cell_config(plan: ExperimentPlan, cell: dict) -> DistillConfig:
    return DistillConfig.from_dict({**plan.distill, "strategy": cell["strategy"], "init_scheme": cell["init_scheme"],
                                    "seed": cell["seed"]})


def run_cell(plan: ExperimentPlan, cell: dict, ds: Dataset | None = None, teacher: TransformerModel | None = None) -> RunResult:
    """Execute one cell and persist its artefacts.  Failures become a ``failed`` result."""
    rid = run_id(plan, cell)
    rdir = plan.out / "runs" / rid
    rdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        ds = ds or load_task(plan.task)
        teacher = teacher or load_teacher(plan)
        cfg = _cell_config(plan, cell)
        before = teacher.fingerprint()
        student = make_student(teacher, cell["depth"], cell["init_scheme"], cell["seed"])
        with open(rdir / "log.jsonl", "w") as fh:
            res = distill(teacher, student, cfg, ds, lambda r: fh.write(json.dumps(r) + "\n"))
        after = teacher.fingerprint()
        manifest = {
            "run_id": rid,
            "factors": cell,
            "seed": cell["seed"],
            "config": cfg.to_dict(),
            "mapping": res.mapping.to_dict(),
            "teacher_id": teacher_id(plan),
            "teacher_fingerprint_before": before,
            "teacher_fingerprint_after": after,
        }
        _write_json(rdir / "manifest.json", manifest)
        save_checkpoint(student, rdir / "checkpoint", {"run_id": rid})
        for stack, ps in res.projections.items():
            for i, a in enumerate(ps.matrices):
                if a is not None:
                    (rdir / "projections").mkdir(exist_ok=True)
                    save_tensor(a, rdir / "projections" / f"{stack}.{i}.kdt")
        kl = [r["kl"] for r in res.log]
        hid = [r["hid"] for r in res.log]
        total = [r["total"] for r in res.log]
        result = RunResult(
            run_id=rid,
            factors=cell,
            status="success",
            dev=evaluate(student, ds, "dev"),
            test=evaluate(student, ds, "test"),
            loss_summary={"kl_first": kl[0], "kl_last": kl[-1], "hid_first": hid[0], "hid_last": hid[-1],
                          "total_first": total[0], "total_last": total[-1]},
            best_step=res.best_step,
            wall_time=time.perf_counter() - t0,
            checkpoint=str(rdir / "checkpoint"),
            seed=cell["seed"],
        )
    except Exception as exc:  # a failed cell must not stop the sweep
        log.warning("run %s failed: %s", rid, exc)
        result = RunResult(run_id=rid, factors=cell, status="failed", wall_time=time.perf_counter() - t0,
                           seed=cell["seed"], error="".join(traceback.format_exception_only(type(exc), exc)).strip())
    _write_json(rdir / "metrics.json", result.to_dict())
    return result


def _run_cell_worker(plan_dict: dict, cell: dict) -> dict:
    return run_cell(ExperimentPlan.from_dict(plan_dict), cell).to_dict()


def completed(plan: ExperimentPlan, cell: dict) -> RunResult | None:
    path = plan.out / "runs" / run_id(plan, cell) / "metrics.json"
    if not path.exists():
        return None
    res = RunResult.from_dict(json.loads(path.read_text()))
    return res if res.status == "success" else None


def run_sweep(plan: ExperimentPlan, max_cells: int | None = None) -> tuple[list[RunResult], dict]:
    """Run every missing cell, then aggregate.

    ``max_cells`` stops after that many newly executed cells (used to test
    resumption).  Returns the results for all cells that have one and the
    aggregate report.
    """
    plan.validate()
    plan.out.mkdir(parents=True, exist_ok=True)
    _write_json(plan.out / "plan.json", plan.to_dict())
    teacher_rec = train_teacher(plan)
    if teacher_rec["weak"] and not plan.allow_weak_teacher:
        raise WeakTeacherError(
            f"teacher dev {teacher_rec['dev']} is below the floor {plan.teacher_floor}; set allow_weak_teacher to proceed")
    cells = plan.cells()
    pending = [c for c in cells if completed(plan, c) is None]
    if max_cells is not None:
        pending = pending[:max_cells]
    if pending:
        if plan.workers > 1 or plan.isolate:
            with cf.ProcessPoolExecutor(max_workers=max(1, plan.workers)) as pool:
                futures = [pool.submit(_run_cell_worker, plan.to_dict(), c) for c in pending]
                for fut in futures:
                    try:
                        fut.result()
                    except Exception as exc:  # worker crashed outright
                        log.warning("worker failure: %s", exc)
        else:
            ds = load_task(plan.task)
            teacher = load_teacher(plan)
            for c in pending:
                r = run_cell(plan, c, ds, teacher)
                log.info("%s %s %s", r.run_id, r.status, r.dev)
    results = collect_results(plan)
    report = aggregate(results, primary_metric(_task_kind(plan)), plan)
    _write_json(plan.out / "aggregate.json", report)
    return results, report


def _task_kind(plan: ExperimentPlan) -> str:
    return plan.task.get("kind", "classification")


def collect_results(plan: ExperimentPlan) -> list[RunResult]:
    out = []
    for c in plan.cells():
        path = plan.out / "runs" / run_id(plan, c) / "metrics.json"
        if path.exists():
            out.append(RunResult.from_dict(json.loads(path.read_text())))
    return out


def aggregate(results: list[RunResult], metric: str, plan: ExperimentPlan | None = None) -> dict:
    """Per (init, depth, strategy) mean/std over seeds, plus per-block deltas and spread.

    Pure function of the run records.  ``std`` is the population standard
    deviation over seeds.
    """
    groups: dict[tuple, list[RunResult]] = {}
    for r in results:
        if r.status != "success":
            continue
        key = (r.factors["init_scheme"], r.factors["depth"], r.factors["strategy"])
        groups.setdefault(key, []).append(r)
    if plan is not None:
        inits, depths, strategies = plan.init_schemes, [int(d) for d in plan.depths], plan.strategies
    else:
        inits = sorted({k[0] for k in groups})
        depths = sorted({k[1] for k in groups})
        strategies = [s for s in STRATEGIES if any(k[2] == s for k in groups)]
    rows = []
    blocks = []
    for init in inits:
        for depth in depths:
            cells = {}
            for strat in strategies:
                rs = sorted(groups.get((init, depth, strat), []), key=lambda r: r.seed)
                dev = [r.dev[metric] for r in rs]
                test = [r.test.get(metric, float("nan")) for r in rs]
                cells[strat] = {
                    "init_scheme": init,
                    "depth": depth,
                    "strategy": strat,
                    "n": len(rs),
                    "seeds": [r.seed for r in rs],
                    "dev_mean": float(np.mean(dev)) if dev else None,
                    "dev_std": float(np.std(dev)) if dev else None,
                    "test_mean": float(np.mean(test)) if test else None,
                    "test_std": float(np.std(test)) if test else None,
                }
            base = cells.get("none", {}).get("dev_mean")
            matched = [cells[s]["dev_mean"] for s in MATCHING_STRATEGIES if s in cells and cells[s]["dev_mean"] is not None]
            spread = (max(matched) - min(matched)) if matched else None
            gain = (float(np.mean(matched)) - base) if matched and base is not None else None
            for strat, cell in cells.items():
                cell["delta_vs_none"] = (cell["dev_mean"] - base) if base is not None and cell["dev_mean"] is not None else None
                cell["spread"] = spread
                rows.append(cell)
            blocks.append({"init_scheme": init, "depth": depth, "none": base, "spread": spread, "mean_gain": gain,
                           "complete": all(c["n"] > 0 for c in cells.values())})
    return {"metric": metric, "rows": rows, "blocks": blocks}


# ---------------------------------------------------------------------------
# reports


def _fmt(v, pct: bool = True) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "--"
    return f"{100 * v:.2f}" if pct else f"{v}"


def report_tables(output_dir) -> dict[str, Path]:
    """Render ``report.txt``, ``report.tsv`` and a bar chart from the raw run records."""
    out = Path(output_dir)
    plan = ExperimentPlan.load(out / "plan.json")
    plan.output_dir = str(out)
    results = collect_results(plan)
    agg = aggregate(results, primary_metric(_task_kind(plan)), plan)
    rdir = out / "report"
    rdir.mkdir(parents=True, exist_ok=True)

    header = ["init_scheme", "depth", "strategy", "n", "dev_mean", "dev_std", "test_mean", "test_std", "delta_vs_none", "spread"]
    tsv = ["\t".join(header)]
    for row in agg["rows"]:
        tsv.append("\t".join("" if row[h] is None else (f"{row[h]:.6f}" if isinstance(row[h], float) else str(row[h])) for h in header))
    (rdir / "report.tsv").write_text("\n".join(tsv) + "\n")

    teacher = json.loads((out / "teacher" / "metrics.json").read_text()) if (out / "teacher" / "metrics.json").exists() else {}
    lines = [f"metric: dev {agg['metric']} (x100), mean ± std over seeds", ""]
    if teacher:
        lines.append(f"teacher ({teacher['spec']['num_layers']} layers): dev {_fmt(teacher['dev'].get(agg['metric']))}"
                     f"  test {_fmt(teacher['test'].get(agg['metric']))}")
        lines.append("")
    lines.append(f"{'init':<12}{'depth':>6}  {'strategy':<11}{'n':>3}  {'dev':>15}  {'test':>15}  {'Δ none':>8}")
    for row in agg["rows"]:
        dev = "--" if row["dev_mean"] is None else f"{_fmt(row['dev_mean'])} ± {_fmt(row['dev_std'])}"
        test = "--" if row["test_mean"] is None else f"{_fmt(row['test_mean'])} ± {_fmt(row['test_std'])}"
        lines.append(f"{row['init_scheme']:<12}{row['depth']:>6}  {row['strategy']:<11}{row['n']:>3}  {dev:>15}  {test:>15}"
                     f"  {_fmt(row['delta_vs_none']):>8}")
    lines += ["", "blocks: spread = max - min over matching strategies; gain = their mean minus none"]
    for b in agg["blocks"]:
        missing = "" if b["complete"] else "  (missing cells)"
        lines.append(f"  {b['init_scheme']:<12} depth {b['depth']:>2}: none {_fmt(b['none'])}  gain {_fmt(b['mean_gain'])}"
                     f"  spread {_fmt(b['spread'])}{missing}")
    (rdir / "report.txt").write_text("\n".join(lines) + "\n")

    bars = {}
    for row in agg["rows"]:
        label = f"{row['init_scheme']}\nd={row['depth']}"
        if row["dev_mean"] is not None:
            bars.setdefault(label, {})[row["strategy"]] = (row["dev_mean"], row["dev_std"])
    paths = {"txt": rdir / "report.txt", "tsv": rdir / "report.tsv"}
    if bars:
        paths["figure"] = plotting.strategy_bars(bars, agg["metric"], rdir / "strategies.png")
    return paths


# ---------------------------------------------------------------------------
# geometry


def geometry_sample(ds: Dataset, split: str = "dev", limit: int | None = 256, shard: tuple[int, int] = (0, 1)):
    x, y = ds.arrays(split)
    if limit is not None:
        x, y = x[:limit], y[:limit]
    k, n = shard
    if not 0 <= k < n:
        raise ValueError(f"bad shard {k}/{n}")
    bounds = np.linspace(0, len(x), n + 1).astype(int)
    return x[bounds[k] : bounds[k + 1]], y[bounds[k] : bounds[k + 1]]


def analyze_geometry(
    student: TransformerModel,
    teacher: TransformerModel,
    ds: Dataset,
    out_dir,
    *,
    aggregation: str = "per_token",
    split: str = "dev",
    limit: int | None = 256,
    shard: tuple[int, int] = (0, 1),
    stack: str = "encoder",
    mapping: LayerMapping | None = None,
    projections: ProjectionSet | None = None,
    meta: dict | None = None,
) -> tuple[AngleReport, str]:
    """Write an angle report, histogram data files and figures; return the report and a summary line.

    Raw hidden states are compared unless both ``mapping`` and
    ``projections`` are given.
    """
    x, y = geometry_sample(ds, split, limit, shard)
    dec = decoder_inputs(y) if ds.kind == "seq2seq" else None
    info = {"dataset": ds.name, "split": split, "shard": f"{shard[0]}/{shard[1]}", **(meta or {})}
    report = build_angle_report(student, teacher, x, aggregation, stack=stack, decoder_inputs=dec,
                                projections=projections, mapping=mapping, meta=info)
    return report, write_geometry(report, out_dir)


def write_geometry(report: AngleReport, out_dir) -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "angle_report.txt")
    report.write_histograms(out)
    if report.count.sum():
        plotting.angle_histograms(report, out / "angle_histograms.png")
        plotting.angle_heatmaps(report, out / "angle_heatmaps.png")
    s = report.summary()
    line = (f"mean cosine {s['mean_cosine']:.4f}; positive-mean triples {s['positive_fraction']:.1%} "
            f"({s['triples']} triples, {s['samples']} samples, {s['excluded_samples']} excluded)")
    (out / "summary.txt").write_text(line + "\n")
    return line


def load_projections(run_dir, mapping: LayerMapping, student: TransformerModel, teacher: TransformerModel,
                     stack: str = "encoder") -> ProjectionSet:
    """Projections saved by a run (identity when none were trained)."""
    ps = build_projections(mapping, student.spec.hidden_dim, teacher.spec.hidden_dim)
    for i in range(len(ps.matrices)):
        path = Path(run_dir) / "projections" / f"{stack}.{i}.kdt"
        if path.exists():
            ps.matrices[i] = load_tensor(path)
    return ps


def analyze_run(plan: ExperimentPlan, rid: str, project: bool = False, out_dir=None, **options) -> tuple[AngleReport, str]:
    rdir = plan.out / "runs" / rid
    manifest = json.loads((rdir / "manifest.json").read_text())
    student = load_checkpoint(rdir / "checkpoint")
    teacher = load_teacher(plan)
    mapping = LayerMapping.from_dict(manifest["mapping"])
    projections = None
    if project:
        projections = load_projections(rdir, mapping, student, teacher, options.get("stack", "encoder"))
    meta = {"student": rid, "teacher": manifest["teacher_id"]}
    return analyze_geometry(student, teacher, load_task(plan.task), out_dir or rdir / "geometry", mapping=mapping,
                            projections=projections, meta=meta, **options)
