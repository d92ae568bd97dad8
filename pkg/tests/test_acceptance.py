"""End-to-end acceptance criteria.

Each test prints one ``PASS``/``FAIL`` line (also collected in the terminal
summary).  Criteria 4 to 9 share one sweep with the default experiment
recipe: a 12-layer teacher on the synthetic classification task and
three distillation seeds per cell.  The full module takes roughly 15 minutes
on one CPU core.
"""

import dataclasses
import json
import math
import time
import zlib

import mpmath
import numpy as np
import pytest

from helpers import OP_CASES, REL_TOL, gradcheck, verdict
from layerkd import harness
from layerkd import tensor as T
from layerkd.distill import (
    MATCHING_STRATEGIES,
    DistillConfig,
    LayerMapping,
    build_projections,
    distill,
    hidden_match_loss,
    kl_loss,
    make_student,
    select_layers,
    total_distill_loss,
)
from layerkd.models import ModelSpec, build_model, evenly_spaced, init_student_from_teacher
from layerkd.tasks import decoder_inputs, gen_classification_task, gen_seq2seq_task

pytestmark = pytest.mark.acceptance

SEEDS = [0, 1, 2]


# ---------------------------------------------------------------------------
# criterion 1: gradients


def combined_loss_case(kind, rng):
    """Full KL + lambda * hidden objective on a mini transformer with trainable projections."""
    if kind == "encoder_classifier":
        ds = gen_classification_task(0, 40, 5, 4)
    else:
        ds = gen_seq2seq_task(0, 40, 4, 4)
    t_spec = ModelSpec(kind=kind, num_layers=3, hidden_dim=8, num_heads=2, ffn_dim=12,
                       vocab_size=ds.vocab_size, max_seq_len=5)
    s_spec = dataclasses.replace(t_spec, num_layers=2, hidden_dim=6, num_heads=3)
    teacher, student = build_model(t_spec, 0), build_model(s_spec, 1)
    teacher.set_trainable(False)
    mapping = select_layers("random", 2, 3, seed=4)
    stacks = ("encoder",) if kind == "encoder_classifier" else ("encoder", "decoder")
    projections = {s: build_projections(mapping, 6, 8, seed=k) for k, s in enumerate(stacks)}
    x, y = ds.arrays("train")
    x, y = x[:3], y[:3]
    args = (x,) if kind == "encoder_classifier" else (x, decoder_inputs(y))
    weights = None if kind == "encoder_classifier" else (y != 0).astype(float)
    t_logits, t_hid = teacher(*args)
    t_hid = harness_stacks(t_hid)

    def loss():
        s_logits, s_hid = student(*args)
        s_hid = harness_stacks(s_hid)
        kl = kl_loss(t_logits, s_logits, 2.0, weights)
        hid = None
        for stack in stacks:
            term = hidden_match_loss(s_hid[stack], t_hid[stack], mapping, projections[stack])
            hid = term if hid is None else T.add(hid, term)
        return total_distill_loss(kl, hid, 0.7)

    params = student.parameters() + [p for ps in projections.values() for p in ps.parameters()]
    return loss, params, teacher


def harness_stacks(h):
    return h if isinstance(h, dict) else {"encoder": h}


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst, failures, slots = 0.0, [], []
    for name, build in OP_CASES:
        fn, tensors = build(np.random.default_rng(zlib.crc32(name.encode())))
        err, n = gradcheck(fn, tensors, slots=50, seed=1)
        slots.append(n)
        worst = max(worst, err)
        if err >= REL_TOL or n < 50:
            failures.append(f"{name} ({err:.1e})")
    for kind in ("encoder_classifier", "encoder_decoder"):
        fn, params, teacher = combined_loss_case(kind, np.random.default_rng(0))
        err, n = gradcheck(fn, params, slots=120, seed=2)
        slots.append(n)
        worst = max(worst, err)
        if err >= REL_TOL:
            failures.append(f"combined loss {kind} ({err:.1e})")
        assert all(p.grad is None for p in teacher.parameters())
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    verdict(1, ok, f"{len(OP_CASES)} ops + 2 combined losses, >= {min(slots)} slots each, "
                   f"max rel err {worst:.1e} (< 1e-4), {elapsed:.0f}s" + (f"; failed: {failures}" if failures else ""))
    assert ok


# ---------------------------------------------------------------------------
# criterion 2: loss oracles


def kl_oracle(t, s, temperature):
    mpmath.mp.dps = 40
    total = mpmath.mpf(0)
    for zt, zs in zip(t, s):
        et = [mpmath.exp(mpmath.mpf(float(v)) / temperature) for v in zt]
        es = [mpmath.exp(mpmath.mpf(float(v)) / temperature) for v in zs]
        zt_sum, zs_sum = sum(et), sum(es)
        total += sum((a / zt_sum) * mpmath.log((a / zt_sum) / (b / zs_sum)) for a, b in zip(et, es))
    return float(total / len(t))


def hidden_oracle(student, teacher, pairs, mats):
    total = 0.0
    for (s, t), a in zip(pairs, mats):
        hs, ht = student[s - 1], teacher[t - 1]
        acc, n = 0.0, 0
        for idx in np.ndindex(ht.shape):
            proj = hs[idx] if a is None else sum(a[idx[-1], k] * hs[idx[:-1] + (k,)] for k in range(hs.shape[-1]))
            acc += (proj - ht[idx]) ** 2
            n += 1
        total += acc / n
    return total


def test_criterion_2_loss_oracles():
    rng = np.random.default_rng(2024)
    kl_err = 0.0
    for _ in range(100):
        n, c = int(rng.integers(1, 6)), int(rng.integers(2, 9))
        temp = float(rng.choice([0.5, 1.0, 2.0, 4.0]))
        t, s = rng.normal(size=(n, c)) * 3, rng.normal(size=(n, c)) * 3
        kl_err = max(kl_err, abs(kl_loss(t, T.Tensor(s), temp).item() - kl_oracle(t, s, temp)))
    hid_err = 0.0
    for _ in range(100):
        lt = int(rng.integers(1, 7))
        ls = int(rng.integers(1, lt + 1))
        strategy = str(rng.choice(["forward", "reverse", "all_to_one", "random"]))
        mapping = select_layers(strategy, ls, lt, int(rng.integers(100)))
        d_s = int(rng.integers(1, 4))
        d_t = d_s if rng.random() < 0.5 else int(rng.integers(1, 4))
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)))
        student = [rng.normal(size=(*shape, d_s)) for _ in range(ls)]
        teacher = [rng.normal(size=(*shape, d_t)) for _ in range(lt)]
        ps = build_projections(mapping, d_s, d_t, seed=int(rng.integers(100)))
        got = hidden_match_loss([T.Tensor(h) for h in student], teacher, mapping, ps).item()
        mats = [None if m is None else m.data for m in ps.matrices]
        hid_err = max(hid_err, abs(got - hidden_oracle(student, teacher, mapping.pairs, mats)))
    ok = kl_err < 1e-10 and hid_err < 1e-10
    verdict(2, ok, f"KL max abs err {kl_err:.1e}, hidden-match max abs err {hid_err:.1e} over 100 + 100 instances (< 1e-10)")
    assert ok


# ---------------------------------------------------------------------------
# criterion 3: strategy properties


def test_criterion_3_strategy_properties():
    problems = []
    checked = 0
    for lt in range(1, 25):
        for ls in range(1, lt + 1):
            checked += 1
            fwd = select_layers("forward", ls, lt).validate(ls, lt)
            t = fwd.teacher_layers
            if t != sorted(t) or not all(1 <= v <= lt for v in t) or [s for s, _ in fwd.pairs] != list(range(1, ls + 1)):
                problems.append(("forward", ls, lt))
            if t != [math.ceil(i * lt / ls) for i in range(1, ls + 1)]:
                problems.append(("forward-rule", ls, lt))
            rev = select_layers("reverse", ls, lt).validate(ls, lt)
            if rev.teacher_layers != t[::-1] or rev.teacher_layers[::-1] != t:
                problems.append(("reverse", ls, lt))
            a2o = select_layers("all_to_one", ls, lt).validate(ls, lt)
            if a2o.teacher_layers != [math.ceil(lt / 2)] * ls:
                problems.append(("all_to_one", ls, lt))
            for seed in range(3):
                rnd = select_layers("random", ls, lt, seed).validate(ls, lt)
                if sorted(rnd.teacher_layers) != t or rnd != select_layers("random", ls, lt, seed):
                    problems.append(("random", ls, lt, seed))
            if select_layers("none", ls, lt).pairs:
                problems.append(("none", ls, lt))

    # immutability across a run: the mapping used to the last step is the one selected up front
    ds = gen_classification_task(0, 80, 6, 4)
    teacher = build_model(ModelSpec(num_layers=6, hidden_dim=8, num_heads=2, ffn_dim=16,
                                    vocab_size=ds.vocab_size, max_seq_len=6), 0)
    cfg = DistillConfig(strategy="random", steps=5, batch_size=8, warmup=1, eval_every=5, seed=11)
    before = select_layers("random", 3, 6, 11)
    res = distill(teacher, make_student(teacher, 3, "random", 11), cfg, ds)
    frozen = dataclasses.is_dataclass(res.mapping) and type(res.mapping).__dataclass_params__.frozen
    if res.mapping != before or not frozen or LayerMapping.from_dict(res.mapping.to_dict()) != before:
        problems.append(("immutability",))
    ok = not problems
    verdict(3, ok, f"{checked} (L_s, L_t) pairs exhaustively checked for all five strategies; "
                   f"mapping frozen across a run" + (f"; violations: {problems[:5]}" if problems else ""))
    assert ok


# ---------------------------------------------------------------------------
# criteria 4 to 9: one shared sweep with the default recipe


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    base = {"output_dir": str(out), "seeds": SEEDS}
    plans = {
        "d3_random": harness.ExperimentPlan.from_dict({**base, "depths": [3], "init_schemes": ["random"]}),
        "d3_copy_none": harness.ExperimentPlan.from_dict({**base, "depths": [3], "init_schemes": ["weight_copy"],
                                                          "strategies": ["none"]}),
        "deep_copy": harness.ExperimentPlan.from_dict({**base, "depths": [6, 9], "init_schemes": ["weight_copy"]}),
    }
    t0 = time.perf_counter()
    aggregates, results = {}, {}
    for name, plan in plans.items():
        results[name], aggregates[name] = harness.run_sweep(plan)
    teacher_rec = json.loads((out / "teacher" / "metrics.json").read_text())
    print(f"teacher dev accuracy {teacher_rec['dev']['accuracy']:.4f}; sweeps took {time.perf_counter() - t0:.0f}s")
    return plans, results, aggregates, teacher_rec


def block(agg, init, depth):
    rows = {r["strategy"]: r for r in agg["rows"] if r["init_scheme"] == init and r["depth"] == depth}
    b = next(b for b in agg["blocks"] if b["init_scheme"] == init and b["depth"] == depth)
    return rows, b


def fmt(rows):
    return ", ".join(f"{s} {100 * r['dev_mean']:.1f}" for s, r in rows.items())


def test_teacher_is_strong(experiment):
    _, _, _, rec = experiment
    assert not rec["weak"] and rec["dev"]["accuracy"] > 0.95


def test_criterion_4_matching_helps(experiment):
    _, results, aggs, _ = experiment
    assert all(r.status == "success" for r in results["d3_random"])
    rows, b = block(aggs["d3_random"], "random", 3)
    margins = {s: rows[s]["dev_mean"] - rows["none"]["dev_mean"] for s in MATCHING_STRATEGIES}
    ok = all(rows[s]["n"] >= 3 for s in rows) and all(m > 0 for m in margins.values())
    soft = all(m >= 0.02 for m in margins.values())
    verdict(4, ok, f"3-layer random-init dev acc over {len(SEEDS)} seeds: {fmt(rows)}; "
                   f"min margin {100 * min(margins.values()):.1f} points (soft target >= 2: {'met' if soft else 'missed'})")
    assert ok


def test_criterion_5_strategy_spread_small(experiment):
    _, _, aggs, _ = experiment
    rows, b = block(aggs["d3_random"], "random", 3)
    ok = b["mean_gain"] > 0 and b["spread"] <= 0.5 * b["mean_gain"]
    verdict(5, ok, f"3-layer random-init: spread {100 * b['spread']:.1f} vs mean gain {100 * b['mean_gain']:.1f} "
                   f"points (need spread <= half the gain)")
    assert ok


def test_criterion_6_depth_sweep(experiment):
    _, results, aggs, _ = experiment
    assert all(r.status == "success" for r in results["deep_copy"])
    parts, ok = [], True
    for depth in (6, 9):
        rows, b = block(aggs["deep_copy"], "weight_copy", depth)
        good = b["mean_gain"] > 0 and b["spread"] <= 0.5 * b["mean_gain"]
        ok &= good
        parts.append(f"depth {depth}: {fmt(rows)}; spread {100 * b['spread']:.1f} vs gain {100 * b['mean_gain']:.1f}")
    verdict(6, ok, "weight-copied students; " + " | ".join(parts))
    assert ok


def test_criterion_7_geometry(experiment, tmp_path):
    plans, results, _, _ = experiment
    plan = plans["d3_random"]
    lines, ok = [], True
    for strat in MATCHING_STRATEGIES:
        rid = next(r.run_id for r in results["d3_random"] if r.factors["strategy"] == strat and r.seed == SEEDS[0])
        report, _ = harness.analyze_run(plan, rid, out_dir=tmp_path / strat)
        s = report.summary()
        good = s["mean_cosine"] > 0 and s["positive_fraction"] >= 0.8
        ok &= good
        lines.append(f"{strat} mean {s['mean_cosine']:.2f} / {100 * s['positive_fraction']:.0f}% positive")
        assert (tmp_path / strat / "angle_report.txt").exists()
    verdict(7, ok, "distilled 3-layer students (seed 0, per-token, raw states): " + "; ".join(lines))
    assert ok


def test_criterion_8_determinism_and_frozen_teacher(experiment, tmp_path):
    plans, results, _, teacher_rec = experiment
    plan = plans["d3_random"]
    teacher = harness.load_teacher(plan)
    ds = harness.load_task(plan.task)
    original = next(r for r in results["d3_random"] if r.factors["strategy"] == "random" and r.seed == SEEDS[1])
    replay_plan = dataclasses.replace(plan, output_dir=str(tmp_path / "replay"))
    replay = harness.run_cell(replay_plan, original.factors, ds, teacher)
    orig_dir = plan.out / "runs" / original.run_id
    same_metrics = (replay.dev == original.dev and replay.test == original.test
                    and replay.loss_summary == original.loss_summary and replay.best_step == original.best_step)
    fp = lambda d: json.loads((d / "checkpoint" / "manifest.json").read_text())["fingerprint"]  # noqa: E731
    same_weights = fp(orig_dir) == fp(replay_plan.out / "runs" / original.run_id)
    strip = lambda p: [{k: v for k, v in json.loads(l).items() if k != "wall_time"}  # noqa: E731
                       for l in p.read_text().splitlines()]
    same_log = strip(orig_dir / "log.jsonl") == strip(replay_plan.out / "runs" / original.run_id / "log.jsonl")

    hashes = set()
    n_runs = 0
    for manifest in plan.out.glob("runs/*/manifest.json"):
        m = json.loads(manifest.read_text())
        hashes.update({m["teacher_fingerprint_before"], m["teacher_fingerprint_after"]})
        n_runs += 1
    teacher_ok = hashes == {teacher_rec["fingerprint"]} and teacher.fingerprint() == teacher_rec["fingerprint"]
    ok = same_metrics and same_weights and same_log and teacher_ok
    verdict(8, ok, f"replayed {original.run_id}: metrics {'identical' if same_metrics else 'DIFFER'}, "
                   f"weights {'identical' if same_weights else 'DIFFER'}, log {'identical' if same_log else 'DIFFERS'}; "
                   f"teacher hash unchanged across {n_runs} runs: {teacher_ok}")
    assert ok


def test_criterion_9_weight_copy(experiment):
    plans, _, aggs, _ = experiment
    teacher = harness.load_teacher(plans["d3_random"])
    exact = True
    for depth in (3, 6, 9):
        student = build_model(teacher.spec.with_layers(depth), 123)
        init_student_from_teacher(student, teacher)
        for i, t_layer in enumerate(evenly_spaced(depth, 12)):
            sb, tb = student.block_params("encoder", i), teacher.block_params("encoder", t_layer - 1)
            exact &= all(np.array_equal(sb[k].data, tb[k].data) for k in tb)
        exact &= all(np.array_equal(p.data, teacher.params[n].data) for n, p in student.params.items()
                     if not n.startswith("encoder."))
        exact &= make_student(teacher, depth, "weight_copy", 5).fingerprint() == make_student(teacher, depth, "weight_copy", 6).fingerprint()
    rand_rows, _ = block(aggs["d3_random"], "random", 3)
    copy_rows, _ = block(aggs["d3_copy_none"], "weight_copy", 3)
    r, c = rand_rows["none"]["dev_mean"], copy_rows["none"]["dev_mean"]
    ok = exact and c > r
    verdict(9, ok, f"copied parameters bit-equal to teacher sources at depths 3/6/9: {exact}; "
                   f"3-layer None dev acc weight-copy {100 * c:.1f} vs random init {100 * r:.1f}")
    assert ok
