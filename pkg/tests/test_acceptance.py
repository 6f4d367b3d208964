"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line in the summary.

Criteria 7-10 run the default experiment matrix (several minutes per seed) and are
marked ``slow``; deselect them with ``-m "not slow"``.
"""

import csv
import itertools
import time
import warnings

import numpy as np
import pytest

from sparse_pathways import pathways as pw
from sparse_pathways.analysis import iou, union_ratio
from sparse_pathways.blocks import BlockPartition, Mask
from sparse_pathways.harness import pipeline as pl
from sparse_pathways.harness.config import ExperimentConfig
from sparse_pathways.model import Model, ModelConfig, forward, snapshot
from sparse_pathways.pathways import LanguageTask, SamplingPolicy, train_pathways, union_mask
from sparse_pathways.pruning import (PruneConfig, PruneWarning, imp_run, iterations_to_target, lth_run,
                                     prune_step, random_mask)
from sparse_pathways.regularization import lasso_penalty
from sparse_pathways.tensor import (Tensor, add, embedding, gelu, group_l2_norms, masked, matmul, scale,
                                    softmax_cross_entropy, total)

from .conftest import batch_stream, central_diff, max_rel_err, report
from .test_pruning import brute_force_prune

GRAD_EPS = 1e-3
GRAD_TOL = 1e-3
GRAD_SEEDS = 10
GRAD_BUDGET_S = 60.0
MASTER_SEEDS = (0, 1, 2)
RUN_BUDGET_S = 15 * 60
TARGET = 0.706

F64 = np.float64


# --------------------------------------------------------------------------- 1. gradient fidelity

def _op_cases(rng):
    """(name, inputs, f(tensors) -> scalar Tensor) for every differentiable op."""
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 5))
    b = rng.standard_normal((1, 5))
    keep = rng.random((6, 5)) < 0.6
    table = rng.standard_normal((7, 3))
    idx = rng.integers(0, 7, (4, 2))
    targets = rng.integers(0, 5, 4)
    part = BlockPartition(12, 3)
    lasso_w = rng.standard_normal((12, 3))

    return [
        ("matmul", [x, w], lambda a, c: total(scale(matmul(a, c), 0.3))),
        ("add", [x @ w, b], lambda a, c: total(gelu(add(a, c)))),
        ("scale", [x], lambda a: total(gelu(scale(a, -1.7)))),
        ("gelu", [x], lambda a: total(gelu(a))),
        ("masked", [w], lambda a: total(gelu(masked(a, keep)))),
        ("embedding", [table], lambda t: total(gelu(embedding(t, idx)))),
        ("softmax_cross_entropy", [x @ w], lambda a: softmax_cross_entropy(a, targets)),
        ("group_l2_norms", [lasso_w], lambda a: total(group_l2_norms(a, part))),
        ("lasso_penalty", [lasso_w], lambda a: lasso_penalty({"w": a}, {"w": part}, {"w": 0.37})),
        ("composite", [x, w, b], lambda a, c, d: softmax_cross_entropy(gelu(add(matmul(a, c), d)), targets)),
    ]


def _grad_errors(seed):
    rng = np.random.default_rng(seed)
    errs = {}
    for name, inputs, fn in _op_cases(rng):
        tensors = [Tensor(a, requires_grad=True, dtype=F64) for a in inputs]
        fn(*tensors).backward()
        worst = 0.0
        for i, a in enumerate(inputs):
            def f(v, i=i):
                args = [Tensor(v if j == i else inputs[j], dtype=F64) for j in range(len(inputs))]
                return fn(*args).item()
            worst = max(worst, max_rel_err(tensors[i].grad, central_diff(f, a, GRAD_EPS)))
        errs[name] = worst
    return errs


def test_c01_gradient_fidelity():
    t0 = time.perf_counter()
    worst = {}
    for seed in range(GRAD_SEEDS):
        for name, e in _grad_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), e)
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top < GRAD_TOL and elapsed < GRAD_BUDGET_S
    report(1, ok, f"max rel err {top:.2e} over {len(worst)} ops x {GRAD_SEEDS} seeds "
                  f"(tol {GRAD_TOL:g}), {elapsed:.1f}s (budget {GRAD_BUDGET_S:.0f}s)")
    assert top < GRAD_TOL, worst
    assert elapsed < GRAD_BUDGET_S


# --------------------------------------------------------------------------- 2. pruning oracle

def test_c02_prune_step_oracle():
    mismatches = 0
    instances = 0
    seed = 0
    while instances < 100:
        rng = np.random.default_rng([2, seed])
        seed += 1
        part = BlockPartition(int(rng.integers(1, 41)), int(rng.integers(1, 11)))
        if part.n_blocks > 100:
            continue
        instances += 1
        bits = rng.random(part.n_blocks) < rng.uniform(0.2, 1.0)
        scores = np.round(rng.random(part.n_blocks), 2)
        p = float(rng.uniform(0.05, 0.9))
        target = float(rng.uniform(0.05, 0.95))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PruneWarning)
            got = prune_step(Mask({"w": part}, {"w": bits.copy()}), {"w": scores}, p, target).bits["w"]
        want = brute_force_prune(bits.tolist(), scores.tolist(), part.lengths.tolist(), part.size, p, target)
        mismatches += got.tolist() != want
    report(2, mismatches == 0, f"{instances} random instances (<=100 blocks), {mismatches} mismatches")
    assert mismatches == 0


# --------------------------------------------------------------------------- 3. schedule arithmetic

def test_c03_schedule_arithmetic():
    n = iterations_to_target(0.2, TARGET)
    cfg = ModelConfig(vocab_size=16, context_window=4, embed_dim=8, hidden_dim=128)
    model = Model.init(cfg, np.random.default_rng(0))
    total_blocks = {k: p.n_blocks for k, p in model.partitions.items()}

    # unclamped: target far away, so no clamp for the first iterations
    survived = []
    imp_run(model, batch_stream(cfg), PruneConfig(interval=1, target_sparsity=0.99, post_prune_finetune_steps=0),
            hook=lambda ev, it, m, mask: survived.append(
                {k: mask.bits[k].sum() / total_blocks[k] for k in mask}) if ev == "iteration_end" else None)
    schedule_err = 0.0
    for i, frac in enumerate(survived[:8], start=1):
        for k, f in frac.items():
            # each iteration rounds k to the nearest block: at most 0.5 block drift per iteration
            schedule_err = max(schedule_err, abs(f - 0.8 ** i) * total_blocks[k] / (0.5 * i))
    schedule_ok = schedule_err <= 1.0

    res = imp_run(model, batch_stream(cfg), PruneConfig(interval=2, post_prune_finetune_steps=0))
    final_ok = all(TARGET <= res.mask.layer_sparsity(k) < TARGET + 8 / p.size for k, p in model.partitions.items())
    ok = n == 6 and schedule_ok and final_ok and len(res.iterations) == n
    sp = ", ".join(f"{k}={res.mask.layer_sparsity(k):.4f}" for k in model.partitions)
    report(3, ok, f"iterations_to_target(0.2, 0.706)={n}; 0.8^n schedule within block rounding: {schedule_ok}; "
                  f"final sparsity {sp}")
    assert n == 6
    assert schedule_ok
    assert final_ok and len(res.iterations) == n


# --------------------------------------------------------------------------- 4. masked-update contract

def test_c04_masked_update_contract(monkeypatch, suite):
    cfg = ModelConfig(vocab_size=64, context_window=8, embed_dim=16, hidden_dim=64)
    theta0 = Model.init(cfg, np.random.default_rng(0))
    from sparse_pathways import datagen

    masks = {l: random_mask(theta0.partitions, TARGET, seed=i) for i, l in enumerate(suite.languages)}
    tasks = [LanguageTask(l, datagen.batches(suite.corpora[l].splits["train"], 8, 32, np.random.default_rng(i)),
                          len(suite.corpora[l].splits["train"]), masks[l]) for i, l in enumerate(suite.languages)]
    union = union_mask(list(masks.values()))
    eval_x = {l: datagen.examples(suite.corpora[l].splits["valid"][:400], 8) for l in suite.languages}
    violations = []
    steps = [0]
    real_step = pw.pathways_step

    def checked_step(trainer, task, batch=None):
        model = trainer.model
        before = {n: model.params[n].copy() for n in model.prunable}
        out = real_step(trainer, task, batch)
        for n in model.prunable:
            off = ~task.mask.expanded(n)
            if model.params[n][off].tobytes() != before[n][off].tobytes():
                violations.append((steps[0], task.language, n, "masked weight changed"))
            if np.any(model.params[n][~union.expanded(n)]):
                violations.append((steps[0], task.language, n, "weight outside union non-zero"))
        if steps[0] % 50 == 0:  # evaluation point: effective weights outside m_l are exact zeros
            for l, m in masks.items():
                x, y = eval_x[l]
                garbage = model.clone()
                for n in garbage.prunable:
                    garbage.params[n][~m.expanded(n)] = 1e3
                if forward(garbage, x, y, m)[0].item() != forward(model, x, y, m)[0].item():
                    violations.append((steps[0], l, "-", "masked weights leak into evaluation"))
        steps[0] += 1
        return out

    monkeypatch.setattr(pw, "pathways_step", checked_step)
    train_pathways(theta0, tasks, 400, SamplingPolicy(seed=0))
    ok = not violations and steps[0] == 400
    report(4, ok, f"{steps[0]} pathways steps over 4 languages, {len(violations)} violations")
    assert ok, violations[:5]


# --------------------------------------------------------------------------- 5. rewinding contract

def test_c05_rewinding_contract():
    cfg = ModelConfig(vocab_size=16, context_window=4, embed_dim=8, hidden_dim=64)
    model = Model.init(cfg, np.random.default_rng(1))
    theta0 = snapshot(model)
    checked = []
    bad = []

    def hook(event, it, m, mask):
        if event != "iteration_start":
            return
        checked.append(it)
        for n, a in theta0.tensors.items():
            keep = mask.expanded(n) if n in mask.partitions else np.ones(a.shape, bool)
            if m.params[n][keep].tobytes() != a[keep].tobytes():
                bad.append((it, n))

    lth_run(model, batch_stream(cfg), PruneConfig(interval=10, post_prune_finetune_steps=0), hook=hook)
    ok = not bad and len(checked) == iterations_to_target(0.2, TARGET)
    report(5, ok, f"{len(checked)} iteration starts checked, {len(bad)} mismatches with theta0")
    assert ok, bad


# --------------------------------------------------------------------------- 6. mask-stats oracle

def test_c06_mask_stats_oracle():
    failures = []
    for seed in range(100):
        rng = np.random.default_rng([6, seed])
        parts = {f"l{i}": BlockPartition(int(rng.integers(1, 30)), int(rng.integers(1, 6))) for i in range(2)}
        k = int(rng.integers(2, 6))
        masks = [Mask(parts, {n: rng.random(p.n_blocks) < rng.uniform(0.05, 0.95) for n, p in parts.items()})
                 for _ in range(k)]
        sets = [{(n, i) for n in m for i in np.flatnonzero(m.expanded(n).ravel())} for m in masks]
        size = sum(p.size for p in parts.values())
        for (i, a), (j, b) in itertools.combinations(enumerate(sets), 2):
            if a | b and iou(masks[i], masks[j]) != len(a & b) / len(a | b):
                failures.append((seed, "iou", i, j))
        for m, s in zip(masks, sets):
            if s and iou(m, m) != 1.0:
                failures.append((seed, "self-iou"))
        ur = union_ratio(masks)
        if ur != len(set().union(*sets)) / size:
            failures.append((seed, "ur"))
        kept = len(set().union(*sets))  # bounds compared in integer weight counts
        if not max(len(s) for s in sets) <= kept <= min(size, sum(len(s) for s in sets)):
            failures.append((seed, "bounds"))
    report(6, not failures, f"100 random mask tuples, {len(failures)} disagreements with the set oracle")
    assert not failures, failures[:5]


# --------------------------------------------------------------------------- 7-10. experiment matrix

@pytest.fixture(scope="session")
def matrix_runs(tmp_path_factory):
    runs = {}
    for seed in MASTER_SEEDS:
        out = tmp_path_factory.mktemp(f"matrix-seed{seed}")
        cfg = ExperimentConfig(seed=seed, out=str(out))
        runs[seed] = (cfg, pl.run_matrix(cfg))
    return runs


def _avg(result, model):
    return result.row(model).avg_loss


@pytest.mark.slow
def test_c07_loss_ordering(matrix_runs):
    seeds = sorted(matrix_runs)
    res = {s: matrix_runs[s][1] for s in seeds}
    mean = {m: float(np.mean([_avg(res[s], m) for s in seeds]))
            for m in ("pathways-lth", "lap", "pathways-random", "lsp-imp", "lsp-lth", "small-dense")}
    a_each = all(_avg(res[s], "pathways-lth") < _avg(res[s], "lap") for s in seeds)
    a = mean["pathways-lth"] < mean["lap"] and a_each
    b = mean["pathways-lth"] <= mean["pathways-random"]
    c = mean["lsp-imp"] <= mean["small-dense"] and mean["lsp-lth"] <= mean["small-dense"]
    budget = all(res[s].seconds <= RUN_BUDGET_S for s in seeds)
    detail = (f"seed-mean avg test loss: pathways-lth {mean['pathways-lth']:.4f} vs lap {mean['lap']:.4f} "
              f"(every seed: {a_each}); vs pathways-random {mean['pathways-random']:.4f}; "
              f"lsp-imp {mean['lsp-imp']:.4f}, lsp-lth {mean['lsp-lth']:.4f} vs small-dense "
              f"{mean['small-dense']:.4f}; run times "
              + "/".join(f"{res[s].seconds:.0f}s" for s in seeds))
    report(7, a and b and c and budget, detail)
    assert a, "(a) pathways-lth must beat lap on the seed mean and on every seed"
    assert b, "(b) pathways-lth <= pathways-random"
    assert c, "(c) lsp-imp and lsp-lth <= small-dense"
    assert budget


@pytest.mark.slow
def test_c08_mask_overlap_direction(matrix_runs):
    rows = []
    for s, (_, r) in sorted(matrix_runs.items()):
        lth, imp = r.stats["lth"], r.stats["imp"]
        rows.append((s, lth.mean_pairwise_iou(), imp.mean_pairwise_iou(), lth.union_ratio, imp.union_ratio))
    iou_wins = sum(l > i for _, l, i, _, _ in rows)
    ur_wins = sum(lu < iu for _, _, _, lu, iu in rows)
    ok = iou_wins >= 2 and ur_wins >= 2
    detail = "; ".join(f"seed {s}: IOU lth {l:.4f} / imp {i:.4f}, UR lth {lu:.4f} / imp {iu:.4f}"
                       for s, l, i, lu, iu in rows)
    report(8, ok, f"IOU(lth)>IOU(imp) on {iou_wins}/3, UR(lth)<UR(imp) on {ur_wins}/3 seeds; {detail}")
    assert iou_wins >= 2
    assert ur_wins >= 2


def _post_prune_increase(result, tag):
    vals = [float(r[-1]) for r in result.pruning if r[0] == tag and r[1] == "imp" and r[2] != pl.AGNOSTIC]
    assert len(vals) == 4
    return float(np.mean(vals))


@pytest.mark.slow
def test_c09_lasso_reduces_pruning_damage(matrix_runs):
    per_seed = {s: (_post_prune_increase(r, "lasso"), _post_prune_increase(r, "nolasso"))
                for s, (_, r) in sorted(matrix_runs.items())}
    ok = all(l < n for l, n in per_seed.values())
    detail = "; ".join(f"seed {s}: lasso {l:+.4f} vs no lasso {n:+.4f}" for s, (l, n) in per_seed.items())
    report(9, ok, f"pruning-induced loss increase (LSP-IMP, mean of 4 languages) {detail}")
    assert ok


@pytest.mark.slow
def test_c10_reproducible_results_csv(matrix_runs, tmp_path_factory):
    seed = MASTER_SEEDS[0]
    first_cfg, _ = matrix_runs[seed]
    out = tmp_path_factory.mktemp("matrix-rerun")
    from dataclasses import replace

    pl.run_matrix(replace(first_cfg, out=str(out)))
    a = pl.Workspace(first_cfg.out)
    b = pl.Workspace(out)
    same = {name: (a.root / name).read_bytes() == (b.root / name).read_bytes()
            for name in ("results.csv", "mask_stats.csv", "pruning.csv")}
    rows = sum(1 for _ in csv.reader((a.results).open())) - 1
    report(10, all(same.values()), f"seed {seed} rerun: " + ", ".join(f"{k} identical={v}" for k, v in same.items())
           + f" ({rows} result rows)")
    assert same["results.csv"]
    assert all(same.values())
