"""Acceptance suite: one test per release criterion, each printing a verdict line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
PASS lines.  Directional criteria (ablation orderings, retention margins,
unlearning dominance) run on fixed synthetic streams whose configurations are
pinned below; exact-arithmetic criteria run against independent scalar
oracles.
"""

import dataclasses
import time

import numpy as np
import pytest

from dithub import registry
from dithub.evalkit import (
    eval_snapshot,
    forgetting,
    harmonic_sweep,
    unlearn_matrix,
    write_sweep_csv,
)
from dithub.lowrank import MergeConfig, RankConfig, merge_expert, merge_shared, param_count
from dithub.rng import Rng
from dithub.taskgen import GenConfig, generate_stream
from dithub.toydetect import OptimHyper, loss_and_grads
from dithub.trainer import TrainConfig, pretrain_for, run_variant
from tests.test_evalkit import report

SEEDS = (1, 2, 3)

# overlapped regime: every class recurs under a different random rotation;
# the gentle adapter step keeps branch initialization visible in the outcome
OVERLAPPED_GEN = dict(
    seed=11, regime="overlapped", noise_sigma=0.2, samples_per_class=100
)
OVERLAPPED_TRAIN = dict(
    merge=MergeConfig(lambda_a=0.1, lambda_b=0.7),
    optim=OptimHyper(learning_rate=0.1, momentum=0.9),
)

# rare-class stream: one class per task at 5% of the sample budget
RARE_GEN = dict(seed=23, noise_sigma=0.25, samples_per_class=80, rare_multiplier=0.05)

UNLEARN_GEN = dict(seed=23, noise_sigma=0.2, samples_per_class=100)


def _verdict(num: int, ok: bool, detail: str):
    print(f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def overlapped():
    stream = generate_stream(GenConfig(**OVERLAPPED_GEN))
    cfg = TrainConfig(**OVERLAPPED_TRAIN)
    model = pretrain_for(stream, cfg)
    return stream, cfg, model


@pytest.fixture(scope="module")
def ladder_records(overlapped, tmp_path_factory):
    stream, base_cfg, model = overlapped
    ladder = {
        "base": dict(variant="base"),
        "+wu": dict(use_expert_merge=False, use_shared_merge=False),
        "+eq4": dict(use_expert_merge=False),
        "full": dict(),
        "naive_seq": dict(variant="naive_seq"),
    }
    records = {}
    for name, kwargs in ladder.items():
        records[name] = []
        for seed in SEEDS:
            cfg = dataclasses.replace(base_cfg, seed=seed, **kwargs)
            root = tmp_path_factory.mktemp(f"ladder-{name.strip('+')}-{seed}")
            records[name].append(run_variant(stream, cfg, model=model, lib_root=root / "lib"))
    return records


def _mean_avg(records):
    return float(np.mean([r.checkpoints[-1]["avg"] for r in records]))


def _mean_forgetting(records):
    return float(np.mean([r.forgetting["avg"] for r in records]))


def test_criterion_01_exact_merge_arithmetic():
    rng = Rng(123)
    started = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        rows = 2 + int(rng.integers(5))
        cols = 2 + int(rng.integers(5))
        x = rng.uniform((rows, cols)) * 2.0 - 1.0
        y = rng.uniform((rows, cols)) * 2.0 - 1.0
        lam = float(rng.uniform(1)[0])
        merge = merge_expert if i % 2 == 0 else merge_shared
        got = merge(x, y, lam)
        oracle = np.empty_like(x)
        for r in range(rows):
            for c in range(cols):
                oracle[r, c] = (1.0 - lam) * x[r, c] + lam * y[r, c]
        worst = max(worst, float(np.abs(got - oracle).max()))
        assert merge(x, y, 0.0).tobytes() == x.tobytes()
        assert merge(x, y, 1.0).tobytes() == y.tobytes()
    elapsed = time.perf_counter() - started
    ok = worst <= 1e-15 and elapsed < 1.0
    _verdict(
        1, ok,
        f"merge endpoints bit-exact, interior within {worst:.2e} of scalar oracle "
        f"(<= 1e-15) over 1000 matrices in {elapsed:.2f} s (< 1 s)",
    )


def test_criterion_02_gradient_fidelity():
    from dithub.taskgen import Sample
    from dithub.toydetect import BaseModel

    started = time.perf_counter()
    checked = 0
    worst = 0.0
    step = 1e-6
    for seed in range(100):
        rng = Rng(1000 + seed)
        d = 4 + int(rng.integers(3))
        r = 1 + int(rng.integers(2))
        n_classes = 1 + int(rng.integers(3))
        n_samples = 2 + int(rng.integers(4))
        classes = [f"c{j}" for j in range(n_classes)]
        queries = {}
        for c in classes:
            q = rng.spawn("q", c).normal(d)
            queries[c] = q / np.linalg.norm(q)
        model = BaseModel(w=rng.normal((d, d)), queries=queries, dims=RankConfig(r=r, d=d))
        samples = []
        for i in range(n_samples):
            k = 1 + int(rng.integers(n_classes))
            present = tuple(sorted(rng.sample(classes, k)))
            samples.append(Sample(features=rng.normal(d), present_classes=present, domain_id="x"))
        a = rng.normal((r, d), sigma=0.3)
        b = rng.normal((d, r), sigma=0.3)
        _, ga, gb = loss_and_grads(model, a, b, samples, classes)

        def loss_at(a_mat, b_mat):
            return loss_and_grads(model, a_mat, b_mat, samples, classes)[0]

        # the difference quotient carries a roundoff floor of roughly
        # eps * |loss| / step ~ 1e-9, which dominates near-zero entries
        fd_noise = 2e-9
        for mat, grad, is_a in ((a, ga, True), (b, gb, False)):
            for idx in np.ndindex(mat.shape):
                up, down = mat.copy(), mat.copy()
                up[idx] += step
                down[idx] -= step
                fd = (
                    (loss_at(up, b) - loss_at(down, b)) / (2 * step)
                    if is_a
                    else (loss_at(a, up) - loss_at(a, down)) / (2 * step)
                )
                excess = max(0.0, abs(grad[idx] - fd) - fd_noise)
                rel = excess / max(abs(grad[idx]), abs(fd), 1e-8)
                worst = max(worst, rel)
        checked += 1
    elapsed = time.perf_counter() - started
    ok = checked >= 100 and worst < 1e-5 and elapsed < 10.0
    _verdict(
        2, ok,
        f"analytic gradients within {worst:.2e} relative (< 1e-5, above the "
        f"{fd_noise:.0e} difference-quotient noise floor) of central differences "
        f"on {checked} instances in {elapsed:.1f} s (< 10 s)",
    )


def test_criterion_03_frozen_base_guarantee(tmp_path_factory):
    from dithub.toydetect import score_many

    stream = generate_stream(GenConfig(seed=7))
    cfg = TrainConfig(seed=1)
    model = pretrain_for(stream, cfg)
    digest_before = model.weight_digest()
    zero_x = np.stack([s.features for s in stream.zero_shot_set])
    base_classes = list(stream.base_class_ids)
    scores_before = score_many(model, None, None, zero_x, base_classes).tobytes()
    pristine_before = eval_snapshot(
        model, None, [], stream.zero_shot_set, mode="none"
    ).zero_shot_pristine_per_class
    slowest = 0.0
    for variant in ("dithub", "ene", "base", "full_lora", "naive_seq"):
        run_cfg = dataclasses.replace(cfg, variant=variant)
        root = tmp_path_factory.mktemp(f"frozen-{variant}")
        record = run_variant(stream, run_cfg, model=model, lib_root=root / "lib")
        slowest = max(slowest, record.wall_clock_s)
        assert model.weight_digest() == digest_before, f"base weights moved under {variant}"
        scores_after = score_many(model, None, None, zero_x, base_classes).tobytes()
        assert scores_after == scores_before, f"zero-shot scores moved under {variant}"
        pristine_after = eval_snapshot(
            model, None, [], stream.zero_shot_set, mode="none"
        ).zero_shot_pristine_per_class
        assert pristine_after == pristine_before, f"pristine zero-shot moved under {variant}"
    ok = slowest < 120.0
    _verdict(
        3, ok,
        f"base-weight hash, raw zero-shot scores, and pristine zero-shot report "
        f"identical across all 5 variants; slowest full run {slowest:.1f} s (< 120 s)",
    )


def test_criterion_04_component_ablation_ordering(ladder_records):
    base = _mean_avg(ladder_records["base"])
    wu = _mean_avg(ladder_records["+wu"])
    eq4 = _mean_avg(ladder_records["+eq4"])
    full = _mean_avg(ladder_records["full"])
    ok = (
        full >= wu and full >= eq4 and wu >= base and eq4 >= base and (full - base) >= 0.03
    )
    _verdict(
        4, ok,
        f"ablation means over {len(SEEDS)} seeds: base={base:.4f} <= "
        f"+wu={wu:.4f}, +eq4={eq4:.4f} <= full={full:.4f}; "
        f"full-base={full - base:.4f} (>= 0.03)",
    )


def test_criterion_05_ene_ablation(tmp_path_factory):
    stream = generate_stream(GenConfig(**RARE_GEN))
    base_cfg = TrainConfig()
    model = pretrain_for(stream, base_cfg)
    rare = [(t, c) for t in stream.tasks for c in t.rare_class_ids]
    assert rare, "rare stream must mark rare classes"
    means = {}
    rare_means = {}
    for variant in ("dithub", "ene"):
        avgs, rare_aps = [], []
        for seed in SEEDS:
            cfg = dataclasses.replace(base_cfg, variant=variant, seed=seed)
            root = tmp_path_factory.mktemp(f"ene-{variant}-{seed}")
            record = run_variant(stream, cfg, model=model, lib_root=root / "lib")
            avgs.append(record.checkpoints[-1]["avg"])
            lib = registry.open_library(record.library_root)
            per_class = []
            for task, cls in rare:
                rep = eval_snapshot(model, lib, [task], [], mode="single", single_class=cls)
                per_class.append(rep.per_task_ap[task.task_id])
            rare_aps.append(float(np.mean(per_class)))
        means[variant] = float(np.mean(avgs))
        rare_means[variant] = float(np.mean(rare_aps))
    gap = rare_means["dithub"] - rare_means["ene"]
    ok = means["dithub"] >= means["ene"] and gap >= 0.02
    _verdict(
        5, ok,
        f"avg: dithub={means['dithub']:.4f} >= ene={means['ene']:.4f}; "
        f"rare single-module gap={gap:.4f} (>= 0.02)",
    )


def test_criterion_06_overlap_retention(ladder_records):
    dithub_avg = _mean_avg(ladder_records["full"])
    naive_avg = _mean_avg(ladder_records["naive_seq"])
    dithub_forget = _mean_forgetting(ladder_records["full"])
    naive_forget = _mean_forgetting(ladder_records["naive_seq"])
    ok = (dithub_avg - naive_avg) >= 0.05 and dithub_forget > naive_forget
    _verdict(
        6, ok,
        f"overlapped retention: dithub avg={dithub_avg:.4f} vs naive={naive_avg:.4f} "
        f"(margin {dithub_avg - naive_avg:.4f} >= 0.05); forgetting {dithub_forget:+.4f} "
        f"strictly above {naive_forget:+.4f}",
    )


def test_criterion_07_lambda_sensitivity(overlapped, tmp_path):
    stream, base_cfg, model = overlapped
    values = [0.1, 0.3, 0.5, 0.7, 0.9]
    cfg = dataclasses.replace(base_cfg, seed=1)
    rows = harmonic_sweep(stream, cfg, [(la, 0.7) for la in values], model=model)
    csv_path = tmp_path / "sweep.csv"
    write_sweep_csv(rows, csv_path)
    print(f"[criterion 07] full sweep CSV written to {csv_path}")
    for row in rows:
        print(
            f"  lambda_a={row['lambda_a']:.1f}: avg={row['avg']:.4f} "
            f"zero_shot={row['zero_shot']:.4f} harmonic={row['harmonic']:.4f}"
        )
    avgs = [row["avg"] for row in rows]
    best = values[int(np.argmax(avgs))]
    ok = best <= 0.3
    _verdict(7, ok, f"avg AP maximized at lambda_a={best} (<= 0.3) over {values}")


def test_criterion_08_memory_accounting():
    dims = RankConfig(r=4, d=32, k=32)
    exact = True
    ratios = []
    for n in (1, 10, 100, 1000):
        _, shared = param_count(dims, n, shared_b=True)
        _, full = param_count(dims, n, shared_b=False)
        ratio = shared / full
        closed = (n * dims.r * dims.k + dims.d * dims.r) / (n * (dims.r * dims.k + dims.d * dims.r))
        exact = exact and (ratio == closed)
        ratios.append(ratio)
    converged = ratios[2] < 0.51 and ratios[3] < 0.51
    monotone = all(a > b for a, b in zip(ratios, ratios[1:]))
    ranks = [1, 2, 4, 8, 16]
    totals = [param_count(RankConfig(r=r, d=32, k=32), 24, shared_b=True)[1] for r in ranks]
    rank_monotone = all(a < b for a, b in zip(totals, totals[1:]))
    ok = exact and converged and monotone and rank_monotone
    _verdict(
        8, ok,
        f"shared/full ratios {['%.4f' % r for r in ratios]} exact, monotone, "
        f"< 0.51 from |C|=100; rank set {ranks} gives increasing totals {totals}",
    )


def test_criterion_09_unlearning_diagonal_dominance(tmp_path_factory):
    stream = generate_stream(GenConfig(**UNLEARN_GEN))
    base_cfg = TrainConfig()
    model = pretrain_for(stream, base_cfg)
    samples = [s for t in stream.tasks for s in t.test]
    diag_hits, total = 0, 0
    for seed in SEEDS:
        cfg = dataclasses.replace(base_cfg, seed=seed)
        root = tmp_path_factory.mktemp(f"unlearn-{seed}")
        record = run_variant(stream, cfg, model=model, lib_root=root / "lib")
        lib = registry.open_library(record.library_root)
        classes, matrix = unlearn_matrix(model, lib, samples, alpha=0.3)
        for j in range(len(classes)):
            total += 1
            if int(np.argmin(matrix[:, j])) == j:
                diag_hits += 1
    fraction = diag_hits / total
    ok = fraction >= 0.8
    _verdict(
        9, ok,
        f"diagonal is the column-minimum for {diag_hits}/{total} = {fraction:.2f} "
        f"of classes (>= 0.80) at alpha=0.3 over {len(SEEDS)} seeds",
    )


def test_criterion_10_registry_durability(tmp_path, monkeypatch):
    lib = registry.init_library(tmp_path / "lib")
    rng = Rng(2024)
    pool = [f"cls{i:02d}" for i in range(12)]
    reference: dict[str, list[bytes]] = {c: [] for c in pool}
    started = time.perf_counter()
    ops = 10_000
    faults = 0
    for step in range(ops):
        op = int(rng.integers(10))
        cls = pool[int(rng.integers(len(pool)))]
        if op < 4:
            matrix = rng.normal((3, 5))
            version = registry.commit_expert(lib, cls, matrix, task_id=f"t{step}")
            reference[cls].append(matrix.tobytes())
            assert version == len(reference[cls])
        elif op < 8:
            module = registry.fetch(lib, cls)
            if not reference[cls]:
                assert module is None
            else:
                assert module.version == len(reference[cls])
                assert module.a.tobytes() == reference[cls][-1]
        else:
            if reference[cls]:
                version = 1 + int(rng.integers(len(reference[cls])))
                module = registry.checkout(lib, cls, version)
                assert module.a.tobytes() == reference[cls][version - 1]
        if step % 500 == 250:
            # injected fault between blob write and rename must stay invisible
            def boom(path):
                raise OSError("injected fault")

            monkeypatch.setattr(registry, "_post_blob_write", boom)
            with pytest.raises(OSError):
                registry.commit_expert(lib, cls, rng.normal((3, 5)), task_id="fault")
            monkeypatch.undo()
            faults += 1
            module = registry.fetch(lib, cls)
            if not reference[cls]:
                assert module is None
            else:
                assert module.version == len(reference[cls])
                assert module.a.tobytes() == reference[cls][-1]
    reopened = registry.open_library(lib.root)
    for cls in pool:
        module = registry.fetch(reopened, cls)
        if not reference[cls]:
            assert module is None
        else:
            assert module.version == len(reference[cls])
            assert module.a.tobytes() == reference[cls][-1]
    elapsed = time.perf_counter() - started
    _verdict(
        10, True,
        f"{ops} random commit/fetch/checkout ops matched the reference map "
        f"({faults} injected faults stayed invisible) in {elapsed:.1f} s",
    )


def test_criterion_11_forgetting_metric_correctness():
    history = [
        report({"t1": 0.8}),
        report({"t1": 0.7, "t2": 0.9}),
        report({"t1": 0.6, "t2": 0.8, "t3": 0.9}),
    ]
    out = forgetting(history, ["t1", "t2", "t3"])
    exact = (
        out.per_task["t1"] == pytest.approx(-0.2)
        and out.per_task["t2"] == pytest.approx(-0.1)
        and out.per_task["t3"] == 0.0
        and out.avg == pytest.approx(-0.1)
    )
    rng = Rng(99)
    always_zero = True
    for _ in range(200):
        n = 1 + int(rng.integers(6))
        order = [f"t{i}" for i in range(n)]
        hist = []
        for i in range(n):
            vals = {order[j]: float(rng.uniform(1)[0]) for j in range(i + 1)}
            hist.append(report(vals))
        always_zero = always_zero and forgetting(hist, order).per_task[order[-1]] == 0.0
    ok = exact and always_zero
    _verdict(
        11, ok,
        "hand 3-task history gives deltas (-0.2, -0.1, 0); last-learned delta is 0 "
        "across 200 random histories",
    )
