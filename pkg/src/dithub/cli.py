"""Command-line front end: a VCS-flavored module library plus experiment runner.

Subcommands: init, gen, train, modules, log, fetch, checkout, infer, unlearn,
bench.  Exit codes: 0 success, 1 runtime failure, 2 argument/validation
failure.  Human-readable text goes to stdout; machine artifacts (streams,
reports, CSV tables) only ever go to files.

Configuration is one JSON document with ``gen`` and ``train`` sections whose
keys mirror the GenConfig/TrainConfig fields; ``--set section.key=value``
overrides dotted keys (values parsed as JSON, falling back to strings).  The
``DITHUB_LIB`` environment variable supplies a default library root.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from dithub import evalkit, registry, trainer
from dithub.lowrank import MergeConfig
from dithub.taskgen import (
    GenConfig,
    fewshot_subsample,
    generate_stream,
    stream_digest,
    stream_from_jsonl,
    stream_to_jsonl,
)
from dithub.toydetect import OptimHyper
from dithub.trainer import TrainConfig, run_variant


class UsageError(Exception):
    """Bad arguments or config keys; maps to exit code 2."""


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    drawn = int.from_bytes(os.urandom(8), "little") & ((1 << 63) - 1)
    print(f"seed: {drawn}")
    return drawn


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def _apply_sets(doc: dict, assignments: list[str]) -> dict:
    for item in assignments:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = doc
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise UsageError(f"cannot descend into {dotted!r}: {key} is not an object")
        node[keys[-1]] = _parse_value(raw)
    return doc


def _dataclass_from(cls, raw: dict, label: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown {label} keys: {sorted(unknown)} (known: {sorted(known)})")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad {label} config: {exc}") from exc


def _gen_config(doc: dict, seed: int | None, regime: str | None) -> GenConfig:
    raw = dict(doc.get("gen", {}))
    if seed is not None:
        raw["seed"] = seed
    if regime is not None:
        raw["regime"] = regime
    return _dataclass_from(GenConfig, raw, "gen")


def _train_config(doc: dict, seed: int | None, variant: str | None) -> TrainConfig:
    raw = dict(doc.get("train", {}))
    if "merge" in raw and isinstance(raw["merge"], dict):
        raw["merge"] = _dataclass_from(MergeConfig, raw["merge"], "train.merge")
    if "optim" in raw and isinstance(raw["optim"], dict):
        raw["optim"] = _dataclass_from(OptimHyper, raw["optim"], "train.optim")
    if seed is not None:
        raw["seed"] = seed
    if variant is not None:
        raw["variant"] = variant
    return _dataclass_from(TrainConfig, raw, "train")


def _lib_root(args) -> str:
    root = getattr(args, "lib", None) or os.environ.get("DITHUB_LIB")
    if not root:
        raise UsageError("no library root: pass --lib or set DITHUB_LIB")
    return root


def _union_test_samples(stream):
    samples = []
    for task in stream.tasks:
        samples.extend(task.test)
    return samples


def cmd_init(args) -> int:
    lib = registry.init_library(args.path)
    print(f"initialized empty module library at {lib.root}")
    return 0


def cmd_gen(args) -> int:
    doc = _apply_sets(_load_config(args.config), args.set)
    cfg = _gen_config(doc, _resolve_seed(args.seed), args.regime)
    stream = generate_stream(cfg)
    if args.fewshot is not None:
        stream.tasks = [fewshot_subsample(t, args.fewshot, cfg.seed) for t in stream.tasks]
    stream_to_jsonl(stream, args.out)
    digest = stream_digest(stream)
    print(f"wrote {args.out}")
    print(f"regime: {digest['regime']}, tasks: {len(stream.tasks)}")
    for task_id, info in digest["per_task"].items():
        print(
            f"  {task_id}: {len(info['classes'])} classes, "
            f"{info['train_samples']} train / {info['test_samples']} test"
        )
    return 0


def cmd_train(args) -> int:
    doc = _apply_sets(_load_config(args.config), args.set)
    cfg = _train_config(doc, _resolve_seed(args.seed), args.variant)
    stream = stream_from_jsonl(args.stream)
    lib_root = None
    if cfg.variant != "naive_seq":
        lib_root = _lib_root(args)
    record = run_variant(stream, cfg, lib_root=lib_root)
    if args.report:
        Path(args.report).write_text(
            json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    final = record.checkpoints[-1]
    print(f"variant {cfg.variant}, seed {cfg.seed}: trained {len(record.learn_order)} tasks")
    print(f"final avg AP: {final['avg']:.4f}  zero-shot AP: {final['zero_shot']:.4f}")
    if args.report:
        print(f"report written to {args.report}")
    return 0


def cmd_modules(args) -> int:
    lib = registry.open_library(_lib_root(args))
    if not lib.manifest:
        print("library is empty")
        return 0
    print(f"{'class':<20} {'latest':>7} {'commits':>8}")
    commits = {}
    for record in lib.records:
        if record.kind == registry.KIND_EXPERT:
            commits[record.class_id] = commits.get(record.class_id, 0) + 1
    for class_id in sorted(lib.manifest):
        print(f"{class_id:<20} {lib.manifest[class_id]:>7} {commits.get(class_id, 0):>8}")
    return 0


def cmd_log(args) -> int:
    lib = registry.open_library(_lib_root(args))
    records = registry.log(lib, getattr(args, "class_id", None))
    print(f"{'seq':>5} {'kind':<8} {'class':<20} {'task':<10} {'ver':>4} {'lambda':>7}  hash")
    for r in records:
        lam = f"{r.lambda_used:.3f}" if r.lambda_used is not None else "-"
        print(
            f"{r.seq:>5} {r.kind:<8} {r.class_id or '-':<20} {r.task_id:<10} "
            f"{r.version:>4} {lam:>7}  {r.content_hash:016x}"
        )
    return 0


def cmd_fetch(args) -> int:
    lib = registry.open_library(_lib_root(args))
    module = registry.fetch(lib, args.class_id)
    if module is None:
        print(f"class {args.class_id!r}: absent")
        return 0
    print(f"class {module.class_id}: version {module.version}, task {module.task_id}")
    print(f"shape {module.a.shape}, frobenius norm {np.linalg.norm(module.a):.6f}")
    return 0


def cmd_checkout(args) -> int:
    lib = registry.open_library(_lib_root(args))
    module = registry.checkout(lib, args.class_id, args.version)
    print(f"class {module.class_id}: version {module.version}, task {module.task_id}")
    print(f"shape {module.a.shape}, frobenius norm {np.linalg.norm(module.a):.6f}")
    if args.out:
        Path(args.out).write_bytes(registry.encode_matrix(module.a))
        print(f"blob written to {args.out}")
    return 0


def cmd_infer(args) -> int:
    stream = stream_from_jsonl(args.stream)
    lib = registry.open_library(_lib_root(args))
    cfg = TrainConfig()
    model = trainer.pretrain_for(stream, cfg)
    prompt = [c.strip() for c in args.classes.split(",") if c.strip()]
    if not prompt:
        raise UsageError("--classes needs at least one class id")
    samples = _union_test_samples(stream)
    if args.mode == "single":
        if len(prompt) != 1:
            raise UsageError("mode 'single' takes exactly one class")
        wp, _ = evalkit.composite_weight(model, lib, prompt, paired_b=False)
    elif args.mode == "none":
        wp = model.w
    else:
        wp, _ = evalkit.composite_weight(model, lib, prompt, paired_b=False)
    aps = evalkit.class_aps(model, wp, samples, prompt)
    print(f"{'class':<20} {'AP':>8}")
    for c in prompt:
        value = f"{aps[c]:.4f}" if c in aps else "n/a"
        print(f"{c:<20} {value:>8}")
    return 0


def cmd_unlearn(args) -> int:
    stream = stream_from_jsonl(args.stream)
    lib = registry.open_library(_lib_root(args))
    model = trainer.pretrain_for(stream, TrainConfig())
    samples = _union_test_samples(stream)
    row = evalkit.unlearn_row(model, lib, samples, args.class_id, args.alpha)
    print(f"AP change per class after subtracting {args.class_id!r} (alpha={args.alpha}):")
    print(f"{'class':<20} {'delta AP':>10}")
    for c in sorted(row):
        print(f"{c:<20} {row[c]:>+10.4f}")
    return 0


def _bench_stream(regime: str, seed: int, **overrides) -> GenConfig:
    raw = {
        "regime": regime,
        "seed": seed,
        "samples_per_class": 100,
        "num_tasks": 6,
    }
    raw.update(overrides)
    return GenConfig(**raw)


def _write_rows(path: Path, header: list[str], rows: list[dict]):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in header})


def cmd_bench(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = _resolve_seed(args.seed)
    suite = args.suite
    seeds = [seed, seed + 1, seed + 2]

    if suite == "ablation":
        cfg_gen = _bench_stream("overlapped", seed)
        stream = generate_stream(cfg_gen)
        base_cfg = TrainConfig(merge=MergeConfig(lambda_a=0.1, lambda_b=0.7))
        model = trainer.pretrain_for(stream, base_cfg)
        ladder = [
            ("base", dict(variant="base")),
            ("+wu", dict(use_expert_merge=False, use_shared_merge=False)),
            ("+eq4", dict(use_expert_merge=False)),
            ("full", dict()),
        ]
        rows = []
        for name, kwargs in ladder:
            for s in seeds:
                cfg = dataclasses.replace(base_cfg, seed=s, **kwargs)
                root = out / "work" / f"ablation-{name.strip('+')}-{s}"
                record = run_variant(stream, cfg, model=model, lib_root=root)
                final = record.checkpoints[-1]
                rows.append(
                    {"config": name, "seed": s, "avg": final["avg"], "zero_shot": final["zero_shot"]}
                )
        _write_rows(out / "ablation.csv", ["config", "seed", "avg", "zero_shot"], rows)
        print(f"wrote {out / 'ablation.csv'}")
    elif suite == "ene":
        cfg_gen = _bench_stream("disjoint_like", seed)
        stream = generate_stream(cfg_gen)
        base_cfg = TrainConfig()
        model = trainer.pretrain_for(stream, base_cfg)
        rows = []
        for variant in ("dithub", "ene"):
            for s in seeds:
                cfg = dataclasses.replace(base_cfg, variant=variant, seed=s)
                root = out / "work" / f"ene-{variant}-{s}"
                record = run_variant(stream, cfg, model=model, lib_root=root)
                final = record.checkpoints[-1]
                rows.append(
                    {"variant": variant, "seed": s, "avg": final["avg"], "zero_shot": final["zero_shot"]}
                )
        _write_rows(out / "ene.csv", ["variant", "seed", "avg", "zero_shot"], rows)
        print(f"wrote {out / 'ene.csv'}")
    elif suite == "lambda-sweep":
        cfg_gen = _bench_stream("overlapped", seed)
        stream = generate_stream(cfg_gen)
        base_cfg = TrainConfig(seed=seed)
        values = [0.1, 0.3, 0.5, 0.7, 0.9]
        grid = [(la, lb) for la in values for lb in values]
        rows = evalkit.harmonic_sweep(stream, base_cfg, grid, work_dir=out / "work")
        evalkit.write_sweep_csv(rows, out / "sweep.csv")
        print(f"wrote {out / 'sweep.csv'}")
    elif suite == "rank-sweep":
        cfg_gen = _bench_stream("disjoint_like", seed)
        stream = generate_stream(cfg_gen)
        base_cfg = TrainConfig(seed=seed)
        rows = evalkit.rank_sweep(stream, base_cfg, [1, 2, 4, 8, 16], work_dir=out / "work")
        _write_rows(out / "rank_sweep.csv", ["rank", "param_count", "avg", "zero_shot"], rows)
        print(f"wrote {out / 'rank_sweep.csv'}")
    elif suite == "overlap":
        cfg_gen = _bench_stream("overlapped", seed)
        stream = generate_stream(cfg_gen)
        base_cfg = TrainConfig(merge=MergeConfig(lambda_a=0.1, lambda_b=0.7))
        model = trainer.pretrain_for(stream, base_cfg)
        rows = []
        for variant in ("dithub", "naive_seq"):
            for s in seeds:
                cfg = dataclasses.replace(base_cfg, variant=variant, seed=s)
                root = out / "work" / f"overlap-{variant}-{s}"
                record = run_variant(stream, cfg, model=model, lib_root=root)
                final = record.checkpoints[-1]
                rows.append(
                    {
                        "variant": variant,
                        "seed": s,
                        "avg": final["avg"],
                        "zero_shot": final["zero_shot"],
                        "forgetting": record.forgetting["avg"],
                    }
                )
        _write_rows(out / "overlap.csv", ["variant", "seed", "avg", "zero_shot", "forgetting"], rows)
        print(f"wrote {out / 'overlap.csv'}")
    elif suite == "fewshot":
        cfg_gen = _bench_stream("disjoint_like", seed)
        base_stream = generate_stream(cfg_gen)
        base_cfg = TrainConfig(seed=seed)
        model = trainer.pretrain_for(base_stream, base_cfg)
        rows = []
        for shots in (1, 5, 10, None):
            stream = generate_stream(cfg_gen)
            if shots is not None:
                stream.tasks = [fewshot_subsample(t, shots, seed) for t in stream.tasks]
            root = out / "work" / f"fewshot-{shots or 'full'}"
            record = run_variant(stream, base_cfg, model=model, lib_root=root)
            final = record.checkpoints[-1]
            rows.append(
                {
                    "shots": shots if shots is not None else "full",
                    "avg": final["avg"],
                    "zero_shot": final["zero_shot"],
                }
            )
        _write_rows(out / "fewshot.csv", ["shots", "avg", "zero_shot"], rows)
        print(f"wrote {out / 'fewshot.csv'}")
    elif suite == "unlearn-heatmap":
        cfg_gen = _bench_stream("disjoint_like", seed)
        stream = generate_stream(cfg_gen)
        base_cfg = TrainConfig(seed=seed)
        model = trainer.pretrain_for(stream, base_cfg)
        record = run_variant(stream, base_cfg, model=model, lib_root=out / "work" / "unlearn")
        lib = registry.open_library(record.library_root)
        classes, matrix = evalkit.unlearn_matrix(
            model, lib, _union_test_samples(stream), alpha=args.alpha
        )
        with open(out / "unlearn_heatmap.csv", "w", encoding="utf-8") as fh:
            fh.write("removed," + ",".join(classes) + "\n")
            for i, removed in enumerate(classes):
                fh.write(removed + "," + ",".join(f"{v:.6f}" for v in matrix[i]) + "\n")
        print(f"wrote {out / 'unlearn_heatmap.csv'}")
    else:
        raise UsageError(f"unknown bench suite {suite!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dithub",
        description="Versioned library of class-specific low-rank adapters with an experiment runner.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create an empty module library")
    p.add_argument("path")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("gen", help="generate a synthetic task stream")
    p.add_argument("--config", help="JSON config file with a 'gen' section")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--regime", choices=["disjoint_like", "overlapped"])
    p.add_argument("--fewshot", type=int, help="subsample each task to k shots per class")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run the incremental pipeline on a stream")
    p.add_argument("--stream", required=True, help="stream JSONL from 'gen'")
    p.add_argument("--lib", help="library root (default: DITHUB_LIB)")
    p.add_argument("--variant", choices=list(trainer.VARIANTS))
    p.add_argument("--config", help="JSON config file with a 'train' section")
    p.add_argument("--report", help="write the run record JSON here")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("modules", help="list classes and latest versions")
    p.add_argument("--lib")
    p.set_defaults(func=cmd_modules)

    p = sub.add_parser("log", help="show the commit log")
    p.add_argument("--lib")
    p.add_argument("--class", dest="class_id")
    p.set_defaults(func=cmd_log)

    p = sub.add_parser("fetch", help="show the latest module for a class")
    p.add_argument("class_id")
    p.add_argument("--lib")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("checkout", help="inspect a historical module version")
    p.add_argument("class_id")
    p.add_argument("version", type=int)
    p.add_argument("--lib")
    p.add_argument("--out", help="also write the blob to this path")
    p.set_defaults(func=cmd_checkout)

    p = sub.add_parser("infer", help="per-class AP for a prompt against a trained library")
    p.add_argument("--stream", required=True)
    p.add_argument("--lib")
    p.add_argument("--classes", required=True, help="comma-separated prompt classes")
    p.add_argument("--mode", choices=["composed", "single", "none"], default="composed")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("unlearn", help="AP impact of subtracting one class module")
    p.add_argument("--stream", required=True)
    p.add_argument("--lib")
    p.add_argument("--class", dest="class_id", required=True)
    p.add_argument("--alpha", type=float, default=0.3)
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("bench", help="run a canned experiment suite")
    p.add_argument(
        "--suite",
        required=True,
        choices=[
            "ablation",
            "ene",
            "lambda-sweep",
            "rank-sweep",
            "overlap",
            "fewshot",
            "unlearn-heatmap",
        ],
    )
    p.add_argument("--out", required=True, help="output directory (only writes happen here)")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float, default=0.3)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (
        registry.RegistryError,
        ValueError,
        KeyError,
        FileNotFoundError,
        FileExistsError,
        RuntimeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
