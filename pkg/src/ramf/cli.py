"""Command-line driver: run, ablate, gen-data, verify.

Exit codes: 0 success, 1 verification failure, 2 bad config or missing input,
3 training diverged.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import io
import json
import logging
import os
import re
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import metrics as mt
from .data import LabeledDataset, generate_synthetic, load_cache, load_idx, save_cache, split_incremental
from .trainer import ABLATION_VARIANTS, ExperimentResult, TrainingDiverged, run_experiment, train_initial

log = logging.getLogger("ramf")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
RUN_ARTIFACTS = ("acc_matrix.csv", "summary.json", "confusion.csv", "curves.csv", "features.csv", "config.json")


# ---------------------------------------------------------------------------
# file output


def write_atomic(path: Path, text: str) -> None:
    """Write via a temporary sibling and rename, so the file is complete or absent."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_all(out_dir: Path, files: dict[str, str]) -> None:
    for name, text in files.items():
        write_atomic(out_dir / name, text)


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _pct(x: float | None):
    return None if x is None else mt.quantize(100.0 * x)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# data


def load_data(dc: cfgmod.DataConfig) -> tuple[LabeledDataset, LabeledDataset]:
    if dc.source == "synthetic":
        return (
            generate_synthetic(dc.classes, dc.per_class, dc.size, dc.size, dc.train_seed),
            generate_synthetic(dc.classes, dc.test_per_class, dc.size, dc.size, dc.test_seed),
        )
    paths = (
        (dc.train_images, dc.train_labels, dc.test_images, dc.test_labels) if dc.source == "idx" else (dc.train, dc.test)
    )
    for p in paths:
        if not Path(p).is_file():
            raise FileNotFoundError(f"dataset file not found: {p}")
    try:
        if dc.source == "idx":
            return load_idx(dc.train_images, dc.train_labels), load_idx(dc.test_images, dc.test_labels)
        return load_cache(dc.train), load_cache(dc.test)
    except ValueError as exc:
        raise cfgmod.ConfigError(f"unreadable dataset: {exc}") from exc


# ---------------------------------------------------------------------------
# reports


def summarize(cfg: cfgmod.ExperimentConfig, result: ExperimentResult, image_shape) -> dict:
    m = result.matrix
    stages = []
    for t in range(1, m.num_tasks + 1):
        stages.append(
            {
                "stage": t,
                "overall_accuracy": _pct(m.overall[t - 1]),
                "A_t": _pct(mt.average_accuracy(m, t)),
                "F_t": _pct(mt.average_forgetting(m, t)) if t > 1 else None,
                "I_t": _pct(mt.average_intransigence(m, result.reference, t)) if result.reference else None,
            }
        )
    classes = len(result.state.seen)
    return {
        "method": cfg.method,
        "seed": cfg.seed,
        "units": "percent",
        "stages": stages,
        "incremental_average": _pct(mt.incremental_average(m.overall)),
        "reference_accuracies": None if result.reference is None else [_pct(r) for r in result.reference],
        "memory_report": mt.memory_report(classes, result.state.extractor.dim, image_shape=tuple(image_shape)),
        "forgetting_convention": mt.FORGETTING_CONVENTION,
        "intransigence_reference": mt.INTRANSIGENCE_REFERENCE,
    }


def features_csv(result: ExperimentResult) -> str:
    d = result.evals[0].features.shape[1]
    rows = [["stage", "class"] + [f"f{j}" for j in range(d)]]
    for t, ev in enumerate(result.evals, start=1):
        for y, f in zip(ev.labels, ev.features):
            rows.append([t, int(y)] + [mt.fmt(v) for v in f])
    return _csv(rows)


def run_artifacts(cfg: cfgmod.ExperimentConfig, result: ExperimentResult, image_shape) -> dict[str, str]:
    m = result.matrix
    seen = result.split.seen(m.num_tasks - 1)
    echo = cfg.to_dict()
    echo["resolved"] = {"seed": cfg.seed, "split_seed": cfg.split_seed, "toggles": dataclasses.asdict(cfg.resolved_toggles())}
    return {
        "acc_matrix.csv": m.to_csv(),
        "summary.json": _json(summarize(cfg, result, image_shape)),
        "confusion.csv": _csv([seen] + result.confusion.tolist()),
        "curves.csv": _csv([["stage", "overall_accuracy_percent"]] + [[t, mt.fmt(100 * o)] for t, o in enumerate(m.overall, 1)]),
        "features.csv": features_csv(result),
        "config.json": _json(echo),
    }


def _split(cfg: cfgmod.ExperimentConfig, train: LabeledDataset, seed: int):
    s = cfg.split
    return split_incremental(train.class_count, s.initial, s.stages, s.per_stage, seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    cfg = cfgmod.load(args.config, overrides)
    train, test = load_data(cfg.data)
    split = _split(cfg, train, cfg.split_seed)
    t0 = time.perf_counter()
    result = run_experiment(cfg.method_config(), train, test, split, cfg.seed, with_reference=cfg.reference)
    log.info("run finished in %.1fs", time.perf_counter() - t0)
    out = Path(cfg.output_dir)
    write_all(out, run_artifacts(cfg, result, train.images.shape[1:]))
    m = result.matrix
    print(
        f"{cfg.method} seed {cfg.seed}: final A={100 * mt.average_accuracy(m, m.num_tasks):.2f}% "
        f"F={100 * mt.average_forgetting(m, m.num_tasks):.2f}% "
        f"incremental average={100 * mt.incremental_average(m.overall):.2f}% -> {out}"
    )
    return EXIT_OK


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_").lower() or "variant"


def ablation_grid(cfg: cfgmod.ExperimentConfig, train, test, seeds) -> dict[str, dict[int, ExperimentResult]]:
    """Every ablation variant under every seed.

    Variants whose toggles agree on everything the initial stage uses start from
    one shared initial-stage model.
    """
    results: dict[str, dict[int, ExperimentResult]] = {name: {} for name in ABLATION_VARIANTS}
    for seed in seeds:
        split = _split(cfg, train, seed if cfg.split.seed is None else cfg.split.seed)
        cache = {}
        for name, toggles in ABLATION_VARIANTS.items():
            mc = cfg.method_config(toggles)
            key = (toggles.base_aug, toggles.aux_aug, toggles.cosine_mode)
            if key not in cache:
                cache[key] = train_initial(mc, train.subset(split.stage_classes[0]), seed, split.stage_classes[0])
            state = copy.deepcopy(cache[key])
            results[name][seed] = run_experiment(mc, train, test, split, seed, with_reference=False, initial_state=state)
            m = results[name][seed].matrix
            log.info("%s seed %d: F=%.4f", name, seed, mt.average_forgetting(m, m.num_tasks))
    return results


def ablation_table(results, seeds) -> str:
    rows = [
        ["variant", "incremental_average_percent", "final_forgetting_percent"]
        + [f"forgetting_seed_{s}_percent" for s in seeds]
    ]
    for name, per_seed in results.items():
        inc = [mt.incremental_average(per_seed[s].matrix.overall) for s in seeds]
        fgt = [mt.average_forgetting(per_seed[s].matrix, per_seed[s].matrix.num_tasks) for s in seeds]
        rows.append([name, mt.fmt(100 * np.mean(inc)), mt.fmt(100 * np.mean(fgt))] + [mt.fmt(100 * f) for f in fgt])
    return _csv(rows)


def cmd_ablate(args) -> int:
    cfg = cfgmod.load(args.config, list(args.set or []))
    train, test = load_data(cfg.data)
    seeds = list(cfg.ablation_seeds) or [cfg.seed]
    results = ablation_grid(cfg, train, test, seeds)
    files = {"ablation.csv": ablation_table(results, seeds)}
    for name, per_seed in results.items():
        for s, r in per_seed.items():
            files[f"{_slug(name)}/seed_{s}/acc_matrix.csv"] = r.matrix.to_csv()
    write_all(Path(cfg.output_dir), files)
    print(files["ablation.csv"], end="")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.classes < 2 or args.per_class < 1 or args.size < 8 or args.size % 8:
        raise cfgmod.ConfigError("need --classes >= 2, --per-class >= 1 and --size a positive multiple of 8")
    ds = generate_synthetic(args.classes, args.per_class, args.size, args.size, args.seed)
    save_cache(args.out, ds)
    print(f"wrote {len(ds)} images ({args.classes} classes, {args.size}x{args.size}) to {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    t0 = time.perf_counter()
    results = verify.run_all()
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:36s} {r.detail}  ({r.seconds:.2f}s)")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        print("failing: " + ", ".join(r.name for r in failed))
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ramf", description="Non-exemplar class-incremental learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-stage progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="dot-path override, repeatable")
    r.set_defaults(fn=cmd_run)

    a = sub.add_parser("ablate", help="run the five module-ablation variants")
    a.add_argument("--config", required=True)
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.set_defaults(fn=cmd_ablate)

    g = sub.add_parser("gen-data", help="write a synthetic dataset cache file")
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--per-class", type=int, required=True)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    v = sub.add_parser("verify", help="gradient, augmentation, label and metric self-checks")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except cfgmod.ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
