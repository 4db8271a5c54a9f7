"""The espctl command line: data generation, training, evaluation, and the
profile/ablation table writers."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .pipeline import (
    AblationRow,
    ProfileRow,
    ablate,
    evaluate,
    gradcheck_pipeline,
    load_config,
    load_trained,
    profile,
    train,
)
from .pointcloud import (
    OCCLUSION_PRESETS,
    LabeledDataset,
    apply_occlusion,
    load_dataset,
    load_splits,
    synth_generate,
    write_dataset,
)
from .validation import DataError, NumericError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _spawn_seeds(seed: int, count: int) -> list[int]:
    return [int(child.generate_state(1)[0])
            for child in np.random.SeedSequence(seed).spawn(count)]


def _cmd_gen_data(args) -> int:
    config = load_config(args.config)
    seeds = _spawn_seeds(args.seed, 3)
    holdout = max(1, config.synth.sequences_per_class // 4)
    out = Path(args.out)
    for name, count, seed in (("train", config.synth.sequences_per_class,
                               seeds[0]),
                              ("val", holdout, seeds[1]),
                              ("test", holdout, seeds[2])):
        synth = replace(config.synth, sequences_per_class=count, seed=seed)
        write_dataset(synth_generate(synth, split=name), out / name)
        print(f"{name}: {count * synth.classes} sequences")
    return EXIT_OK


def _cmd_occlude(args) -> int:
    model = OCCLUSION_PRESETS[args.preset]
    splits = load_splits(args.inp, required=())
    if not splits:
        raise DataError(f"no split directories under {args.inp}")
    root = np.random.SeedSequence(args.seed)
    out = Path(args.out)
    for name, ds in splits.items():
        children = root.spawn(len(ds.sequences))
        occluded = [
            apply_occlusion(seq, model, int(child.generate_state(1)[0]))
            for seq, child in zip(ds.sequences, children)]
        write_dataset(LabeledDataset(occluded, ds.class_names, split=name),
                      out / name)
        print(f"{name}: occluded {len(occluded)} sequences ({args.preset})")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = load_config(args.config)
    splits = load_splits(args.data)
    trained, metrics = train(config, splits)
    trained.save(args.out)
    if args.metrics:
        Path(args.metrics).write_text(
            json.dumps(metrics.to_json(), indent=2) + "\n", encoding="utf-8")
    print(f"best val loss {trained.best_val_loss:.6f} at epoch "
          f"{trained.best_epoch}; stopped after epoch {trained.stopped_epoch}")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    trained = load_trained(args.model)
    data = Path(args.data)
    if (data / "manifest.json").is_file():
        ds = load_dataset(data)
    else:
        splits = load_splits(data, required=())
        ds = splits.get("test") or splits.get("val") or splits.get("train")
        if ds is None:
            raise DataError(f"no dataset found under {data}")
    metrics = evaluate(trained, ds)
    Path(args.report).write_text(
        json.dumps(metrics.to_json(), indent=2) + "\n", encoding="utf-8")
    print(f"top1 {metrics.top1_accuracy:.4f} over {metrics.n_samples} "
          f"sequences ({ds.split} split); report written to {args.report}")
    return EXIT_OK


def _parse_grid(text: str) -> list[tuple[int, float]]:
    pairs = []
    for chunk in text.replace(";", " ").split():
        parts = chunk.split(",")
        if len(parts) != 2:
            raise DataError(
                f"grid entries are top_k,eta pairs; cannot parse {chunk!r}")
        try:
            pairs.append((int(parts[0]), float(parts[1])))
        except ValueError:
            raise DataError(f"bad grid entry {chunk!r}") from None
    if not pairs:
        raise DataError("grid is empty")
    return pairs


def _write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row.csv_row())


def _cmd_profile(args) -> int:
    config = load_config(args.config)
    grid = _parse_grid(args.grid)
    splits = load_splits(args.data) if args.data else None
    rows = profile(config, grid, splits)
    _write_csv(args.out, ProfileRow.csv_header(), rows)
    mode = "trained" if splits else "cost-only"
    print(f"{len(rows)} {mode} rows written to {args.out}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    config = load_config(args.config)
    splits = load_splits(args.data)
    rows = ablate(config, splits)
    _write_csv(args.out, AblationRow.csv_header(), rows)
    print(f"{len(rows)} ablation rows written to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    config = load_config(args.config)
    report = gradcheck_pipeline(config, seed=args.seed)
    for line in report.summary_lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="espctl",
        description="Two-stage point-cloud sequence recognition toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic train/val/test splits")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("occlude", help="degrade a dataset with an occlusion preset")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--preset", required=True, choices=sorted(OCCLUSION_PRESETS))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_occlude)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, write a JSON report")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("profile", help="FLOPs/params (and accuracy) per grid cell")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--grid", required=True,
                   help="top_k,eta pairs, e.g. '32,0.45;64,0.68'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_profile)

    p = sub.add_parser("ablate", help="single-mechanism ablation table")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
