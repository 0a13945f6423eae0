"""Command-line entry point: ``seldde <subcommand>``.

Exit codes: 0 success, 1 user error (bad input, config, or files), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .accddoa import ScalerError, fit_distance_scaler
from .io_dataset import FormatError, MetadataError
from .salsa import FeatureError

log = logging.getLogger("seldde")

USER_ERRORS = (FileNotFoundError, IsADirectoryError, FormatError, MetadataError, FeatureError,
               ScalerError, ValueError, KeyError)


def _cmd_synth(args) -> int:
    from .pipeline import write_synth_dataset
    from .scene_synth import SceneConfig

    cfg = SceneConfig(duration_s=args.duration, num_events=args.num_events,
                      num_classes=args.num_classes, max_polyphony=args.max_polyphony,
                      snr_db=args.snr_db, seed=args.seed,
                      distance_range_m=tuple(args.distance_range))
    path = write_synth_dataset(args.out, args.num_clips, cfg, args.name, args.source_tag)
    print(path)
    return 0


def _cmd_extract(args) -> int:
    from .pipeline import cache_dir, load_segments, read_manifest

    cache = cache_dir(args.cache_dir)
    n = 0
    for m in args.manifest:
        n += len(load_segments(read_manifest(m), cache, distance_unit=args.distance_unit))
    print(f"{n} segments cached in {cache}")
    return 0


def _cmd_fit_scaler(args) -> int:
    from .pipeline import manifest_distances, read_manifest
    import numpy as np

    d = np.concatenate([manifest_distances(read_manifest(m), args.distance_unit)
                        for m in args.manifest])
    scaler = fit_distance_scaler(d)
    scaler.save(args.out)
    print(json.dumps(scaler.to_dict(), indent=2))
    return 0


def _cmd_train(args) -> int:
    from .pipeline import TrainConfig, train

    cfg = TrainConfig.from_file(args.config, epochs=args.epochs,
                                finetune_epochs=args.finetune_epochs,
                                checkpoint_dir=args.checkpoint_dir, seed=args.seed,
                                deterministic=True if args.deterministic else None)
    print(train(cfg))
    return 0


def _cmd_evaluate(args) -> int:
    from .pipeline import cache_dir, evaluate

    metrics = evaluate(args.checkpoint, args.manifest, cache_dir(args.cache_dir),
                       args.distance_unit, args.act_threshold)
    text = json.dumps(metrics.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_infer(args) -> int:
    from .pipeline import infer

    events = infer(args.checkpoint, args.wav, args.out, args.act_threshold)
    if not args.out:
        from .io_dataset import format_metadata_csv

        sys.stdout.write(format_metadata_csv(events))
    return 0


def _cmd_report(args) -> int:
    from .pipeline import report

    for path in report(args.manifest, args.out_dir, args.bin_edges, args.metrics or (),
                       args.distance_unit):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seldde", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def unit(p):
        p.add_argument("--distance-unit", choices=("m", "cm"), default="m",
                       help="unit of the metadata distance column")

    p = sub.add_parser("synth", help="generate synthetic FOA scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--num-clips", type=int, default=8)
    p.add_argument("--duration", type=float, default=5.0)
    p.add_argument("--num-events", type=int, default=4)
    p.add_argument("--num-classes", type=int, default=13)
    p.add_argument("--max-polyphony", type=int, default=3)
    p.add_argument("--snr-db", type=float, default=30.0)
    p.add_argument("--distance-range", type=float, nargs=2, default=(0.5, 4.0))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--source-tag", choices=("real", "synthetic"), default="synthetic")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("extract", help="compute and cache SALSA features")
    p.add_argument("manifest", nargs="+")
    p.add_argument("--cache-dir")
    unit(p)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("fit-scaler", help="fit the distance scaler on training labels")
    p.add_argument("manifest", nargs="+")
    p.add_argument("--out", required=True)
    unit(p)
    p.set_defaults(func=_cmd_fit_scaler)

    p = sub.add_parser("train", help="train and fine-tune a model")
    p.add_argument("--config", required=True, help="YAML/JSON file mirroring TrainConfig")
    p.add_argument("--epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--cache-dir")
    p.add_argument("--act-threshold", type=float)
    unit(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("infer", help="predict events for one WAV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--out")
    p.add_argument("--act-threshold", type=float)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("report", help="distance histograms and metric tables")
    p.add_argument("manifest", nargs="+")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bin-edges", type=float, nargs="+")
    p.add_argument("--metrics", nargs="*", help="metrics JSON files to tabulate")
    unit(p)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
