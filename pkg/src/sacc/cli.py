"""Command-line entry point: simulate, train, compare, analyze.

Exit codes are a stable scripting contract: 0 success, 1 I/O failure,
2 usage/config error, 3 numeric failure. Every subcommand is deterministic
given its seed flags.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import analysis, room_sim, trainer
from .audio_io import load_manifest, read_wav
from .combinator import init_params, load_params
from .errors import ConfigError, ContractError, FormatError, NumericError, ToolkitError

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sacc",
        description="Multichannel speech frontend toolkit: simulation, "
                    "attention-combinator training, baseline comparison, analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="build a simulated multichannel dataset")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--n-scenes", type=int, required=True)
    p_sim.add_argument("--room-profile", help="JSON room profile (defaults built in)")
    p_sim.add_argument("--noise-dir", help="directory of 16 kHz noise WAVs")
    p_sim.add_argument("--source-dir", help="directory of 16 kHz clean WAVs "
                                            "(synthetic speech-like signals if omitted)")
    p_sim.add_argument("--out", required=True, help="output dataset directory")

    p_train = sub.add_parser("train", help="surrogate-train combinator parameters")
    p_train.add_argument("--manifest", required=True)
    p_train.add_argument("--config", help="JSON training config")
    p_train.add_argument("--init-seed", type=int, default=0)
    p_train.add_argument("--out-checkpoint", required=True)
    p_train.add_argument("--out-report", help="JSON report path "
                                              "(default: <out-checkpoint>.report.json)")

    p_cmp = sub.add_parser("compare", help="evaluate frontends on a manifest")
    p_cmp.add_argument("--manifest", required=True)
    p_cmp.add_argument("--checkpoint", required=True,
                       help="combinator parameter checkpoint")
    p_cmp.add_argument("--out-dir", help="write metrics.csv and metrics.json here")

    p_ana = sub.add_parser("analyze", help="emit combinator intermediates for one WAV")
    p_ana.add_argument("--input", required=True, help="multichannel WAV (>= 2 channels)")
    p_ana.add_argument("--checkpoint", required=True)
    p_ana.add_argument("--out-dir", required=True)
    return parser


def cmd_simulate(args) -> int:
    profile = room_sim.load_room_profile(args.room_profile)
    manifest = room_sim.build_dataset(
        args.out, n_scenes=args.n_scenes, seed=args.seed, profile=profile,
        source_dir=args.source_dir, noise_dir=args.noise_dir)
    print(f"wrote {len(manifest.entries)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = trainer.load_train_config(args.config)
    manifest = load_manifest(args.manifest)
    init = init_params(args.init_seed)
    report = trainer.train(manifest, cfg, init, args.out_checkpoint)
    report_path = args.out_report or args.out_checkpoint + ".report.json"
    with open(report_path, "w") as fh:
        fh.write(report.to_json() + "\n")
    first = report.train_losses[0]
    best = min(report.train_losses)
    print(f"epochs run: {len(report.train_losses)}, best epoch: {report.best_epoch}")
    print(f"train loss: first {first:.6f}, best {best:.6f} "
          f"({100.0 * (first - best) / first:.1f}% reduction)")
    print(f"checkpoint: {report.checkpoint_path}")
    print(f"report: {report_path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    params = load_params(args.checkpoint)
    manifest = load_manifest(args.manifest)
    frontends = [
        trainer.FrontendSpec("clean"),
        trainer.FrontendSpec("sdm"),
        trainer.FrontendSpec("rdm"),
        trainer.FrontendSpec("mvdr"),
        trainer.FrontendSpec("das"),
        trainer.FrontendSpec("sacc", params=params),
    ]
    table = trainer.evaluate(manifest, frontends)
    print(table.to_csv(), end="")
    if table.n_skipped:
        print(f"skipped {table.n_skipped} entries with missing files", file=sys.stderr)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "metrics.csv"), "w") as fh:
            fh.write(table.to_csv())
        with open(os.path.join(args.out_dir, "metrics.json"), "w") as fh:
            fh.write(table.to_json() + "\n")
    return EXIT_OK


def cmd_analyze(args) -> int:
    wave = read_wav(args.input)
    if wave.n_channels < 2:
        raise ConfigError("analysis needs a multichannel input (>= 2 channels)")
    params = load_params(args.checkpoint)
    bundle = analysis.compute_analysis(wave, params)
    analysis.write_bundle(bundle, args.out_dir)
    print(f"wrote analysis bundle to {args.out_dir}")
    return EXIT_OK


_HANDLERS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "compare": cmd_compare,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
