"""Command-line entry point (``b0motion``).

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .fieldmap import estimate_gre, hermitian_b0
from .nn.training import TrainingDivergedError
from .pipeline import (ConfigError, LockError, OverwriteError, Pipeline, PrerequisiteError, normalize_config,
                       validate_config)
from .volume import ComplexVolume, read_volume, write_mask, write_volume

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_NUMERIC = 0, 2, 3, 4

SUBCOMMANDS = {
    "simulate-dataset": "simulate",
    "calibrate-shim": "calibrate",
    "train": "train",
    "finetune": "finetune",
    "predict": "predict",
    "evaluate": "evaluate",
    "sweep-finetune": "sweep",
    "all": "all",
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config (JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--outdir", type=Path, help="override the config output directory")
    common.add_argument("--deterministic", action="store_true", help="single-threaded FFTs, fixed reduction order")
    common.add_argument("--force", action="store_true", help="replace output made under a different config")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="b0motion", description="Motion-induced B0 prediction pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {SUBCOMMANDS[name]} stage" if name != "all"
                       else "run every stage in order")
    est = sub.add_parser("estimate-fieldmap", parents=[common], help="field map from a multi-echo B0V file")
    est.add_argument("echoes", type=Path, help="complex multi-echo volume (B0V)")
    est.add_argument("output", type=Path, help="field map to write (Hz, B0V)")
    est.add_argument("--method", choices=("gre", "hermitian"), default="gre",
                     help="gre: guided unwrapping + weighted fit over all echoes; hermitian: first two echoes")
    est.add_argument("--mask-out", type=Path, help="also write the reliable-voxel mask")
    return p


def _estimate(args) -> int:
    echoes = read_volume(args.echoes)
    if not isinstance(echoes, ComplexVolume):
        raise ConfigError("echoes", f"{args.echoes} holds a real volume, expected complex echoes")
    result = estimate_gre(echoes)[0] if args.method == "gre" else hermitian_b0(echoes.select([0, 1]))
    write_volume(result.field, args.output)
    if args.mask_out:
        write_mask(result.mask, args.mask_out)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "estimate-fieldmap":
            return _estimate(args)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.outdir is not None:
            overrides["outdir"] = str(args.outdir)
        config = validate_config(args.config, overrides) if args.config else normalize_config({}, overrides)
        Pipeline(config, force=args.force, deterministic=args.deterministic).run(SUBCOMMANDS[args.command])
    except (ConfigError, OverwriteError, LockError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PrerequisiteError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
