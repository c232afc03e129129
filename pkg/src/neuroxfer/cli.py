"""Command-line interface.

Subcommands: synth, finetune, encode-slow, encode-fast, spectrum, snr,
scaling, report, validate.  Exit codes: 0 success, 2 config error,
3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neuroxfer",
                                description="cross-resolution encoding pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="experiment config JSON (defaults built in)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
            sp.add_argument("--force", action="store_true",
                            help="overwrite a non-empty output directory")
        sp.add_argument("--threads", type=int,
                        help="BLAS thread count (set before numpy loads)")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)

    sp = sub.add_parser("finetune", help="tune the net on slow responses")
    sp.add_argument("data", help="dataset directory from synth")
    sp.add_argument("--downsample-factor", type=int, default=1,
                    help="downsample slow responses before tuning")
    sp.add_argument("--stories", type=int, default=None,
                    help="limit the number of training stories")
    common(sp)

    for name, text in (("encode-slow", "slow-response encoding scores"),
                       ("encode-fast", "fast-response lag-sweep scores")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("data", help="dataset directory")
        sp.add_argument("checkpoint", nargs="?", default=None,
                        help="checkpoint or finetune run dir (default: pretrained)")
        common(sp)

    sp = sub.add_parser("spectrum", help="residual-PSD change between two runs")
    sp.add_argument("run_a", help="fast-encoding run (reference, e.g. pretrained)")
    sp.add_argument("run_b", help="fast-encoding run (comparison, e.g. tuned)")
    common(sp)

    sp = sub.add_parser("snr", help="repeat-based SNR spectrum of the test story")
    sp.add_argument("data", help="dataset directory")
    common(sp)

    sp = sub.add_parser("scaling", help="scaling-law sweep over story counts")
    sp.add_argument("data", help="dataset directory")
    sp.add_argument("counts", nargs="+", type=int, help="story counts, e.g. 1 2 4 8")
    common(sp)

    sp = sub.add_parser("report", help="collect a run's outputs into CSV tables")
    sp.add_argument("run_dir", help="run directory to summarize")
    sp.add_argument("--out", default=None, help="report directory (default: run/report)")

    sp = sub.add_parser("validate", help="validate a dataset directory")
    sp.add_argument("data", help="dataset directory")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    threads = getattr(args, "threads", None)
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)

    from . import pipeline
    from .errors import ConfigError, DataError, NumericalError

    try:
        if args.command == "synth":
            cfg = pipeline.load_config(args.config, args.seed)
            path = pipeline.cmd_synth(cfg, args.out, args.force)
        elif args.command == "finetune":
            cfg = pipeline.load_config(args.config, args.seed)
            path = pipeline.cmd_finetune(cfg, args.data, args.out, args.force,
                                         args.downsample_factor, args.stories)
        elif args.command == "encode-slow":
            cfg = pipeline.load_config(args.config, args.seed)
            path = pipeline.cmd_encode_slow(cfg, args.data, args.out,
                                            args.checkpoint, args.force)
        elif args.command == "encode-fast":
            cfg = pipeline.load_config(args.config, args.seed)
            path = pipeline.cmd_encode_fast(cfg, args.data, args.out,
                                            args.checkpoint, args.force)
        elif args.command == "spectrum":
            cfg = pipeline.load_config(args.config, args.seed)
            path = pipeline.cmd_spectrum(cfg, args.run_a, args.run_b, args.out,
                                         args.force)
        elif args.command == "snr":
            cfg = pipeline.load_config(args.config, args.seed)
            path = pipeline.cmd_snr(cfg, args.data, args.out, args.force)
        elif args.command == "scaling":
            cfg = pipeline.load_config(args.config, args.seed)
            path = pipeline.cmd_scaling(cfg, args.data, args.counts, args.out,
                                        args.force)
        elif args.command == "report":
            path = pipeline.cmd_report(args.run_dir, args.out)
        elif args.command == "validate":
            info = pipeline.validate_dataset(args.data)
            print(f"ok: {info['n_manifests']} manifests valid")
            return 0
        else:  # pragma: no cover
            raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
