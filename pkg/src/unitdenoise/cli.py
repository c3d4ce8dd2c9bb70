"""Command-line pipeline driver.

Exit codes: 0 success, 2 config error, 3 stale upstream artifacts,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .denoiser import NumericalError
from .pipeline import Pipeline, StaleInputError

_COMMANDS = (
    "synth", "augment", "extract", "train_kmeans", "quantize",
    "train_denoiser", "decode", "eval", "adapt", "ablate", "report", "all",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unitdenoise",
        description="noise-robust discrete speech unit pipeline",
    )
    parser.add_argument("--config", required=True, help="pipeline config file")
    parser.add_argument("--workdir", required=True, help="pipeline working directory")
    parser.add_argument("--seed-override", type=int, default=None,
                        help="replace the config seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for per-utterance stages")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        if name == "ablate":
            cmd.add_argument("--variants", default="encoder_only,encoder_decoder",
                             help="comma-separated subset of: "
                                  "encoder_only, decoder_only, encoder_decoder, "
                                  "adapter_encoder_decoder")
        if name == "eval":
            cmd.add_argument("--hyp-units", default=None,
                             help="score these hypothesis units instead of the decode output")
    return parser


class _Lock:
    """Advisory lock: one pipeline invocation per working directory."""

    def __init__(self, workdir: Path):
        self.path = Path(workdir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"{self.path} exists: another invocation may be driving this "
                "workdir (delete the lock if it is stale)")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed_override is not None:
            cfg.seed = args.seed_override
        cfg.validate()
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    try:
        with _Lock(Path(args.workdir)):
            pipe = Pipeline(cfg, args.workdir, threads=args.threads)
            if args.command == "synth":
                pipe.run_synth()
            elif args.command == "augment":
                pipe.run_augment()
            elif args.command == "extract":
                pipe.run_extract()
            elif args.command == "train_kmeans":
                pipe.run_train_kmeans()
            elif args.command == "quantize":
                pipe.run_quantize()
            elif args.command == "train_denoiser":
                pipe.run_train_denoiser()
            elif args.command == "decode":
                pipe.run_decode()
            elif args.command == "eval":
                hyp = Path(args.hyp_units) if args.hyp_units else None
                pipe.run_eval(hyp_units_path=hyp)
            elif args.command == "adapt":
                pipe.run_adapt()
            elif args.command == "ablate":
                results = pipe.run_ablate(args.variants.split(","))
                for variant, uer in results.items():
                    print(f"{variant}\t{uer:.4f}")
            elif args.command == "report":
                print(pipe.run_report())
            elif args.command == "all":
                pipe.run_all()
    except StaleInputError as e:
        print(f"stale input: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # lock conflicts, IO failures, bad variants
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
