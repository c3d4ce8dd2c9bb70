"""featdump: dump all-layer hidden states of a speech checkpoint to SSLF files."""

from __future__ import annotations

import argparse
import sys

from .bridge import BridgeConfig, BridgeError, dump_corpus


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="featdump", description=__doc__)
    parser.add_argument("--model", required=True, help="checkpoint path or hub id")
    parser.add_argument("--layers", type=int, required=True,
                        help="expected transformer depth of the checkpoint")
    parser.add_argument("--manifest", required=True, help="corpus manifest (tsv)")
    parser.add_argument("--out", required=True, help="output directory for .sslf files")
    parser.add_argument("--normalize", action="store_true",
                        help="zero-mean/unit-variance each utterance before inference")
    args = parser.parse_args(argv)
    try:
        summary = dump_corpus(BridgeConfig(
            model_id=args.model, expected_layers=args.layers,
            manifest_path=args.manifest, output_dir=args.out,
            normalize=args.normalize))
    except BridgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"dumped {len(summary)} utterances to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
