#!/usr/bin/env python3
"""Run the full desk-scale pipeline on the built-in synthetic dataset.

Renders the default glyph dataset, trains the reduced model, harvests
peak activations, and writes distance profiles, montages, and the AU
summary under the output directory.

    python scripts/run_synthetic_pipeline.py --out runs/demo [--seed 1]
"""

import argparse
import sys

from auprobe.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/synthetic")
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()
    import os

    os.environ["AUPROBE_SEED"] = str(args.seed)
    return cli_main(
        ["pipeline", "--out", args.out, "--threads", str(args.threads)]
    )


if __name__ == "__main__":
    sys.exit(main())
