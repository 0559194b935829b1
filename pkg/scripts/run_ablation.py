"""Ablation matrix over seeds on the synthetic benchmark.

Writes per-seed rows, per-row means and attention localization to --out.
"""

import argparse
import logging
from pathlib import Path

from poseattn.config import load_config
from poseattn.experiments import ablation_seeds


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4], help="seeds to run")
    ap.add_argument("--scale", choices=("desk", "full"), default="desk", help="configuration preset")
    ap.add_argument("--config", help="key = value overrides (data.* keys configure the generator)")
    ap.add_argument("--out", default="results/ablation", help="output directory")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    config, data_keys = load_config(args.config, args.scale)
    summary = ablation_seeds(args.seeds, config, data_keys, Path(args.out))
    print(summary.to_text(), end="")


if __name__ == "__main__":
    main()
