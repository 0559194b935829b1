"""Transfer experiment: pretrain on a large synthetic source, finetune on small disjoint targets.

One source model is trained on --source-videos streamed videos. For each seed a
fresh target set is generated; finetuning at lr / 10 is compared with training
from scratch on the same target half, with the same frozen glimpse sensor.
"""

import argparse
import logging
from pathlib import Path

from poseattn.config import load_config
from poseattn.experiments import transfer_seeds


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4], help="target seeds")
    ap.add_argument("--scale", choices=("desk", "full"), default="desk", help="configuration preset")
    ap.add_argument("--config", help="key = value overrides (data.* keys configure the generator)")
    ap.add_argument("--source-videos", type=int, default=2000, help="size of the source set")
    ap.add_argument("--target-videos", type=int, default=160, help="size of each target set")
    ap.add_argument("--source-epochs", type=int, default=20, help="epoch cap for source pretraining")
    ap.add_argument("--out", default="results/transfer", help="output directory")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    config, data_keys = load_config(args.config, args.scale)
    summary = transfer_seeds(
        args.seeds, config, data_keys, args.source_videos, args.target_videos, args.source_epochs, out=Path(args.out)
    )
    print(summary.to_text(), end="")


if __name__ == "__main__":
    main()
