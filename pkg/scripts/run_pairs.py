"""Paired baseline/regularized runs for every dataset and seed.

Finished pairs (those with a comparison.json) are skipped, so the script can be
interrupted and restarted.

    python scripts/run_pairs.py --out artifacts/pairs --seeds 0 1 2
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from cnftpr import datasets
from cnftpr.training import TrainConfig, paired_run


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("artifacts/pairs"))
    p.add_argument("--datasets", nargs="+", default=list(datasets.NAMES), choices=datasets.NAMES)
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--force", action="store_true", help="rerun pairs that already finished")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stdout)

    summaries = []
    for seed in args.seeds:
        for name in args.datasets:
            out = args.out / f"{name}_s{seed}"
            done = out / "comparison.json"
            if done.exists() and not args.force:
                summaries.append(json.loads(done.read_text()))
                logging.info("%s seed %d: already done", name, seed)
                continue
            summaries.append(paired_run(TrainConfig(dataset=name, seed=seed, iterations=args.iters), out))
            logging.info("%s seed %d: %s", name, seed, json.dumps(summaries[-1]))

    for s in summaries:
        print(f"{s['dataset']:<9} seed {s['seed']}  nfe {s['nfe_baseline']:6.2f} -> {s['nfe_tpr']:6.2f} "
              f"({s['nfe_reduction_pct']:+6.1f}%)  nll {s['nll_baseline']:.4f} / {s['nll_tpr']:.4f}  "
              f"straightness {s['straightness_baseline']:.4f} / {s['straightness_tpr']:.4f}")


if __name__ == "__main__":
    main()
