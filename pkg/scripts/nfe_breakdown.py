"""Split training-tolerance NFE into the field's own cost and the cost of landing on sample times.

For each finished pair, both final checkpoints solve the same fresh batches
twice: once with no mandatory times, and once with the regularizer's sample
times (the same draws for both arms) as mandatory landing points.

    python scripts/nfe_breakdown.py artifacts/pairs --batches 8
"""

import argparse
import json
from pathlib import Path

import numpy as np

from cnftpr import datasets
from cnftpr.flow import FlowModel, log_likelihood
from cnftpr.tpr import TprConfig, sample_times
from cnftpr.training import TrainConfig

STREAM_DIAGNOSTIC = 99


def breakdown(pair: Path, batches: int) -> dict:
    summary = json.loads((pair / "comparison.json").read_text())
    config = TrainConfig(dataset=summary["dataset"], seed=summary["seed"])
    rng = np.random.default_rng([config.seed, STREAM_DIAGNOSTIC])
    draws = [(datasets.sample(config.dataset, config.batch_size, rng), sample_times(rng, TprConfig()))
             for _ in range(batches)]
    out = dict(dataset=config.dataset, seed=config.seed)
    for arm in ("baseline", "tpr"):
        model = FlowModel.load(pair / arm / "checkpoint.json")
        free, landed = [], []
        for x, taus in draws:
            free.append(log_likelihood(model, x, config.solver_train())[1].stats.nfe)
            landed.append(log_likelihood(model, x, config.solver_train(taus))[1].stats.nfe)
        out[f"{arm}_free"] = float(np.mean(free))
        out[f"{arm}_landed"] = float(np.mean(landed))
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("pairs", type=Path, help="directory of <dataset>_s<seed> pair directories")
    p.add_argument("--batches", type=int, default=8)
    args = p.parse_args(argv)
    print(f"{'pair':<13}{'baseline free':>15}{'tpr free':>10}{'baseline landed':>17}{'tpr landed':>12}")
    for pair in sorted(d for d in args.pairs.iterdir() if (d / "comparison.json").exists()):
        r = breakdown(pair, args.batches)
        print(f"{pair.name:<13}{r['baseline_free']:>15.2f}{r['tpr_free']:>10.2f}"
              f"{r['baseline_landed']:>17.2f}{r['tpr_landed']:>12.2f}")


if __name__ == "__main__":
    main()
