#!/usr/bin/env python3
"""Ablation on the synthetic factor dataset: analogical weight 1 vs 0.

Trains matched AnaVAE pairs over several seeds and reports the NMI component
of the subspace score for each, plus the per-seed win/loss record of the
analogical run.
"""

import argparse
import json
import sys
import time

from anadis.data import load_dataset
from anadis.subspace_score import MetricParams, subspace_score
from anadis.training import TrainConfig, train_anavae


def run_one(seed, lambda_, epochs, n_train, metric_seed=1000):
    config = TrainConfig(family="anavae", dataset="synthetic", epochs=epochs,
                         lambda_=lambda_, seed=seed, n_train=n_train,
                         n_eval=6400, digest_every=0)
    dataset = load_dataset("synthetic", "anavae", seed=seed,
                           n_train=n_train, n_eval=config.n_eval)
    t0 = time.time()
    bundle, history = train_anavae(config, dataset)
    report = subspace_score(bundle, dataset, MetricParams(seed=metric_seed))
    return {
        "seed": seed,
        "lambda": lambda_,
        "nmi": report.aggregate_nmi,
        "score": report.aggregate_score,
        "distance": report.aggregate_distance,
        "final_loss": history.records[-1]["losses"]["total"],
        "train_seconds": round(time.time() - t0, 1),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--n-train", type=int, default=1920)
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    results = []
    wins = 0
    for seed in args.seeds:
        with_ana = run_one(seed, 1.0, args.epochs, args.n_train)
        without = run_one(seed, 0.0, args.epochs, args.n_train)
        win = with_ana["nmi"] > without["nmi"]
        wins += win
        results.append({"seed": seed, "with": with_ana, "without": without, "win": win})
        print(json.dumps(results[-1]), flush=True)
    summary = {"wins": wins, "seeds": len(args.seeds),
               "nmi_with": [r["with"]["nmi"] for r in results],
               "nmi_without": [r["without"]["nmi"] for r in results]}
    print(json.dumps(summary), flush=True)
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"results": results, "summary": summary}, f, indent=2)
    return 0 if wins * 5 >= len(args.seeds) * 4 else 1


if __name__ == "__main__":
    sys.exit(main())
