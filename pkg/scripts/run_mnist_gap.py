#!/usr/bin/env python3
"""Untrained-vs-trained gap on MNIST: a plain VAE (analogical weight 0)
trained for 20 epochs must clearly out-score a freshly initialized one under
the identical 5-set metric protocol.

Needs the MNIST IDX files under the dataset root (scripts/fetch_mnist.py).
"""

import argparse
import json
import os
import sys
import time

from anadis.data import DATA_ROOT_ENV, load_dataset
from anadis.models import build_bundle
from anadis.subspace_score import MetricParams, subspace_score
from anadis.training import TrainConfig, train_anavae


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default=os.environ.get(DATA_ROOT_ENV))
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None)
    args = parser.parse_args()
    if not args.root:
        print(f"set --root or ${DATA_ROOT_ENV}", file=sys.stderr)
        return 2

    config = TrainConfig(family="anavae", dataset="mnist", epochs=args.epochs,
                         lambda_=0.0, seed=args.seed, digest_every=0)
    dataset = load_dataset("mnist", "anavae", root=args.root, seed=args.seed)
    params = MetricParams(seed=1000 + args.seed)

    untrained = build_bundle("anavae", "mnist", seed=args.seed)
    untrained_report = subspace_score(untrained, dataset, params)
    print(json.dumps({"untrained_score": untrained_report.aggregate_score}), flush=True)

    t0 = time.time()
    bundle, _ = train_anavae(config, dataset)
    trained_report = subspace_score(bundle, dataset, params)
    payload = {
        "untrained_score": untrained_report.aggregate_score,
        "trained_score": trained_report.aggregate_score,
        "gap": trained_report.aggregate_score - untrained_report.aggregate_score,
        "epochs": args.epochs,
        "seed": args.seed,
        "train_seconds": round(time.time() - t0, 1),
    }
    print(json.dumps(payload), flush=True)
    if args.out:
        with open(args.out, "w") as f:
            json.dump(payload, f, indent=2)
    return 0 if payload["gap"] >= 0.15 else 1


if __name__ == "__main__":
    sys.exit(main())
