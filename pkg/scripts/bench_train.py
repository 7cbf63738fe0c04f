#!/usr/bin/env python3
"""Time embedding training at descriptor scale (default: 5000 x 320 -> 128).

Pin BLAS to one thread for a single-core figure, e.g.
OPENBLAS_NUM_THREADS=1 OMP_NUM_THREADS=1 python scripts/bench_train.py
"""

import argparse
import time

import numpy as np

from templar import synth
from templar.embed_train import TrainConfig, satisfied_fraction, train_embedding


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--dim", type=int, default=320)
    ap.add_argument("--classes", type=int, default=100)
    ap.add_argument("--embed-dim", type=int, default=128)
    ap.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    X, y = synth.clustered_descriptors(rng, args.classes, args.n // args.classes, args.dim, 0.3, 1.0)
    cfg = TrainConfig(embed_dim=args.embed_dim, epochs=args.epochs, seed=args.seed)
    trace = []
    t0 = time.perf_counter()
    W = train_embedding(X, y, cfg, loss_trace=trace)
    elapsed = time.perf_counter() - t0
    for epoch, loss in trace:
        print(f"epoch {epoch:3d}  loss {loss:.6f}")
    sub = rng.choice(len(y), size=min(300, len(y)), replace=False)
    frac = satisfied_fraction(W, X[sub], y[sub], cfg.margin, cfg.normalize)
    print(f"trained W {W.shape} in {elapsed:.1f}s; margin satisfied on {frac:.3f} of triplets (300-sample subset)")


if __name__ == "__main__":
    main()
