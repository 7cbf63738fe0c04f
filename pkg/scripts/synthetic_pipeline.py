#!/usr/bin/env python3
"""Generate a synthetic face dataset and run every CLI stage over it.

    python scripts/synthetic_pipeline.py --workdir /tmp/templar-demo --splits 3
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from templar import synth
from templar.cli import main as cli


def run(argv):
    code = cli(argv)
    if code:
        sys.exit(f"templar {argv[0]} exited with {code}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", type=Path, required=True)
    ap.add_argument("--config", default=str(Path(__file__).resolve().parent.parent / "configs" / "small.yaml"))
    ap.add_argument("--subjects", type=int, default=10)
    ap.add_argument("--media", type=int, default=5)
    ap.add_argument("--splits", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--policy", choices=["setup1", "setup2"], default="setup1")
    args = ap.parse_args()

    data, out = args.workdir / "data", args.workdir / "out"
    synth.write_face_dataset(data, np.random.default_rng(args.seed), args.subjects, args.media, n_splits=args.splits)
    common = ["--config", args.config, "--seed", str(args.seed), "--policy", args.policy]

    run(["align", "--protocol", str(data / "protocol.csv"), "--images", str(data / "images"), "--out", str(out), *common])
    run(["init-weights", "--out", str(out), *common])
    run(["extract", "--store", str(out / "aligned.tmpl"), "--weights", str(out / "weights.tmpl"), "--out", str(out), *common])
    # one embedding per split, each trained on that split's training subjects
    for k in range(1, args.splits + 1):
        run(["train-embedding", "--store", str(out / "descriptors.tmpl"),
             "--protocol", str(data / f"split{k}" / "train.csv"), "--out", str(out / f"split{k}"), *common])
    run(["eval", "--protocol", str(data), "--splits", str(args.splits), "--store", str(out / "descriptors.tmpl"),
         "--embedding", str(out / "{split}" / "embedding.tmpl"), "--out", str(out / "eval"), *common])
    run(["landmark", "train", "--protocol", str(data / "protocol.csv"), "--images", str(data / "images"),
         "--out", str(out / "landmarks"), *common])

    summary = json.loads((out / "eval" / "summary.json").read_text())
    for key, mean in summary["mean"].items():
        print(f"{key:14s} {mean:.4f} +- {summary['std'][key]:.4f}")


if __name__ == "__main__":
    main()
