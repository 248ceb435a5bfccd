#!/usr/bin/env python3
"""Full workflow on the synthetic benchmark: train fold 0, evaluate all folds.

Generates the default dataset if needed, fits the decoder with pseudo-mask
supervision on fold 0's training classes, evaluates the checkpoint on every
fold's held-out classes, and renders a few five-panel episode strips.

Usage:
    python3 scripts/train_and_eval.py [--steps 500] [--episodes 100]
                                      [--out runs/full] [--delta 10]
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from lfss.cli import main


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--episodes", type=int, default=100,
                    help="evaluation episodes per fold")
    ap.add_argument("--delta", type=float, default=10.0,
                    help="benchmark separability (delta/sigma)")
    ap.add_argument("--out", type=Path, default=Path("runs/full"))
    args = ap.parse_args(argv)

    base = ["--output-dir", str(args.out),
            "--set", f"synth.delta={args.delta}"]
    ckpt = args.out / "checkpoints" / "final.pt"

    print(f"=== train: {args.steps} steps on fold 0 ===")
    rc = main(["train", *base, "--set", f"train.steps={args.steps}"])
    if rc != 0:
        return rc

    print(f"\n=== eval: {args.episodes} episodes x 4 folds ===")
    rc = main(["eval", *base, "--all-folds",
               "--episodes", str(args.episodes),
               "--checkpoint", str(ckpt)])
    if rc != 0:
        return rc

    print("\n=== visualize: 4 episode strips ===")
    rc = main(["visualize", *base, "--episodes", "4",
               "--checkpoint", str(ckpt)])
    if rc != 0:
        return rc

    print(f"\ntable: {args.out / 'eval_report.txt'}")
    print(f"strips: {args.out / 'viz'}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
