"""Balanced accuracy of TREAT-Net and the video-only baseline versus the paired-data fraction.

    python scripts/run_data_efficiency.py --config configs/desk.json --fractions 0.1 0.5 1.0
"""
from __future__ import annotations

import argparse
import time

from treatnet import config as C
from treatnet.experiments import data_efficiency, mean_by, prepare_cohort


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--fractions", type=float, nargs="*")
    ap.add_argument("--models", nargs="*", default=["treatnet", "video_only"])
    ap.add_argument("--seeds", type=int, nargs="*")
    args = ap.parse_args()

    cfg = C.load(args.config)
    fractions = args.fractions or cfg.eval.fractions
    t0 = time.time()
    prep, mc = prepare_cohort(cfg)
    rows = data_efficiency(cfg, prep, mc, fractions, args.models, args.seeds, log=print)
    print("fraction " + " ".join(f"{m:>14s}" for m in args.models))
    for f in fractions:
        print(f"{f:8g} " + " ".join(f"{mean_by(rows, m, f):14.4f}" for m in args.models))
    print(f"{time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()
