"""Train all four model kinds over the configured seeds and print the AUROC ordering.

    python scripts/run_ordering.py --config configs/desk.json --out runs/ordering
"""
from __future__ import annotations

import argparse
import time
from pathlib import Path

from treatnet import config as C
from treatnet.experiments import ordering_study, prepare_cohort
from treatnet.metrics import write_reports
from treatnet.pipeline import ALL_KINDS


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--out", default="runs/ordering")
    ap.add_argument("--seeds", type=int, nargs="*", help="override eval.seeds")
    args = ap.parse_args()

    cfg = C.load(args.config)
    t0 = time.time()
    prep, mc = prepare_cohort(cfg)
    reports = ordering_study(cfg, prep, mc, ALL_KINDS, args.seeds, log=print)
    out = Path(args.out)
    write_reports([reports[k] for k in ALL_KINDS], out)
    C.write_resolved(cfg, out)
    means = {k: reports[k].summary()["auroc"]["mean"] for k in ALL_KINDS}
    for k in sorted(means, key=means.get, reverse=True):
        print(f"{k:22s} mean AUROC {means[k]:.4f}")
    print(f"{time.time() - t0:.0f} s; reports in {out}")


if __name__ == "__main__":
    main()
