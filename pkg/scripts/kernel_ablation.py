"""IoU, IoU' and grid-computation FLOPs for each Gaussian kernel sigma.

Equivalent to `fovealseg ablate-kernel`; kept as a script for quick runs
with the default toy protocol.
"""
import argparse
import csv
import logging
from dataclasses import replace
from pathlib import Path

from fovealseg.experiments import ToyConfig, kernel_ablation

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sigmas", default="8,12,16,20")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("out/ablation"))
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    a.out.mkdir(parents=True, exist_ok=True)
    rows = kernel_ablation(replace(ToyConfig(), seed=a.seed), [int(s) for s in a.sigmas.split(",")], a.out)
    with (a.out / "ablation.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(r)
