"""Scheduler FLOP savings over a sweep of scene-change rates.

For each fraction of still frame pairs, simulates the scheduler on a
generated sequence (ground-truth masks stand in for the network) and
prints the NS/FovealSeg and ND/FovealSeg ratios under the 640x640 vs
64x64 cost model.
"""
import argparse

import numpy as np

from fovealseg.data import SyntheticSpec, generate_synthetic_sequence
from fovealseg.scheduler import OracleSegmenter, run_trace
from fovealseg.trace_analysis import consecutive_differences

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--still", default="0.1,0.35,0.6,0.9")
    a = ap.parse_args()
    print(f"{'still':>6} {'below beta':>11} {'NS/FS':>7} {'ND/FS':>8}")
    for still in (float(s) for s in a.still.split(",")):
        seq = generate_synthetic_sequence(SyntheticSpec(), a.seed, a.frames, still_fraction=still)
        rep = run_trace(seq.frames, seq.trace, OracleSegmenter.for_sequence(seq))
        below = float(np.mean(consecutive_differences(seq.frames) < 0.037))
        print(f"{still:>6.2f} {below:>11.2f} {rep.ns_ratio:>7.2f} {rep.nd_ratio:>8.1f}")
