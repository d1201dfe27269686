"""Regenerate the synthetic trace shipped in src/fovealseg/resources."""
import argparse
from pathlib import Path

from fovealseg.data import SyntheticSpec, generate_synthetic_sequence
from fovealseg.trace_analysis import write_sequence

ROOT = Path(__file__).resolve().parents[1] / "src" / "fovealseg" / "resources"

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--frames", type=int, default=300)
    ap.add_argument("--out", type=Path, default=ROOT)
    a = ap.parse_args()
    truth = write_sequence(generate_synthetic_sequence(SyntheticSpec(), a.seed, a.frames), a.out)
    print(f"{len(truth['boundaries'])} segments, fixation fraction {truth['fixation_fraction']:.4f} -> {a.out}")
