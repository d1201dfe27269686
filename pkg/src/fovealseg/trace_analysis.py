"""Segment a frame sequence by pixel difference and summarize gaze motion inside segments."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib.resources import files
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import load_trace
from .gaze import GazeTrace
from .scheduler import DEFAULT_BETA, frame_difference

HIST_BINS = 50
HIST_RANGE = (0.0, math.sqrt(2.0))


@dataclass(frozen=True)
class SegmentPartition:
    boundaries: tuple[int, ...]
    length: int

    def __post_init__(self):
        b = self.boundaries
        if not b or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])) or b[-1] >= self.length:
            raise ValueError(f"invalid segment boundaries {b} for length {self.length}")

    @property
    def ranges(self) -> list[tuple[int, int]]:
        """Half-open ``[start, stop)`` frame ranges."""
        ends = list(self.boundaries[1:]) + [self.length]
        return list(zip(self.boundaries, ends))

    def __len__(self) -> int:
        return len(self.boundaries)


@dataclass
class TraceStats:
    histogram: np.ndarray  # bin masses, sum 1 (all zero if nothing was pooled)
    bin_edges: np.ndarray
    q95: float
    fraction_below_gaze_threshold: float
    fraction_of_pairs_below_beta: float
    n_pairs: int
    gaze_threshold: float

    def to_dict(self) -> dict:
        return {"q95": self.q95, "fraction_below_gaze_threshold": self.fraction_below_gaze_threshold,
                "fraction_of_pairs_below_beta": self.fraction_of_pairs_below_beta, "n_pairs": self.n_pairs,
                "gaze_threshold": self.gaze_threshold, "histogram": self.histogram.tolist(),
                "bin_edges": self.bin_edges.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def table(self) -> str:
        return "\n".join([
            f"{'pairs':<28}{self.n_pairs:>10d}",
            f"{'q95 gaze difference':<28}{self.q95:>10.4f}",
            f"{'below gaze threshold':<28}{self.fraction_below_gaze_threshold:>10.4f}",
            f"{'frame pairs below beta':<28}{self.fraction_of_pairs_below_beta:>10.4f}",
        ])


def partition_segments(frame_diffs: Sequence[float], beta: float = DEFAULT_BETA) -> SegmentPartition:
    """Open a segment at every t with ``frame_diffs[t] > beta``; t = 0 always opens one.

    ``frame_diffs[t]`` is the difference to the initial frame of the segment
    that is current when t arrives, which the caller computes (see
    ``segment_frames``).
    """
    d = np.asarray(frame_diffs, dtype=np.float64)
    if d.ndim != 1 or len(d) == 0:
        raise ValueError("frame_diffs must be a non-empty 1-d sequence")
    return SegmentPartition(tuple([0] + [int(t) for t in np.nonzero(d[1:] > beta)[0] + 1]), len(d))


def segment_frames(frames: Sequence[np.ndarray], beta: float = DEFAULT_BETA) -> tuple[np.ndarray, SegmentPartition]:
    """Differences of each frame to its segment's initial frame, and the partition they induce."""
    if len(frames) == 0:
        raise ValueError("no frames")
    diffs = np.zeros(len(frames))
    init = frames[0]
    for t in range(1, len(frames)):
        diffs[t] = frame_difference(frames[t], init)
        if diffs[t] > beta:
            init = frames[t]
    return diffs, partition_segments(diffs, beta)


def consecutive_differences(frames: Sequence[np.ndarray]) -> np.ndarray:
    return np.array([frame_difference(frames[t], frames[t - 1]) for t in range(1, len(frames))])


def nearest_rank(x: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the ceil(q n)-th smallest value."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    if len(x) == 0:
        return float("nan")
    k = max(int(math.ceil(q * len(x))), 1)
    return float(x[k - 1])


def pooled_gaze_differences(trace: GazeTrace, partition: SegmentPartition) -> np.ndarray:
    if len(trace) != partition.length:
        raise ValueError(f"trace has {len(trace)} samples but the partition covers {partition.length}")
    uv = trace.as_array()
    parts = [np.hypot(*np.diff(uv[a:b], axis=0).T) for a, b in partition.ranges if b - a > 1]
    return np.concatenate(parts) if parts else np.zeros(0)


def gaze_stats(trace: GazeTrace, partition: SegmentPartition, gaze_threshold: float = 0.1,
               pair_diffs: Sequence[float] | None = None, beta: float = DEFAULT_BETA) -> TraceStats:
    """Pooled within-segment gaze-displacement statistics.

    ``pair_diffs`` (consecutive-frame differences, length T - 1) feeds the
    fraction of frame pairs below ``beta``; without it that field is NaN.
    """
    d = pooled_gaze_differences(trace, partition)
    counts, edges = np.histogram(d, bins=HIST_BINS, range=HIST_RANGE)
    hist = counts / counts.sum() if counts.sum() else counts.astype(np.float64)
    below = float(np.mean(d < gaze_threshold)) if len(d) else float("nan")
    if pair_diffs is not None and len(pair_diffs):
        pairs = float(np.mean(np.asarray(pair_diffs) < beta))
    else:
        pairs = float("nan")
    return TraceStats(hist, edges, nearest_rank(d, 0.95), below, pairs, len(d), gaze_threshold)


def analyze(frames: Sequence[np.ndarray], trace: GazeTrace, beta: float = DEFAULT_BETA,
            gaze_threshold: float = 0.1) -> tuple[SegmentPartition, TraceStats]:
    _, part = segment_frames(frames, beta)
    return part, gaze_stats(trace, part, gaze_threshold, consecutive_differences(frames), beta)


def plot_histogram(stats: TraceStats, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(stats.bin_edges[:-1], stats.histogram, width=np.diff(stats.bin_edges), align="edge")
    ax.axvline(stats.q95, color="gold", label=f"q95 = {stats.q95:.3f}")
    ax.set_xlabel("gaze difference within segment")
    ax.set_ylabel("fraction of pairs")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# --------------------------------------------------------------------------- bundled trace

BUNDLED = "bundled"


def write_sequence(seq, root, name: str = BUNDLED) -> dict:
    """Store frames (uint8), gaze CSV and the generator's ground truth under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    frames = (np.clip(seq.frames, 0, 1) * 255 + 0.5).astype(np.uint8)
    with open(root / f"{name}_frames.npz", "wb") as fh:
        np.savez_compressed(fh, frames=frames)
    (root / f"{name}_trace.csv").write_text(seq.trace.to_csv())
    truth = {"boundaries": [int(b) for b in seq.boundaries], "saccade_frames": [int(s) for s in seq.saccade_frames],
             "fixation_fraction": seq.fixation_fraction, **seq.meta}
    (root / f"{name}_truth.json").write_text(json.dumps(truth, indent=1) + "\n")
    return truth


def load_sequence(root=None, name: str = BUNDLED) -> tuple[np.ndarray, GazeTrace, dict]:
    """Frames in [0, 1], gaze trace and ground truth; defaults to the packaged trace."""
    root = Path(root) if root is not None else Path(str(files("fovealseg") / "resources"))
    with np.load(root / f"{name}_frames.npz") as z:
        frames = z["frames"].astype(np.float64) / 255.0
    truth = json.loads((root / f"{name}_truth.json").read_text())
    return frames, load_trace(root / f"{name}_trace.csv"), truth
