"""Gaze points, gaze traces, the gaze-distance map and the saccade test."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

DEFAULT_ALPHA = 0.01  # squared normalized distance, i.e. a 0.1 gaze jump


def round_half_up(x):
    """Round-half-away-from-zero for non-negative inputs (scalar or array)."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


@dataclass(frozen=True)
class GazePoint:
    u: float  # vertical, normalized
    v: float  # horizontal, normalized

    def __post_init__(self):
        for name in ("u", "v"):
            val = getattr(self, name)
            if not (math.isfinite(val) and 0.0 <= val <= 1.0):
                raise ValueError(f"gaze {name}={val!r} outside [0, 1]")

    def to_pixel(self, H: int, W: int) -> tuple[int, int]:
        return int(round_half_up(self.u * (H - 1))), int(round_half_up(self.v * (W - 1)))

    @classmethod
    def from_pixel(cls, i: int, j: int, H: int, W: int) -> "GazePoint":
        return cls(i / max(H - 1, 1), j / max(W - 1, 1))


@dataclass(frozen=True)
class GazeTrace:
    timestamps: tuple[float, ...]
    points: tuple[GazePoint, ...]

    def __post_init__(self):
        if len(self.timestamps) == 0:
            raise ValueError("gaze trace is empty")
        if len(self.timestamps) != len(self.points):
            raise ValueError("timestamps and points differ in length")
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if np.any(np.diff(ts) <= 0):
            bad = int(np.argmax(np.diff(ts) <= 0)) + 1
            raise ValueError(f"timestamps not strictly increasing at entry {bad}")

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self) -> Iterator[tuple[float, GazePoint]]:
        return iter(zip(self.timestamps, self.points))

    def __getitem__(self, k: int) -> GazePoint:
        return self.points[k]

    def as_array(self) -> np.ndarray:
        """(T, 2) array of (u, v)."""
        return np.array([(p.u, p.v) for p in self.points], dtype=np.float64)

    @classmethod
    def from_arrays(cls, timestamps: Sequence[float], uv) -> "GazeTrace":
        uv = np.asarray(uv, dtype=np.float64)
        return cls(tuple(float(t) for t in timestamps),
                   tuple(GazePoint(float(a), float(b)) for a, b in uv))

    def to_csv(self) -> str:
        lines = ["timestamp,u,v"]
        lines += [f"{t:.6f},{p.u:.9f},{p.v:.9f}" for t, p in self]
        return "\n".join(lines) + "\n"


def build_gaze_map(H: int, W: int, gaze: GazePoint) -> np.ndarray:
    """Normalized inverse distance to the gaze pixel, shape (H, W).

    N[i, j] = 1 - ||(i, j) - gaze_px|| / sqrt(H^2 + W^2)
    """
    if H < 1 or W < 1:
        raise ValueError(f"invalid gaze-map dimensions {H}x{W}")
    gu, gv = gaze.to_pixel(H, W)
    ii = np.arange(H, dtype=np.float64)[:, None]
    jj = np.arange(W, dtype=np.float64)[None, :]
    dist = np.sqrt((ii - gu) ** 2 + (jj - gv) ** 2)
    return 1.0 - dist / math.sqrt(H * H + W * W)


def gaze_displacement_sq(a: GazePoint, b: GazePoint) -> float:
    return (a.u - b.u) ** 2 + (a.v - b.v) ** 2


def is_saccade(g_t: GazePoint, g_last: GazePoint, alpha: float = DEFAULT_ALPHA) -> bool:
    if not alpha > 0:
        raise ValueError(f"saccade threshold must be positive, got {alpha!r}")
    return gaze_displacement_sq(g_t, g_last) > alpha
