"""Per-frame run/skip/reuse decisions for a gaze-conditioned segmenter.

Each frame is handled by one of five branches: skip it during a saccade,
rerun when the scene changes, reuse the buffered mask while the gaze stays
inside it, rerun when the gaze leaves it, or run on the first frame. Every
decision is charged an integer FLOP cost so a whole trace can be compared
against running the downsampled model on every frame (NS) or a
full-resolution backbone on every frame (ND).
"""
from __future__ import annotations

import enum
import functools
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .gaze import DEFAULT_ALPHA, GazePoint, GazeTrace, gaze_displacement_sq

DEFAULT_BETA = 0.037

Segmenter = Callable[[np.ndarray, GazePoint], "tuple[np.ndarray, int]"]


class Decision(str, enum.Enum):
    SKIP_SACCADE = "SKIP_SACCADE"
    RUN_NEW_SEGMENT = "RUN_NEW_SEGMENT"
    REUSE = "REUSE"
    RUN_NEW_GAZE = "RUN_NEW_GAZE"
    RUN_INITIAL = "RUN_INITIAL"

    @property
    def runs_model(self) -> bool:
        return self in (Decision.RUN_NEW_SEGMENT, Decision.RUN_NEW_GAZE, Decision.RUN_INITIAL)


@dataclass(frozen=True)
class CostModel:
    """Integer FLOPs charged per decision branch."""
    fsnet: int
    nd: int
    reuse: int
    displacement: int

    @classmethod
    def from_config(cls, cfg=None, radius: int = 2) -> "CostModel":
        from .flops import count_flops, fsnet_flops
        from .model import FSNetConfig
        cfg = cfg or FSNetConfig(src_h=640, src_w=640, h=64, w=64)
        return cls(fsnet_flops(cfg)["total"], count_flops("fullres", cfg=cfg),
                   count_flops("reuse", {"radius": radius}, cfg), count_flops("displacement", cfg=cfg))

    @classmethod
    def default(cls) -> "CostModel":
        return _default_costs()


@functools.lru_cache(maxsize=1)
def _default_costs() -> CostModel:
    return CostModel.from_config()


@dataclass
class SchedulerConfig:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    radius: int = 2
    costs: CostModel | None = None  # None: the 640x640 vs 64x64 default

    def __post_init__(self):
        if not self.alpha > 0 or not self.beta > 0:
            raise ValueError("alpha and beta must be positive")
        if self.radius < 0:
            raise ValueError("radius must be non-negative")

    @property
    def cost(self) -> CostModel:
        return self.costs or CostModel.default()


@dataclass(frozen=True)
class SchedulerState:
    F_init: np.ndarray | None = None
    g_last: GazePoint | None = None
    M_last: tuple[np.ndarray, int] | None = None

    def __post_init__(self):
        if self.M_last is not None and self.g_last is None:
            raise ValueError("a buffered mask needs a buffered gaze")

    @property
    def cold(self) -> bool:
        return self.F_init is None or self.M_last is None


@dataclass(frozen=True)
class FrameDecision:
    kind: Decision
    flops_charged: int


def frame_difference(F_t: np.ndarray, F_init: np.ndarray) -> float:
    """Mean absolute per-pixel, per-channel difference."""
    a, b = np.asarray(F_t, dtype=np.float64), np.asarray(F_init, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


def gaze_in_mask(g: GazePoint, M: np.ndarray, radius: int = 2) -> bool:
    """Whether the gaze pixel, or any mask pixel within ``radius`` of it, is set."""
    M = np.asarray(M, dtype=bool)
    H, W = M.shape
    i, j = g.to_pixel(H, W)
    if M[i, j]:
        return True
    if radius <= 0:
        return False
    i0, i1, j0, j1 = max(i - radius, 0), min(i + radius + 1, H), max(j - radius, 0), min(j + radius + 1, W)
    ii, jj = np.nonzero(M[i0:i1, j0:j1])
    return bool(np.any((ii + i0 - i) ** 2 + (jj + j0 - j) ** 2 <= radius * radius))


def step(state: SchedulerState, F_t: np.ndarray, g_t: GazePoint, model: Segmenter, cfg: SchedulerConfig):
    """One decision. Returns ``(FrameDecision, (mask, label) or None, new state)``."""
    c = cfg.cost
    if state.cold:
        M = model(F_t, g_t)
        return FrameDecision(Decision.RUN_INITIAL, c.fsnet), M, SchedulerState(np.array(F_t, copy=True), g_t, M)
    if gaze_displacement_sq(g_t, state.g_last) > cfg.alpha:
        return FrameDecision(Decision.SKIP_SACCADE, c.displacement), None, replace(state, g_last=g_t)
    if frame_difference(F_t, state.F_init) > cfg.beta:
        M = model(F_t, g_t)
        return (FrameDecision(Decision.RUN_NEW_SEGMENT, c.reuse + c.fsnet), M,
                SchedulerState(np.array(F_t, copy=True), g_t, M))
    if gaze_in_mask(g_t, state.M_last[0], cfg.radius):
        # g_last is left alone here, so slow drift accumulates against the last run's gaze
        return FrameDecision(Decision.REUSE, c.reuse), state.M_last, state
    M = model(F_t, g_t)
    # F_init deliberately stays: only a segment change replaces it
    return FrameDecision(Decision.RUN_NEW_GAZE, c.reuse + c.fsnet), M, replace(state, g_last=g_t, M_last=M)


@dataclass
class ScheduleReport:
    decisions: list[FrameDecision]
    masks: list = field(default_factory=list, repr=False)
    ns_per_frame: int = 0
    nd_per_frame: int = 0

    @property
    def total_flops(self) -> int:
        return sum(d.flops_charged for d in self.decisions)

    @property
    def ns_flops(self) -> int:
        return self.ns_per_frame * len(self.decisions)

    @property
    def nd_flops(self) -> int:
        return self.nd_per_frame * len(self.decisions)

    @property
    def ns_ratio(self) -> float:
        return self.ns_flops / self.total_flops

    @property
    def nd_ratio(self) -> float:
        return self.nd_flops / self.total_flops

    @property
    def kinds(self) -> list[Decision]:
        return [d.kind for d in self.decisions]

    def counts(self) -> dict[str, int]:
        return {k.value: sum(1 for d in self.decisions if d.kind is k) for k in Decision}

    def to_dict(self) -> dict:
        return {
            "frames": [{"t": t, "decision": d.kind.value, "flops": d.flops_charged}
                       for t, d in enumerate(self.decisions)],
            "counts": self.counts(),
            "total_flops": self.total_flops,
            "ns_flops": self.ns_flops,
            "nd_flops": self.nd_flops,
            "ns_ratio": self.ns_ratio,
            "nd_ratio": self.nd_ratio,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def table(self) -> str:
        rows = [f"{k:<16}{n:>8}" for k, n in self.counts().items()]
        rows += [f"{'FLOPs':<16}{self.total_flops:>8.3e}",
                 f"{'NS/FovealSeg':<16}{self.ns_ratio:>8.2f}", f"{'ND/FovealSeg':<16}{self.nd_ratio:>8.2f}"]
        return "\n".join(rows)


def run_trace(frames: Sequence[np.ndarray], trace: GazeTrace | Sequence[GazePoint], model: Segmenter,
              cfg: SchedulerConfig | None = None) -> ScheduleReport:
    cfg = cfg or SchedulerConfig()
    points = list(trace.points if isinstance(trace, GazeTrace) else trace)
    if len(frames) != len(points):
        raise ValueError(f"{len(frames)} frames but {len(points)} gaze samples")
    state = SchedulerState()
    decisions, masks = [], []
    for F_t, g_t in zip(frames, points):
        d, M, state = step(state, F_t, g_t, model, cfg)
        decisions.append(d)
        masks.append(M)
    c = cfg.cost
    return ScheduleReport(decisions, masks, c.fsnet, c.nd)


# --------------------------------------------------------------------------- segmenters and fixtures

def frame_key(frame: np.ndarray) -> str:
    a = np.ascontiguousarray(frame)
    return hashlib.sha256(a.tobytes() + str(a.shape).encode()).hexdigest()


class OracleSegmenter:
    """Ground-truth IOI lookup for frames whose scene is known.

    Frames are matched by content hash; a gaze on background yields an
    empty mask with label -1.
    """

    def __init__(self, frames, scenes, scene_of_frame):
        self.scenes = scenes
        self.index = {frame_key(f): int(s) for f, s in zip(frames, scene_of_frame)}
        self.calls = 0

    @classmethod
    def for_sequence(cls, seq) -> "OracleSegmenter":
        return cls(seq.frames, seq.scenes, seq.scene_of_frame)

    def __call__(self, frame: np.ndarray, gaze: GazePoint) -> tuple[np.ndarray, int]:
        from .data import NoIOIError, gaze_to_ioi
        self.calls += 1
        scene = self.scenes[self.index[frame_key(frame)]]
        try:
            s = gaze_to_ioi(scene, gaze)
        except NoIOIError:
            return np.zeros(scene.hw, dtype=bool), -1
        return s.y_binary.astype(bool), s.class_id


@dataclass
class Fixture:
    name: str
    frames: np.ndarray
    trace: GazeTrace
    expected: list[Decision]
    segmenter: OracleSegmenter


def _fixture_scene(seed: int, size: int):
    from .data import SyntheticSpec, generate_synthetic_scene, interior_pixels
    scene = generate_synthetic_scene(SyntheticSpec(height=size, width=size), seed)
    region = scene.instance_index_map() == 0
    pts = interior_pixels(region)
    i, j = pts[len(pts) // 2]
    return scene, GazePoint.from_pixel(int(i), int(j), size, size)


def _trace(points) -> GazeTrace:
    return GazeTrace(tuple(float(t) / 30.0 for t in range(len(points))), tuple(points))


def fixture(name: str, T: int = 10, size: int = 32, seed: int = 0) -> Fixture:
    """Hand-built sequences with known decision sequences.

    ``all_reuse``: identical frames, fixed gaze inside an instance.
    ``all_saccade``: identical frames, gaze alternating between two points 0.5 apart.
    ``segment_change``: like ``all_reuse`` but every frame from ``T // 2`` on is
    brightened by 0.05, a difference above the default beta.
    """
    if T < 2:
        raise ValueError("fixtures need at least two frames")
    scene, g = _fixture_scene(seed, size)
    base = np.clip(scene.image, 0.1, 0.9)
    scene = replace(scene, image=base)
    frames = np.repeat(base[None], T, axis=0)
    scenes, scene_of = [scene], np.zeros(T, dtype=np.int64)
    points = [g] * T
    if name == "all_reuse":
        expected = [Decision.RUN_INITIAL] + [Decision.REUSE] * (T - 1)
    elif name == "all_saccade":
        a, b = GazePoint(0.25, 0.25), GazePoint(0.25 + 0.5 / np.sqrt(2), 0.25 + 0.5 / np.sqrt(2))
        points = [a if t % 2 == 0 else b for t in range(T)]
        expected = [Decision.RUN_INITIAL] + [Decision.SKIP_SACCADE] * (T - 1)
    elif name == "segment_change":
        k = T // 2
        scenes.append(replace(scene, image=base + 0.05))
        frames[k:] = base + 0.05
        scene_of[k:] = 1
        expected = [Decision.RUN_INITIAL] + [Decision.REUSE] * (k - 1) + [Decision.RUN_NEW_SEGMENT] \
            + [Decision.REUSE] * (T - k - 1)
    else:
        raise ValueError(f"unknown fixture {name!r}; expected all_reuse, all_saccade or segment_change")
    return Fixture(name, frames, _trace(points), expected, OracleSegmenter(frames, scenes, scene_of))


FIXTURES = ("all_reuse", "all_saccade", "segment_change")


def config_dict(cfg: SchedulerConfig) -> dict:
    d = asdict(cfg)
    d["costs"] = asdict(cfg.cost)
    return d
