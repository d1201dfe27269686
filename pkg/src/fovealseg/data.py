"""Gaze-aware preprocessing, synthetic scenes/sequences and trace I/O."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from matplotlib.path import Path as MplPath
from scipy import ndimage

from . import seeding
from .gaze import GazePoint, GazeTrace

SHAPES = ("rectangle", "disk", "triangle")

PALETTE = np.array([
    [0.90, 0.20, 0.20], [0.20, 0.70, 0.25], [0.20, 0.35, 0.90],
    [0.95, 0.85, 0.15], [0.85, 0.30, 0.85], [0.10, 0.80, 0.85],
])


class NoIOIError(ValueError):
    """The gaze pixel lies on background."""


class SkipSample(Exception):
    """No instance of an under-quota class in this scene."""


def rasterize_polygon(poly, H: int, W: int) -> np.ndarray:
    """Fill of a simple polygon given as [[x, y], ...], sampled at pixel centers."""
    poly = np.asarray(poly, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
        raise ValueError("polygon must be an (n>=3, 2) array of [x, y]")
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    pts = np.column_stack([jj.ravel(), ii.ravel()])
    return MplPath(poly).contains_points(pts).reshape(H, W)


@dataclass
class Instance:
    class_id: int
    polygon: np.ndarray | None = None
    bitmap: np.ndarray | None = None

    def region(self, H: int, W: int) -> np.ndarray:
        if self.bitmap is not None:
            if self.bitmap.shape != (H, W):
                raise ValueError("bitmap does not match the image size")
            return self.bitmap.astype(bool)
        return rasterize_polygon(self.polygon, H, W)


@dataclass
class AnnotatedScene:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    instances: list[Instance]
    placement_reduced: bool = False

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def regions(self) -> list[np.ndarray]:
        H, W = self.hw
        return [inst.region(H, W) for inst in self.instances]

    def instance_index_map(self) -> np.ndarray:
        """Front-most instance per pixel (later entries are in front), -1 on background."""
        H, W = self.hw
        idx = np.full((H, W), -1, dtype=np.int64)
        for k, reg in enumerate(self.regions()):
            idx[reg] = k
        return idx


@dataclass
class FovealSample:
    image: np.ndarray
    gaze: GazePoint
    y_binary: np.ndarray  # (H, W) uint8
    class_id: int
    source: str = "synthetic"

    def __post_init__(self):
        gi, gj = self.gaze.to_pixel(*self.y_binary.shape)
        if self.y_binary[gi, gj] != 1:
            raise ValueError("gaze pixel must lie inside the IOI mask")


def gaze_to_ioi(scene: AnnotatedScene, gaze: GazePoint, source: str = "synthetic") -> FovealSample:
    H, W = scene.hw
    gi, gj = gaze.to_pixel(H, W)
    owner = int(scene.instance_index_map()[gi, gj])
    if owner < 0:
        raise NoIOIError(f"gaze pixel ({gi}, {gj}) is on background")
    inst = scene.instances[owner]
    mask = inst.region(H, W).astype(np.uint8)
    return FovealSample(scene.image, gaze, mask, int(inst.class_id), source)


class BalanceTracker:
    """Per-class draw counts with an optional per-class cap.

    With ``strict`` only the currently least-drawn classes are eligible, so
    counts never differ by more than one (scenes lacking them are skipped).
    """

    def __init__(self, n_classes: int, quota: int | None = None, strict: bool = False):
        self.counts = np.zeros(n_classes, dtype=np.int64)
        self.quota = quota
        self.strict = strict

    def eligible(self, cls: int) -> bool:
        if self.strict and self.counts[cls] > self.counts.min():
            return False
        return self.quota is None or self.counts[cls] < self.quota

    def record(self, cls: int) -> None:
        self.counts[cls] += 1


def interior_pixels(region: np.ndarray) -> np.ndarray:
    """(n, 2) pixel coordinates, preferring pixels whose 3x3 neighbourhood is inside."""
    core = ndimage.binary_erosion(region, structure=np.ones((3, 3)), border_value=0)
    pts = np.argwhere(core)
    return pts if len(pts) else np.argwhere(region)


def sample_gaze(scene: AnnotatedScene, rng: np.random.Generator, balance: BalanceTracker) -> GazePoint:
    H, W = scene.hw
    index_map = scene.instance_index_map()
    classes = [int(inst.class_id) for inst in scene.instances]
    # instances must own at least one visible pixel
    visible = [k for k in range(len(classes)) if (index_map == k).any()]
    cands = [k for k in visible if balance.eligible(classes[k])]
    if not cands:
        raise SkipSample("no instance of an under-quota class")
    lowest = min(balance.counts[classes[k]] for k in cands)
    cands = [k for k in cands if balance.counts[classes[k]] == lowest]
    cands = [k for k in cands if classes[k] == min(classes[c] for c in cands)]
    k = cands[int(rng.integers(len(cands)))]
    pts = interior_pixels(index_map == k)
    i, j = pts[int(rng.integers(len(pts)))]
    balance.record(classes[k])
    return GazePoint.from_pixel(int(i), int(j), H, W)


# --------------------------------------------------------------------------- synthetic scenes

@dataclass(frozen=True)
class SyntheticSpec:
    height: int = 32
    width: int = 32
    min_shapes: int = 2
    max_shapes: int = 5
    min_extent: int = 5  # bounding-box side, pixels
    max_extent: int = 10
    min_area: int = 9
    noise: float = 0.03
    palette: tuple = tuple(map(tuple, PALETTE))

    @property
    def n_classes(self) -> int:
        return len(SHAPES)

    def __post_init__(self):
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("invalid shape-count bounds")
        if self.max_extent >= min(self.height, self.width):
            raise ValueError("shapes must fit inside the canvas")


def shape_polygon(kind: str, cx: float, cy: float, ext: float, rng: np.random.Generator) -> np.ndarray:
    """Polygon [[x, y], ...] of the given shape class centered near (cx, cy)."""
    r = ext / 2.0
    if kind == "rectangle":
        a = r * rng.uniform(0.7, 1.0)
        b = r * rng.uniform(0.7, 1.0)
        return np.array([[cx - a, cy - b], [cx + a, cy - b], [cx + a, cy + b], [cx - a, cy + b]])
    if kind == "disk":
        t = np.linspace(0.0, 2 * math.pi, 24, endpoint=False)
        return np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)])
    if kind == "triangle":
        # apex in one of four directions, base opposite
        rot = rng.integers(4) * math.pi / 2
        pts = np.array([[0.0, -r * 1.1], [r * 1.1, r * 0.9], [-r * 1.1, r * 0.9]])
        c, s = math.cos(rot), math.sin(rot)
        pts = pts @ np.array([[c, s], [-s, c]])
        return pts + [cx, cy]
    raise ValueError(f"unknown shape {kind!r}")


def _background(spec: SyntheticSpec, rng: np.random.Generator, base=None) -> np.ndarray:
    if base is None:
        base = rng.uniform(0.15, 0.85, size=3)
    H, W = spec.height, spec.width
    tex = rng.uniform(-spec.noise, spec.noise, size=(H, W, 1))
    return np.clip(base[None, None, :] + tex, 0.0, 1.0), np.asarray(base)


def _pick_color(spec: SyntheticSpec, rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
    palette = np.asarray(spec.palette)
    contrast = np.abs(palette - base[None]).mean(axis=1)
    ok = np.flatnonzero(contrast > 0.2)
    pool = ok if len(ok) else np.array([int(np.argmax(contrast))])
    return palette[pool[int(rng.integers(len(pool)))]]


def _try_place(spec, rng, occupied, kind, center=None, must_contain=None, attempts=100):
    H, W = spec.height, spec.width
    for _ in range(attempts):
        ext = rng.uniform(spec.min_extent, spec.max_extent)
        if center is None:
            cx = rng.uniform(ext / 2 + 0.5, W - ext / 2 - 0.5)
            cy = rng.uniform(ext / 2 + 0.5, H - ext / 2 - 0.5)
        else:
            cx = center[1] + 0.5 + rng.uniform(-1.0, 1.0)
            cy = center[0] + 0.5 + rng.uniform(-1.0, 1.0)
        poly = shape_polygon(kind, cx, cy, ext, rng)
        poly[:, 0] = np.clip(poly[:, 0], 0.0, W)
        poly[:, 1] = np.clip(poly[:, 1], 0.0, H)
        region = rasterize_polygon(poly, H, W)
        if region.sum() < spec.min_area:
            continue
        if must_contain is not None:
            core = ndimage.binary_erosion(region, structure=np.ones((3, 3)), border_value=0)
            if not core[must_contain]:
                continue
        grown = ndimage.binary_dilation(region, structure=np.ones((3, 3)))
        if (grown & occupied).any():
            continue
        return poly, region
    return None


def _compose(spec, rng, n_shapes, base=None, anchor=None) -> AnnotatedScene:
    image, base = _background(spec, rng, base)
    occupied = np.zeros((spec.height, spec.width), dtype=bool)
    instances = []
    reduced = False
    for k in range(n_shapes):
        cls = int(rng.integers(len(SHAPES)))
        if k == 0 and anchor is not None:
            placed = _try_place(spec, rng, occupied, SHAPES[cls], center=anchor, must_contain=anchor)
        else:
            placed = _try_place(spec, rng, occupied, SHAPES[cls])
        if placed is None:
            reduced = True
            continue
        poly, region = placed
        occupied |= region
        shade = _pick_color(spec, rng, base)
        image[region] = np.clip(shade[None, :] + rng.uniform(-0.03, 0.03, size=(region.sum(), 1)), 0, 1)
        instances.append(Instance(cls, poly))
    return AnnotatedScene(image, instances, reduced)


def generate_synthetic_scene(spec: SyntheticSpec, seed: int) -> AnnotatedScene:
    rng = seeding.rng(seed, "scene")
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    return _compose(spec, rng, n)


def build_corpus(spec: SyntheticSpec, n_samples: int, seed: int, source: str = "synthetic") -> list[FovealSample]:
    """Balanced-class FovealSamples, one gaze per synthetic scene."""
    tracker = BalanceTracker(spec.n_classes, quota=math.ceil(n_samples / spec.n_classes))
    rng = seeding.rng(seed, "gaze")
    out = []
    k = 0
    while len(out) < n_samples:
        scene = generate_synthetic_scene(spec, seeding.int_seed(seed, "corpus", k))
        k += 1
        try:
            g = sample_gaze(scene, rng, tracker)
        except SkipSample:
            continue
        out.append(gaze_to_ioi(scene, g, source))
    return out


@dataclass
class SampleSet:
    """Stacked tensors for training and evaluation."""
    images: torch.Tensor   # (N, 3, H, W) float32
    gaze: torch.Tensor     # (N, 2) float64 normalized (u, v)
    masks: torch.Tensor    # (N, H, W) uint8
    classes: torch.Tensor  # (N,) int64

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.images[idx], self.gaze[idx], self.masks[idx], self.classes[idx])

    @classmethod
    def from_samples(cls, samples: list[FovealSample]) -> "SampleSet":
        if not samples:
            raise ValueError("no samples")
        return cls(
            torch.from_numpy(np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float32)),
            torch.tensor([[s.gaze.u, s.gaze.v] for s in samples], dtype=torch.float64),
            torch.from_numpy(np.stack([s.y_binary for s in samples]).astype(np.uint8)),
            torch.tensor([s.class_id for s in samples], dtype=torch.int64),
        )

    def save(self, path) -> None:
        np.savez_compressed(path, images=self.images.numpy(), gaze=self.gaze.numpy(),
                            masks=self.masks.numpy(), classes=self.classes.numpy())

    @classmethod
    def load(cls, path) -> "SampleSet":
        z = np.load(path)
        return cls(torch.from_numpy(z["images"]), torch.from_numpy(z["gaze"]),
                   torch.from_numpy(z["masks"]), torch.from_numpy(z["classes"]))


# --------------------------------------------------------------------------- sequences

@dataclass
class SyntheticSequence:
    frames: np.ndarray  # (T, H, W, 3)
    trace: GazeTrace
    boundaries: list[int]
    saccade_frames: list[int]
    scenes: list[AnnotatedScene]
    scene_of_frame: np.ndarray  # (T,) index into scenes
    fixation_fraction: float
    meta: dict = field(default_factory=dict)


def generate_synthetic_sequence(spec: SyntheticSpec, seed: int, T: int, fps: float = 30.0,
                                saccade_rate: float = 2.0, still_fraction: float = 0.35,
                                frame_noise: float = 0.01, jitter_px: int = 1,
                                min_jump: float = 0.15) -> SyntheticSequence:
    """Piecewise-static frames with fixation/saccade gaze.

    A new segment opens on each frame after the first with probability
    ``1 - still_fraction``; within a segment frames differ only by
    ``frame_noise`` uniform noise. Saccades arrive with inter-event
    intervals uniform in ``[0.5, 1.5] / saccade_rate`` seconds and move the
    fixation to a different instance at least ``min_jump`` away; between
    saccades the gaze jitters within ``jitter_px`` of the fixation pixel.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = seeding.rng(seed, "sequence")
    H, W = spec.height, spec.width

    sacc = set()
    if saccade_rate > 0:
        t_next = rng.uniform(0.5, 1.5) / saccade_rate
        while t_next * fps < T:
            f = int(math.floor(t_next * fps))
            if f >= 1:
                sacc.add(f)
            t_next += rng.uniform(0.5, 1.5) / saccade_rate

    scenes: list[AnnotatedScene] = []
    scene_of = np.zeros(T, dtype=np.int64)
    frames = np.zeros((T, H, W, 3))
    boundaries, saccades = [], []
    uv = np.zeros((T, 2))
    fix = None  # (i, j) fixation pixel
    fix_inst = None
    base_prev = None

    def new_scene(anchor):
        nonlocal base_prev
        while True:
            base = rng.uniform(0.15, 0.85, size=3)
            if base_prev is None or np.abs(base - base_prev).mean() > 0.15:
                break
        n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
        scene = None
        while scene is None or not scene.instances or (anchor is not None and scene.instance_index_map()[anchor] != 0):
            scene = _compose(spec, rng, n, base=base, anchor=anchor)
        base_prev = base
        return scene

    for t in range(T):
        if t == 0 or rng.random() > still_fraction:
            scenes.append(new_scene(fix))
            boundaries.append(t)
            if fix is None:
                idx = scenes[-1].instance_index_map()
                k0 = int(rng.integers(len(scenes[-1].instances)))
                pts = interior_pixels(idx == k0)
                fix = tuple(int(x) for x in pts[int(rng.integers(len(pts)))])
            fix_inst = int(scenes[-1].instance_index_map()[fix])
            seg_base = scenes[-1].image
        scene = scenes[-1]
        idx = scene.instance_index_map()
        if t in sacc:
            here = np.array(fix) / [H - 1, W - 1]
            options = []
            for k in range(len(scene.instances)):
                if k == fix_inst:
                    continue
                pts = interior_pixels(idx == k)
                far = pts[np.hypot(*((pts / [H - 1, W - 1] - here).T)) >= min_jump]
                if len(far):
                    options.append((k, far))
            if options:
                k, far = options[int(rng.integers(len(options)))]
                fix = tuple(int(x) for x in far[int(rng.integers(len(far)))])
                fix_inst = k
                saccades.append(t)
        region = idx == fix_inst
        near = [(fix[0] + di, fix[1] + dj) for di in range(-jitter_px, jitter_px + 1)
                for dj in range(-jitter_px, jitter_px + 1)]
        near = [p for p in near if 0 <= p[0] < H and 0 <= p[1] < W and region[p]]
        gi, gj = near[int(rng.integers(len(near)))]
        uv[t] = (gi / (H - 1), gj / (W - 1))
        scene_of[t] = len(scenes) - 1
        noise = rng.uniform(-frame_noise, frame_noise, size=(H, W, 3))
        frames[t] = seg_base if t == boundaries[-1] else np.clip(seg_base + noise, 0.0, 1.0)

    bset = set(boundaries)
    within = [t for t in range(1, T) if t not in bset]
    n_fix = sum(1 for t in within if t not in saccades)
    frac = n_fix / len(within) if within else 1.0
    trace = GazeTrace.from_arrays(np.arange(T) / fps, uv)
    return SyntheticSequence(frames, trace, boundaries, saccades, scenes, scene_of, frac,
                             {"seed": seed, "T": T, "fps": fps, "saccade_rate": saccade_rate,
                              "still_fraction": still_fraction})


def ioi_mask_at(seq: SyntheticSequence, t: int, gaze: GazePoint) -> tuple[np.ndarray, int] | None:
    """Ground-truth IOI of frame t under ``gaze`` (None on background)."""
    scene = seq.scenes[seq.scene_of_frame[t]]
    try:
        s = gaze_to_ioi(scene, gaze)
    except NoIOIError:
        return None
    return s.y_binary.astype(bool), s.class_id


# --------------------------------------------------------------------------- I/O

def load_trace(path) -> GazeTrace:
    """Read ``timestamp,u,v`` CSV with a one-line header."""
    path = Path(path)
    ts, uv = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "u", "v"]:
            raise ValueError(f"{path}:1: expected header 'timestamp,u,v'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                t, u, v = (float(c) for c in row)
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
            if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
                raise ValueError(f"{path}:{lineno}: gaze ({u}, {v}) outside [0, 1]")
            if ts and t <= ts[-1]:
                raise ValueError(f"{path}:{lineno}: timestamp {t} not after {ts[-1]}")
            ts.append(t)
            uv.append((u, v))
    if not ts:
        raise ValueError(f"{path}: no trace rows")
    return GazeTrace.from_arrays(ts, uv)


def save_trace(trace: GazeTrace, path) -> None:
    Path(path).write_text(trace.to_csv())


def save_scene(scene: AnnotatedScene, root, name: str) -> None:
    """Write ``images/<name>.png`` and ``annotations/<name>.json``."""
    from PIL import Image
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    img = (np.clip(scene.image, 0, 1) * 255 + 0.5).astype(np.uint8)
    Image.fromarray(img).save(root / "images" / f"{name}.png")
    ann = {"image": f"images/{name}.png",
           "instances": [{"class": int(i.class_id), "polygon": np.round(i.polygon, 4).tolist()}
                         for i in scene.instances]}
    (root / "annotations" / f"{name}.json").write_text(json.dumps(ann, indent=1))


def load_scene(ann_path) -> AnnotatedScene:
    from PIL import Image
    ann_path = Path(ann_path)
    ann = json.loads(ann_path.read_text())
    img_path = ann_path.parent.parent / ann["image"]
    if not img_path.exists():
        raise FileNotFoundError(f"image {img_path} referenced by {ann_path} not found")
    image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
    insts = [Instance(int(d["class"]), np.asarray(d["polygon"], dtype=np.float64)) for d in ann["instances"]]
    return AnnotatedScene(image, insts)


def iter_dataset_dir(root):
    """Annotated scenes of an ``images/ + annotations/`` directory, sorted by name."""
    root = Path(root)
    ann_dir = root / "annotations"
    if not ann_dir.is_dir():
        raise FileNotFoundError(f"{ann_dir} not found")
    names = sorted(p.stem for p in ann_dir.glob("*.json"))
    for img in sorted((root / "images").glob("*.png")):
        if img.stem not in names:
            raise FileNotFoundError(f"annotation file for {img.name} not found: {ann_dir / (img.stem + '.json')}")
    for n in names:
        yield n, load_scene(ann_dir / f"{n}.json")


def preprocess_dataset(root, out_dir, seed: int = 0, n_classes: int = 3, balance: bool = True,
                       trace: GazeTrace | None = None) -> dict:
    """Turn an ``images/ + annotations/`` directory into balanced FovealSamples.

    Gaze comes from ``trace`` when given (points are consumed in order;
    points on background or on an ineligible class are passed over),
    otherwise it is sampled inside instances. Writes ``samples.npz`` and a
    deterministic ``manifest.json``; returns the manifest.
    """
    out_dir = Path(out_dir)
    scenes = list(iter_dataset_dir(root))
    tracker = BalanceTracker(n_classes, strict=balance)
    rng = seeding.rng(seed, "preprocess")
    samples, records = [], []
    points = iter(trace.points) if trace is not None else None
    for name, scene in scenes:
        if any(not 0 <= i.class_id < n_classes for i in scene.instances):
            raise ValueError(f"{name}: class id outside [0, {n_classes})")
        try:
            if points is None:
                g = sample_gaze(scene, rng, tracker)
            else:
                g = _gaze_from_trace(scene, points, tracker)
        except SkipSample:
            continue
        s = gaze_to_ioi(scene, g, source=str(name))
        samples.append(s)
        records.append({"name": name, "class": s.class_id, "u": round(g.u, 9), "v": round(g.v, 9),
                        "pixels": int(s.y_binary.sum())})
    if not samples:
        raise ValueError(f"no usable samples in {root}")
    out_dir.mkdir(parents=True, exist_ok=True)
    SampleSet.from_samples(samples).save(out_dir / "samples.npz")
    manifest = {"seed": seed, "balance": balance, "n_scenes": len(scenes), "n_samples": len(samples),
                "class_counts": [int(c) for c in np.bincount([r["class"] for r in records], minlength=n_classes)],
                "samples": records}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def _gaze_from_trace(scene: AnnotatedScene, points, tracker: BalanceTracker) -> GazePoint:
    H, W = scene.hw
    index_map = scene.instance_index_map()
    for g in points:
        k = index_map[g.to_pixel(H, W)]
        if k >= 0 and tracker.eligible(int(scene.instances[k].class_id)):
            tracker.record(int(scene.instances[k].class_id))
            return g
    raise SkipSample("trace exhausted")
