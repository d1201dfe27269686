"""Flat ``key=value`` run configuration shared by every CLI command."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data import SyntheticSpec
from .experiments import ToyConfig
from .losses import LossConfig
from .model import FSNetConfig
from .scheduler import CostModel, SchedulerConfig
from .trainer import StageConfig, TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration; the CLI maps it to exit code 2."""


@dataclass
class RunConfig:
    seed: int = 0
    # synthetic scenes and corpus
    height: int = 32
    width: int = 32
    min_shapes: int = 2
    max_shapes: int = 5
    min_extent: int = 5
    max_extent: int = 10
    noise: float = 0.03
    n_train: int = 300
    n_val: int = 60
    balance: bool = True
    # model
    h: int = 8
    w: int = 8
    sal_h: int = 0
    sal_w: int = 0
    sigma: int = 8
    n_classes: int = 3
    sal_base: int = 16
    sal_depth: int = 3
    model_width: int = 32
    gaze_prior: float = 20.0
    sampler: str = "saliency"
    # training; the desk-scale schedule, shorter than the published one
    stage1_optimizer: str = "nadam"
    stage1_lr: float = 1e-3
    stage1_weight_decay: float = 1e-5
    stage1_iterations: int = 30
    stage1_patience: int = 20
    stage1_decay: float = 0.9
    stage2_optimizer: str = "adamw"
    stage2_lr: float = 1e-3
    stage2_weight_decay: float = 1e-5
    stage2_iterations: int = 50
    stage2_patience: int = 20
    stage2_decay: float = 0.9
    pretrain_optimizer: str = "adamw"
    pretrain_lr: float = 2e-3
    pretrain_iterations: int = 80  # full-resolution backbone warm start; 0 disables it
    rounds: int = 1
    batch_size: int = 32
    augment: bool = True
    loss_lam: float = 1.0
    loss_gamma: float = 2.0
    loss_eps: float = 1e-6
    # scheduler and cost model
    alpha: float = 0.01
    beta: float = 0.037
    radius: int = 2
    nd_size: int = 640
    fs_size: int = 64
    # sequences and traces
    frames: int = 300
    fps: float = 30.0
    saccade_rate: float = 2.0
    still_fraction: float = 0.35
    frame_noise: float = 0.01
    gaze_threshold: float = 0.1
    # kernel ablation
    sigmas: str = "8,12,16,20"
    # paths (empty = not set)
    data: str = ""
    checkpoint: str = ""
    trace: str = ""
    sequence: str = ""

    # ------------------------------------------------------------ parsing

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def update(self, pairs: dict[str, str]) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        vals = {}
        for k, raw in pairs.items():
            k = k.replace("-", "_")
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            vals[k] = _coerce(k, raw, types[k])
        out = dataclasses.replace(self, **vals)
        out.validate()
        return out

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        pairs = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k.replace("-", "_") not in cls.keys():
                raise ConfigError(f"{path}:{n}: unknown config key {k!r}")
            pairs[k] = v
        return cls().update(pairs)

    def dump(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in dataclasses.asdict(self).items())

    def echo(self, out_dir) -> Path:
        p = Path(out_dir) / "config.txt"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.dump())
        return p

    # ------------------------------------------------------------ views

    def validate(self) -> None:
        try:
            self.scene(), self.model(), self.train(), self.scheduler(False)
            self.sigma_list()
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None
        if self.n_train < 1 or self.n_val < 1 or self.frames < 1 or self.fps <= 0:
            raise ConfigError("n_train, n_val, frames and fps must be positive")
        if not 0 <= self.still_fraction <= 1 or self.saccade_rate < 0 or self.pretrain_iterations < 0:
            raise ConfigError("still_fraction must lie in [0, 1]; rates and iterations must be non-negative")
        for opt in (self.stage1_optimizer, self.stage2_optimizer, self.pretrain_optimizer):
            if opt.lower() not in ("nadam", "adamw", "adam"):
                raise ConfigError(f"unknown optimizer {opt!r}")
        if self.fs_size > self.nd_size:
            raise ConfigError("fs_size cannot exceed nd_size")

    def scene(self) -> SyntheticSpec:
        return SyntheticSpec(self.height, self.width, self.min_shapes, self.max_shapes,
                             self.min_extent, self.max_extent, noise=self.noise)

    def model(self, **kw) -> FSNetConfig:
        d = dict(src_h=self.height, src_w=self.width, h=self.h, w=self.w, sal_h=self.sal_h, sal_w=self.sal_w,
                 sigma=self.sigma, n_classes=self.n_classes, sal_base=self.sal_base, sal_depth=self.sal_depth,
                 width=self.model_width, gaze_prior=self.gaze_prior, sampler=self.sampler)
        d.update(kw)
        return FSNetConfig(**d)

    def _stage(self, prefix: str) -> StageConfig:
        g = lambda k, default=None: getattr(self, f"{prefix}_{k}", default)  # noqa: E731
        return StageConfig(g("optimizer"), g("lr"), g("weight_decay", self.stage2_weight_decay),
                           g("iterations"), g("patience", self.stage2_patience), g("decay", self.stage2_decay))

    def train(self) -> TrainConfig:
        return TrainConfig(self._stage("stage1"), self._stage("stage2"), self.rounds, self.batch_size, self.seed,
                           self.augment, LossConfig(self.loss_lam, self.loss_gamma, self.loss_eps))

    def pretrain(self) -> StageConfig:
        return self._stage("pretrain")

    def toy(self) -> ToyConfig:
        return ToyConfig(self.seed, self.n_train, self.n_val, self.scene(), self.model(), self.pretrain(),
                         self.train())

    def scheduler(self, with_costs: bool = True) -> SchedulerConfig:
        costs = CostModel.from_config(self.cost_model_config(), self.radius) if with_costs else None
        return SchedulerConfig(self.alpha, self.beta, self.radius, costs)

    def cost_model_config(self) -> FSNetConfig:
        return self.model(src_h=self.nd_size, src_w=self.nd_size, h=self.fs_size, w=self.fs_size, sal_h=0, sal_w=0)

    def sigma_list(self) -> list[int]:
        try:
            out = [int(s) for s in self.sigmas.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"sigmas must be comma-separated integers, got {self.sigmas!r}") from None
        if not out or min(out) < 1:
            raise ConfigError("sigmas must be positive integers")
        return out


def _coerce(key: str, raw, typ):
    if not isinstance(raw, str):
        return raw
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {typ}, got {raw!r}") from None
    return raw


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)
