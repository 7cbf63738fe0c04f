"""Pipeline configuration: one YAML file, overridable from the command line."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .embed_train import TrainConfig
from .errors import ConfigError, ShapeMismatch
from .featnet import INPUT_SHAPE, REFERENCE_LAYERS, NetSpec, validate_spec
from .geom_align import DEFAULT_CANONICAL
from .landmarks import DEFAULT_PATCH_RADIUS, DEFAULT_RIDGE, DEFAULT_STAGES, FEATURE_FNS
from .template_eval import POOLINGS, SetupPolicy


@dataclass
class LandmarkConfig:
    n_stages: int = DEFAULT_STAGES
    patch_radius: int = DEFAULT_PATCH_RADIUS
    ridge_lambda: float = DEFAULT_RIDGE
    feature_fn: str = "unit"


@dataclass
class DetectConfig:
    iou_threshold: float = 0.3
    min_score: float | None = None
    features: str = "gradient"  # or "identity"


@dataclass
class EvalConfig:
    pooling: str = "mean"  # or "max"


@dataclass
class PipelineConfig:
    seed: int = 0
    policy: SetupPolicy = SetupPolicy.SETUP1
    canonical: tuple = DEFAULT_CANONICAL
    net_layers: tuple = tuple(REFERENCE_LAYERS)
    net_input: tuple = INPUT_SHAPE
    train: TrainConfig = field(default_factory=TrainConfig)
    landmarks: LandmarkConfig = field(default_factory=LandmarkConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: dict = field(default_factory=dict)

    def net_spec(self) -> NetSpec:
        return NetSpec.from_lines(self.net_layers)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed if seed is None else seed)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "policy": self.policy.value,
            "align": {"canonical": [list(p) for p in self.canonical]},
            "net": {"input_shape": list(self.net_input), "layers": list(self.net_layers)},
            "train": {k: v for k, v in dataclasses.asdict(self.train).items() if k != "seed"},
            "landmarks": dataclasses.asdict(self.landmarks),
            "detect": dataclasses.asdict(self.detect),
            "eval": dataclasses.asdict(self.eval),
            "paths": dict(self.paths),
        }


def _section(raw, name) -> dict:
    val = raw.get(name) or {}
    if not isinstance(val, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    return val


def _build(cls, values: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def config_from_dict(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - {"seed", "policy", "align", "net", "train", "landmarks", "detect", "eval", "paths"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = PipelineConfig()
    try:
        cfg.seed = int(raw.get("seed", 0))
        cfg.policy = SetupPolicy.parse(raw.get("policy", "setup1"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    align = _section(raw, "align")
    if "canonical" in align:
        pts = align["canonical"]
        try:
            cfg.canonical = tuple((float(x), float(y)) for x, y in pts)
        except (TypeError, ValueError):
            raise ConfigError("align.canonical must be three [x, y] pairs") from None
        if len(cfg.canonical) != 3:
            raise ConfigError("align.canonical must be three [x, y] pairs")
    net = _section(raw, "net")
    if "layers" in net:
        cfg.net_layers = tuple(str(s) for s in net["layers"])
    if "input_shape" in net:
        cfg.net_input = tuple(int(v) for v in net["input_shape"])
    try:
        validate_spec(cfg.net_spec(), cfg.net_input)
    except (ValueError, ShapeMismatch) as exc:
        raise ConfigError(f"net: {exc}") from exc
    train = dict(_section(raw, "train"))
    train.setdefault("seed", cfg.seed)
    cfg.train = _build(TrainConfig, train, "train")
    cfg.landmarks = _build(LandmarkConfig, _section(raw, "landmarks"), "landmarks")
    if cfg.landmarks.feature_fn not in FEATURE_FNS:
        raise ConfigError(f"landmarks.feature_fn must be one of {sorted(FEATURE_FNS)}")
    cfg.detect = _build(DetectConfig, _section(raw, "detect"), "detect")
    cfg.eval = _build(EvalConfig, _section(raw, "eval"), "eval")
    if cfg.eval.pooling not in POOLINGS:
        raise ConfigError(f"eval.pooling must be one of {list(POOLINGS)}")
    cfg.paths = {k: str(v) for k, v in _section(raw, "paths").items()}
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad YAML in {path}: {exc}") from exc
    return config_from_dict(raw or {})


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
