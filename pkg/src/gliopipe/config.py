"""Model/training profiles and the strict JSON run configuration."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .preprocess import PreprocessConfig

TASKS = ("localize", "segment", "classify")

# Trainable parameter counts reported for the full-size networks at 128^3.
REFERENCE_PARAMETER_COUNTS = {"localize": 64_436_912, "segment": 94_673_582, "classify": 54_560_482}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelProfile:
    preset: str = "toy"
    stages: int = 3
    channels: tuple = (8, 16, 32)
    in_channels: int = 1
    n_classes: int = 5
    se_ratio: int = 4
    spatial_attention: bool = True
    gat: bool = True
    gat_stages: str = "coarsest"       # "coarsest" | "all"
    dropout: float = 0.1
    softmax_mode: str = "class"        # "class" | "spatial"
    input_mode: str = "fused"          # "fused" | "stacked"
    norm: str = "instance"             # "instance" | "none"
    classifier_channels: tuple = (4, 8, 8, 16, 16, 16)
    classifier_downsample: tuple = (False, True, True, True, True, False)
    classifier_stem_stride: int = 2
    image_shape: tuple = (32, 32, 32)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "classifier_channels", tuple(int(c) for c in self.classifier_channels))
        object.__setattr__(self, "classifier_downsample", tuple(bool(c) for c in self.classifier_downsample))
        object.__setattr__(self, "image_shape", tuple(int(c) for c in self.image_shape))
        if self.stages < 1 or len(self.channels) != self.stages:
            raise ConfigError(f"need one channel width per stage ({self.stages}), got {self.channels}")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"encoder channels must strictly increase, got {self.channels}")
        if min(self.channels) < 1 or self.in_channels < 1 or self.n_classes < 2:
            raise ConfigError("channel and class counts must be positive (>= 2 classes)")
        if len(self.classifier_channels) != 6 or len(self.classifier_downsample) != 6:
            raise ConfigError("classifier needs six SE-residual blocks")
        if self.gat_stages not in ("coarsest", "all"):
            raise ConfigError(f"gat_stages must be 'coarsest' or 'all', got {self.gat_stages!r}")
        if self.softmax_mode not in ("class", "spatial"):
            raise ConfigError(f"softmax_mode must be 'class' or 'spatial', got {self.softmax_mode!r}")
        if self.norm not in ("instance", "none"):
            raise ConfigError(f"norm must be 'instance' or 'none', got {self.norm!r}")
        if self.input_mode not in ("fused", "stacked"):
            raise ConfigError(f"input_mode must be 'fused' or 'stacked', got {self.input_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.se_ratio < 1 or self.classifier_stem_stride < 1:
            raise ConfigError("se_ratio and classifier_stem_stride must be >= 1")

    @property
    def divisor(self):
        """Spatial extents must be multiples of this for the encoder-decoder models."""
        return 2 ** self.stages

    @classmethod
    def toy(cls, **overrides):
        return replace(cls(), **overrides)

    @classmethod
    def paper(cls, **overrides):
        base = cls(
            preset="paper",
            stages=4,
            channels=(64, 128, 256, 512),
            se_ratio=16,
            gat_stages="all",
            classifier_channels=(64, 128, 256, 512, 1024, 2048),
            classifier_downsample=(False, True, True, True, True, True),
            classifier_stem_stride=1,
            image_shape=(128, 128, 128),
        )
        return replace(base, **overrides)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 0.05
    patience: int = 5
    lr_factor: float = 2.0
    seed: int = 0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    split: float = 0.8
    boost_rounds: int = 50
    augment: bool = False              # random axis flips of training inputs

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.lr_factor <= 1.0:
            raise ConfigError("lr_factor must be > 1")
        if not 0.0 < self.split < 1.0:
            raise ConfigError("split must lie in (0, 1)")
        if self.patience < 1 or self.boost_rounds < 1:
            raise ConfigError("patience and boost_rounds must be >= 1")

    @classmethod
    def paper(cls, task):
        lr = {"localize": 1e-3, "segment": 1e-4, "classify": 1e-3}[task]
        return cls(epochs=100, batch_size=8, lr=lr)


# Desk-scale learning rates; plain SGD on a 32^3 toy set needs far larger
# steps than the full-scale settings.
TOY_LR = {"localize": 0.2, "segment": 0.2, "classify": 0.02}


def toy_train_config(task, **overrides):
    # 32 training volumes are too few for the grading backbone without flips
    return replace(TrainConfig(lr=TOY_LR[task], augment=task == "classify"), **overrides)


# ---------------------------------------------------------------------------
# run configuration (JSON)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    task: str = "segment"
    seed: int = 0
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelProfile = field(default_factory=ModelProfile)
    train: TrainConfig = field(default_factory=TrainConfig)
    modalities: tuple = ("t1ce", "flair", "t2")

    def to_dict(self):
        return {
            "task": self.task,
            "seed": self.seed,
            "modalities": list(self.modalities),
            "preprocess": asdict(self.preprocess),
            "model": _jsonable(asdict(self.model)),
            "train": asdict(self.train),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _build(cls, section, data):
    if not isinstance(data, dict):
        raise ConfigError(f"[{section}] must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def parse_run_config(data, env=None) -> RunConfig:
    """Build a RunConfig from a parsed JSON object, rejecting unknown keys.

    ``model.preset`` selects the base profile that the other model keys
    override. ``GLIOPIPE_SEED`` in ``env`` overrides the top-level seed,
    which also seeds the model and training sections.
    """
    env = os.environ if env is None else env
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    top = {"task", "seed", "preprocess", "model", "train", "modalities"}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    task = data.get("task", "segment")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    seed = int(data.get("seed", 0))
    if env.get("GLIOPIPE_SEED"):
        try:
            seed = int(env["GLIOPIPE_SEED"])
        except ValueError:
            raise ConfigError("GLIOPIPE_SEED must be an integer") from None

    pre = _build(PreprocessConfig, "preprocess", data.get("preprocess", {}))

    model_data = dict(data.get("model", {}))
    preset = model_data.get("preset", "toy")
    if preset not in ("toy", "paper"):
        raise ConfigError(f"model.preset must be 'toy' or 'paper', got {preset!r}")
    unknown = sorted(set(model_data) - {f.name for f in fields(ModelProfile)})
    if unknown:
        raise ConfigError(f"unknown key(s) in [model]: {', '.join(unknown)}")
    base = ModelProfile.paper() if preset == "paper" else ModelProfile.toy()
    try:
        model = replace(base, **{**model_data, "seed": seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[model]: {exc}") from None

    train_data = dict(data.get("train", {}))
    train_base = TrainConfig.paper(task) if preset == "paper" else toy_train_config(task)
    unknown = sorted(set(train_data) - {f.name for f in fields(TrainConfig)})
    if unknown:
        raise ConfigError(f"unknown key(s) in [train]: {', '.join(unknown)}")
    try:
        train = replace(train_base, **{**train_data, "seed": seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[train]: {exc}") from None

    modalities = tuple(data.get("modalities", ("t1ce", "flair", "t2")))
    return RunConfig(task=task, seed=seed, preprocess=pre, model=model, train=train, modalities=modalities)


def load_run_config(path, env=None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_run_config(data, env)
