"""Run configuration and named random streams."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .losses import LossWeights

SCHEMA_VERSION = 1

# every random draw in a run comes from one of these sub-streams of the seed
STREAMS = {"dataset": 0, "init": 1, "expansion": 2, "sampler": 3}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name], *map(int, extra)])


@dataclass
class SynthConfig:
    counts: dict[str, int] = field(default_factory=lambda: {"CFP": 100, "OCT": 10})
    image_size: int = 64
    categories: tuple[str, ...] = ("lesion", "scar")
    negative_fraction: float = 0.1
    lesions_per_image: tuple[int, int] = (1, 1)
    distractors_per_image: tuple[int, int] = (1, 2)
    ambiguous: bool = False
    train_fraction: float = 0.9
    val_fraction: float = 0.0

    def __post_init__(self):
        self.categories = tuple(self.categories)
        self.lesions_per_image = tuple(self.lesions_per_image)
        self.distractors_per_image = tuple(self.distractors_per_image)
        if self.image_size < 64:
            raise ValueError(f"image_size must be >= 64, got {self.image_size}")
        for m, c in self.counts.items():
            if c <= 0:
                raise ValueError(f"sample count for modality {m!r} must be positive, got {c}")


@dataclass
class RunConfig:
    seed: int = 0
    # model geometry
    input_size: int = 224
    det_grid: int = 16
    clip_grid: int = 8
    d_model: int = 32
    d_k: int = 32
    d_text: int = 32
    heads: int = 1
    queries: int = 10
    fap_hidden: int | None = None
    fap_normalize: bool = False
    ms_hidden: int = 16
    mask_hidden: int = 8
    crop_size: int = 24
    crop_margin: float = 0.25
    # ablation switches
    use_affm: bool = True
    use_ms: bool = True
    contrastive_text: str = "enhanced"  # or "raw"
    # objective
    loss: LossWeights = field(default_factory=LossWeights)
    # optimisation
    learning_rate: float = 5e-5
    epochs: int = 200
    warmup_epochs: int = 50
    steps: int | None = None
    batch_size: int = 8
    optimizer: str = "sgd"  # "sgd" (optionally with momentum) or "adam"
    momentum: float = 0.0
    freeze_mask_predictor: bool = False
    # prompting
    box_expansion: tuple[float, float] = (0.05, 0.10)
    expand_in_training: bool = False
    conf_threshold: float = 0.35
    # data and paths
    synth: SynthConfig = field(default_factory=SynthConfig)
    dataset_path: str = "data"
    checkpoint_path: str = "model.clps"

    def __post_init__(self):
        if isinstance(self.loss, Mapping):
            self.loss = LossWeights.from_dict(self.loss)
        if isinstance(self.synth, Mapping):
            self.synth = SynthConfig(**self.synth)
        self.box_expansion = tuple(self.box_expansion)
        if self.d_k != self.d_model:
            raise ValueError(f"d_k ({self.d_k}) must equal d_model ({self.d_model}) for residual fusion")
        if self.d_text != self.d_model:
            raise ValueError(
                f"d_text ({self.d_text}) must equal d_model ({self.d_model}) for the contrastive term")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.contrastive_text not in ("enhanced", "raw"):
            raise ValueError(f"contrastive_text must be 'enhanced' or 'raw', got {self.contrastive_text!r}")
        if self.crop_size % 2:
            raise ValueError(f"crop_size must be even, got {self.crop_size}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)
