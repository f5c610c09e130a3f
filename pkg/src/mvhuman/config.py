"""Experiment configuration: presets, YAML IO, and config hashing.

The toy preset runs the whole pipeline at desk scale in minutes; the full
preset records the published-scale settings (512 px, 20 views, two-stage
30k/15k step schedule) without being runnable here.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .attention import default_view_selection
from .errors import ConfigError
from .refine import RefinementConfig


@dataclass
class DataConfig:
    resolution: int = 64
    n_views: int = 8
    train_seeds: tuple[int, ...] = tuple(range(1, 17))
    test_seeds: tuple[int, ...] = tuple(range(101, 105))
    elevation_seed: int = 0
    body_stacks: int = 12
    body_sectors: int = 16
    body_definition: str | None = None   # path to a YAML body file, None = stock


@dataclass
class ModelConfig:
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    attn_levels: tuple[int, ...] = (2,)
    heads: int = 2
    d_emb: int = 64
    n_views: int = 8
    latent_resolution: int = 64
    guidance_resolution: int = 64
    guidance_strides: tuple[int, int, int, int] = (1, 1, 1, 1)
    seg_channels: int = 11
    T: int = 1000
    schedule: str = "cosine"
    view_selection: dict = field(default_factory=lambda: {
        "down2": [-72.0, 72.0], "mid": [-90.0, 90.0], "up2": [-90.0, 90.0]})


@dataclass
class TrainConfig:
    stage1_steps: int = 1200
    stage1_batch: int = 4
    stage1_lr: float = 2e-3
    stage2_steps: int = 300
    stage2_batch: int = 1
    stage2_lr: float = 1e-3
    dropout_ratio: float = 0.1
    seed: int = 0


@dataclass
class SampleConfig:
    steps: int = 25
    w: float = 1.0
    seed: int = 0


@dataclass
class ExperimentConfig:
    name: str = "toy"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    refine: RefinementConfig = field(default_factory=RefinementConfig)

    def __post_init__(self):
        factor = 1
        for s in self.model.guidance_strides:
            factor *= s
        if self.model.guidance_resolution != self.model.latent_resolution * factor:
            raise ConfigError("guidance strides do not map guidance to latent resolution")
        if self.model.n_views != self.data.n_views:
            raise ConfigError("model and data view counts must agree")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        def tup(seq):
            return tuple(seq)
        data = DataConfig(**{**d["data"],
                             "train_seeds": tup(d["data"]["train_seeds"]),
                             "test_seeds": tup(d["data"]["test_seeds"])})
        model = ModelConfig(**{**d["model"],
                               "channel_mults": tup(d["model"]["channel_mults"]),
                               "attn_levels": tup(d["model"]["attn_levels"]),
                               "guidance_strides": tup(d["model"]["guidance_strides"])})
        train = TrainConfig(**d["train"])
        sample = SampleConfig(**d["sample"])
        refine = RefinementConfig(**{**d["refine"],
                                     "cfg_scales": tup(d["refine"]["cfg_scales"]),
                                     "opt_steps": tup(d["refine"]["opt_steps"]),
                                     "denoise_steps": tup(d["refine"]["denoise_steps"])})
        return cls(name=d.get("name", "custom"), data=data, model=model,
                   train=train, sample=sample, refine=refine)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:12]


def toy_config() -> ExperimentConfig:
    return ExperimentConfig()


# Block-name mapping from the shipped view-selection table onto the
# published-scale UNet layout.
_FULL_BLOCK_MAP = {
    "down0": "DownBlock1", "down1": "DownBlock2", "down2": "DownBlock3",
    "down3": "DownBlock4", "mid": "MiddleBlock", "up3": "UpBlock1",
    "up2": "UpBlock2", "up1": "UpBlock3", "up0": "UpBlock4",
}


def full_config() -> ExperimentConfig:
    """Published-scale settings; recorded for reference, not desk-runnable."""
    table = default_view_selection()
    selection = {block: list(table.angles(row)) for block, row in _FULL_BLOCK_MAP.items()}
    return ExperimentConfig(
        name="full",
        data=DataConfig(resolution=512, n_views=20,
                        train_seeds=tuple(range(1, 2348)),
                        test_seeds=tuple(range(10000, 10095))),
        model=ModelConfig(base_channels=320, channel_mults=(1, 2, 4, 4),
                          attn_levels=(0, 1, 2, 3), heads=8, d_emb=1024,
                          n_views=20, latent_resolution=64,
                          guidance_resolution=512,
                          guidance_strides=(2, 2, 2, 1),
                          view_selection=selection),
        train=TrainConfig(stage1_steps=30000, stage1_batch=64, stage1_lr=1e-5,
                          stage2_steps=15000, stage2_batch=8, stage2_lr=1e-5),
        sample=SampleConfig(steps=25, w=3.0),
    )


PRESETS = {"toy": toy_config, "full": full_config}


def load_config(path: str | Path | None, preset: str = "toy") -> ExperimentConfig:
    if path is None:
        return PRESETS[preset]()
    with open(path) as f:
        raw = yaml.safe_load(f)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: not a config mapping")
    return ExperimentConfig.from_dict(raw)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)
