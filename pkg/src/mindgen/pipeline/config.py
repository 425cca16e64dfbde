"""Run configuration: one JSON document drives a whole pipeline run.

Every output directory receives a copy of the resolved configuration.
"""

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from ..alignment import AlignConfig
from ..conditioning import AdapterConfig, DenoiserConfig
from ..encoders import BootstrapConfig, EEGEncoderConfig
from ..synthworld import DatasetConfig


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"


@dataclass
class Stage2Config:
    # text-only warm-up: trains the backbone as a plain text-to-image model,
    # standing in for a pretrained frozen diffusion model
    warmup_steps: int = 2500
    warmup_batch_size: int = 16
    warmup_lr: float = 1e-3
    warmup_text_dropout: float = 0.1
    # adapter phase
    adapter_steps: int = 2500
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    p_text: float = 0.05
    p_eeg: float = 0.05
    p_both: float = 0.05
    train_backbone: bool = False
    lam: float = 1.0


@dataclass
class GenerationDefaults:
    steps: int = 50
    w: float = 7.5
    lam: float = 1.0
    num_samples: int = 1


@dataclass
class EvalConfig:
    split: str = "test"
    steps: int = 50
    w: float = 7.5
    lam: float = 1.0
    num_samples: int = 1
    oracle_epochs: int = 12
    oracle_lr: float = 1e-3
    oracle_min_val_accuracy: float = 0.95


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    generation: GenerationDefaults = field(default_factory=GenerationDefaults)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        # the adapter consumes stage-1 embeddings and modulates denoiser sites
        self.align.encoder.channels = self.dataset.channels
        self.align.encoder.timesteps = self.dataset.timesteps
        self.adapter.embed_dim = self.align.encoder.out_dim
        self.adapter.site_widths = self.denoiser.site_widths
        self.adapter.lam = self.stage2.lam

    def to_dict(self):
        d = asdict(self)
        d["align"] = self.align.to_dict()
        d["dataset"] = self.dataset.to_dict()
        return d

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)

        def parse_adapter(d):
            d = dict(d)
            if "site_widths" in d:
                d["site_widths"] = tuple(d["site_widths"])
            return AdapterConfig(**d)

        parsers = {
            "dataset": DatasetConfig.from_dict,
            "bootstrap": lambda d: BootstrapConfig(**d),
            "align": AlignConfig.from_dict,
            "schedule": lambda d: ScheduleConfig(**d),
            "denoiser": lambda d: DenoiserConfig(**d),
            "adapter": parse_adapter,
            "stage2": lambda d: Stage2Config(**d),
            "generation": lambda d: GenerationDefaults(**d),
            "eval": lambda d: EvalConfig(**d),
        }
        kwargs = {}
        for key, parse in parsers.items():
            if key in doc:
                kwargs[key] = parse(doc.pop(key))
        if "seed" in doc:
            kwargs["seed"] = doc.pop("seed")
        if doc:
            raise ValueError(f"unknown config keys: {sorted(doc)}")
        return cls(**kwargs)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def load_run_config(path=None) -> RunConfig:
    return RunConfig() if path is None else RunConfig.load(path)
