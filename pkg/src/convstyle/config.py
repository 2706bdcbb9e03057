"""Model, training and experiment configuration."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml


@dataclass
class ModelConfig:
    n_joint: int = 0              # filled from vocabulary tables
    n_speakers: int = 4
    d_fe: int = 256
    d_spk: int = 32
    d_hpc: int = 16
    tag_dim: int = 64
    enc_conv_layers: int = 3
    enc_kernel: int = 5
    enc_dropout: float = 0.5
    predictor_hidden: int = 256
    pos_dim: int = 32
    prenet_dim: int = 256
    prenet_dropout: float = 0.5
    decoder_dim: int = 512
    decoder_layers: int = 2
    postnet_channels: int = 512
    postnet_layers: int = 5
    postnet_kernel: int = 5
    hpc_pred_hidden: int = 128
    adv_hidden: int = 256
    adv_lambda: float = 1.0
    adv_warmup_steps: int = 0
    w_dur: float = 1.0
    w_adv: float = 0.02
    range_floor: float = 1e-2

    @classmethod
    def toy(cls, **overrides) -> ModelConfig:
        """Every width of the default model scaled by 1/4."""
        base = dict(d_fe=64, d_spk=8, d_hpc=4, tag_dim=16, predictor_hidden=64, pos_dim=8,
                    prenet_dim=64, decoder_dim=128, postnet_channels=128, hpc_pred_hidden=32,
                    adv_hidden=64, enc_dropout=0.1, prenet_dropout=0.1)
        base.update(overrides)
        return cls(**base)

    @property
    def d_enc(self) -> int:
        return self.d_fe + self.d_spk + self.d_hpc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class VCConfig:
    n_speakers: int = 4
    n_codes: int = 32             # binary variables per frame
    content_dim: int = 768
    encoder_rate: float = 50.0    # content frames per second
    encoder_width: int = 256
    encoder_layers: int = 12
    freeze_layers: int = 6
    frontend_bins: int = 80
    temperature: float = 1.0
    train_mode: str = 'hard'      # straight-through during training; 'relaxed' also allowed
    resample_sigma: float = 0.5   # Gaussian width (TTS frames) used when resampling content
    pos_dim: int = 32
    prenet_dim: int = 256
    prenet_dropout: float = 0.5
    decoder_dim: int = 512
    decoder_layers: int = 2
    postnet_channels: int = 512
    postnet_layers: int = 5
    postnet_kernel: int = 5

    @classmethod
    def toy(cls, **overrides) -> VCConfig:
        base = dict(encoder_width=64, encoder_layers=4, freeze_layers=2, pos_dim=8,
                    prenet_dim=64, prenet_dropout=0.1, decoder_dim=128, postnet_channels=128)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 500
    hpc_steps: int = 300

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ExperimentSpec:
    name: str
    system: str                              # Base | Adv | Aug
    workspace: str = '.'
    manifest: str = 'manifests/recorded.jsonl'
    augmented_manifest: str | None = None
    heldout_manifest: str | None = None
    lexicon: str | None = None
    output_dir: str = 'runs/{name}'
    preset: str = 'toy'
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    top_k: int = 1
    target_speaker: int = 0                  # voice used for ranking synthesis
    hpc_offsets: dict = field(default_factory=dict)   # style -> [2, 3] offsets

    @classmethod
    def load(cls, path: str | Path, overrides: dict | None = None) -> ExperimentSpec:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        data.update(overrides or {})
        return cls(**data)

    def model_config(self, n_speakers: int, n_joint: int) -> ModelConfig:
        maker = ModelConfig.toy if self.preset == 'toy' else ModelConfig
        return maker(**{**self.model, 'n_speakers': n_speakers, 'n_joint': n_joint})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def out_dir(self) -> Path:
        return Path(self.workspace) / self.output_dir.format(name=self.name)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_hash(d: dict) -> str:
    return hashlib.sha1(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]
