"""Run configuration: JSON schema, strict validation, and hashing.

A single JSON file carries every hyperparameter; command-line flags only
select files and modes, so the config is the experiment's provenance record.
Unknown or ill-typed keys are rejected by name.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .aligner import PHONEME_WISE, REWARD_MODES
from .objectives import SoftDTWConfig
from .signal import SpectralConfig
from .vocoder import DecoderConfig, DiscriminatorConfig


class ConfigError(ValueError):
    """Invalid configuration file; the message names the offending key."""


@dataclass
class DataConfig:
    metadata_path: str = "metadata.csv"
    wav_dir: str = "wavs"
    val_size: int = 300
    test_size: int = 300
    tokenizer: str = "char"
    phoneme_vocab_size: int | None = None

    def __post_init__(self):
        if self.tokenizer not in ("char", "phoneme_ids"):
            raise ConfigError(f"tokenizer must be 'char' or 'phoneme_ids', got {self.tokenizer!r}")
        if self.tokenizer == "phoneme_ids" and not self.phoneme_vocab_size:
            raise ConfigError("phoneme_vocab_size is required with the phoneme_ids tokenizer")


@dataclass
class EncoderSection:
    hidden_dim: int = 256
    kernel_sizes: tuple[int, ...] = (3, 7, 11)
    dilations: tuple[tuple[int, ...], ...] = ((1, 3, 5), (1, 3, 5), (1, 3, 5))
    num_blocks: int = 3


@dataclass
class PredictorSection:
    filter_dim: int = 256
    kernel_size: int = 3
    dropout: float = 0.1


@dataclass
class ModelConfig:
    encoder: EncoderSection = field(default_factory=EncoderSection)
    duration_predictor: PredictorSection = field(default_factory=PredictorSection)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 2e-4
    betas: tuple[float, float] = (0.8, 0.99)
    weight_decay: float = 0.01
    lr_decay: float = 0.999
    max_steps: int = 5000
    alpha: float = 2.0
    reward_mode: str = PHONEME_WISE
    reward_scope: str = "segment"
    compute_shift_pass: bool = True
    gamma: int = 128
    sigma2: float = 10.0
    lambda_adv: float = 1.0
    lambda_mel: float = 45.0
    lambda_dur_total: float = 0.1
    lambda_re: float = 1.0
    use_soft_dtw: bool = False
    soft_dtw: SoftDTWConfig = field(default_factory=SoftDTWConfig)
    use_feature_matching: bool = False
    lambda_fm: float = 2.0
    seed: int = 1234
    checkpoint_interval: int = 1000
    validation_interval: int = 500

    def __post_init__(self):
        for name in ("batch_size", "lr", "lr_decay", "max_steps", "gamma", "sigma2",
                     "checkpoint_interval", "validation_interval"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.alpha < 0:
            raise ConfigError("train.alpha must be nonnegative")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError(f"train.reward_mode must be one of {REWARD_MODES}")
        if self.reward_scope not in ("segment", "utterance"):
            raise ConfigError("train.reward_scope must be 'segment' or 'utterance'")


@dataclass
class Config:
    audio: SpectralConfig = field(default_factory=SpectralConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.audio.hop != self.model.decoder.total_upsample:
            raise ConfigError(
                f"audio.hop ({self.audio.hop}) must equal the decoder's total "
                f"upsampling factor ({self.model.decoder.total_upsample})"
            )


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _section(cls, payload, name: str):
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ConfigError(f"section '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    for key in payload:
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in section '{name}'")
    kwargs = {k: _tuplify(v) for k, v in payload.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{name}': {exc}") from exc


def config_from_dict(payload: dict) -> Config:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    known = {"audio", "data", "model", "train"}
    for key in payload:
        if key not in known:
            raise ConfigError(f"unknown key '{key}' at config root")
    model_payload = payload.get("model") or {}
    if not isinstance(model_payload, dict):
        raise ConfigError("section 'model' must be an object")
    for key in model_payload:
        if key not in {"encoder", "duration_predictor", "decoder", "discriminator"}:
            raise ConfigError(f"unknown key '{key}' in section 'model'")
    train_payload = dict(payload.get("train") or {})
    soft_dtw_payload = train_payload.pop("soft_dtw", None)

    model = ModelConfig(
        encoder=_section(EncoderSection, model_payload.get("encoder"), "model.encoder"),
        duration_predictor=_section(
            PredictorSection, model_payload.get("duration_predictor"), "model.duration_predictor"
        ),
        decoder=_section(DecoderConfig, model_payload.get("decoder"), "model.decoder"),
        discriminator=_section(
            DiscriminatorConfig, model_payload.get("discriminator"), "model.discriminator"
        ),
    )
    train = _section(TrainConfig, train_payload, "train")
    if soft_dtw_payload is not None:
        train.soft_dtw = _section(SoftDTWConfig, soft_dtw_payload, "train.soft_dtw")
    return Config(
        audio=_section(SpectralConfig, payload.get("audio"), "audio"),
        data=_section(DataConfig, payload.get("data"), "data"),
        model=model,
        train=train,
    )


def load_config(path: str | Path) -> Config:
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(payload)


def config_to_dict(cfg: Config) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def save_config(path: str | Path, cfg: Config) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))


def config_hash(cfg: Config) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()
