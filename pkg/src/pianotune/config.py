"""Configuration management for the pianotune pipeline."""

import json
import os
import warnings
from enum import Enum
from pathlib import Path
from typing import Any, List, Optional, Tuple

from pydantic import BaseModel, Field, SecretStr, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from pianotune.errors import ConfigurationError
from pianotune.models import RewardSpec


class Settings(BaseSettings):
    """Process-level settings loaded from environment variables.

    Uses PIANOTUNE_ prefix for all environment variables.
    Supports loading from .env file.

    Examples:
        PIANOTUNE_DEBUG=true
        PIANOTUNE_SCORER_URL=http://127.0.0.1:8123
        PIANOTUNE_RENDER_WORKERS=4
    """

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="PIANOTUNE_",
        case_sensitive=False,
        extra="ignore",  # Ignore unknown environment variables
    )

    debug: bool = Field(
        default=False,
        description="Enable debug mode with verbose logging",
    )

    # Remote scorer
    scorer_url: Optional[str] = Field(
        default=None,
        description="Overrides the remote scorer base URL from the config file",
    )
    scorer_token: Optional[SecretStr] = Field(
        default=None,
        description="Bearer token passed through to the remote scorer",
    )

    # Parallelism
    render_workers: int = Field(
        default=4,
        description="Maximum number of concurrent renders (and external renderer subprocesses)",
        ge=1,
        le=256,
    )
    torch_threads: Optional[int] = Field(
        default=None,
        description="Number of intra-op threads for torch (default: torch's choice)",
        ge=1,
    )

    @model_validator(mode="after")
    def warn_unknown_pianotune_vars(self) -> "Settings":
        """Warn about unknown PIANOTUNE_ prefixed environment variables."""
        known_fields = {name.upper() for name in type(self).model_fields.keys()}

        for env_var in os.environ:
            if env_var.startswith("PIANOTUNE_"):
                field_name = env_var[len("PIANOTUNE_") :]

                if field_name.upper() not in known_fields:
                    warnings.warn(
                        f"Unknown environment variable '{env_var}' will be ignored. "
                        f"Valid PIANOTUNE_ variables are: {', '.join(sorted('PIANOTUNE_' + name.upper() for name in type(self).model_fields.keys()))}",
                        UserWarning,
                        stacklevel=2,
                    )

        return self


settings = Settings()


SUPPORTED_TIME_SIGNATURES: Tuple[Tuple[int, int], ...] = (
    (1, 4),
    (2, 4),
    (3, 4),
    (4, 4),
    (5, 4),
    (6, 4),
    (3, 8),
    (6, 8),
    (9, 8),
    (12, 8),
)


class TokenizerConfig(BaseModel):
    """Value ranges enumerated by the vocabulary."""

    pitch_min: int = Field(default=21, ge=0, le=127)
    pitch_max: int = Field(default=108, ge=0, le=127)
    time_signatures: List[Tuple[int, int]] = Field(
        default_factory=lambda: list(SUPPORTED_TIME_SIGNATURES)
    )
    tempo_bins: int = Field(default=32, ge=1)
    tempo_min: float = Field(default=40.0, gt=0)
    tempo_max: float = Field(default=250.0, gt=0)
    steps_per_quarter: int = Field(default=8, ge=1)
    velocity_bins: int = Field(default=20, ge=1, le=127)
    fine_duration_quarters: int = Field(
        default=4, ge=1, description="Durations up to this many beats use every grid step"
    )
    max_duration_quarters: int = Field(
        default=16, ge=1, description="Beyond the fine range, whole beats up to this length"
    )
    ticks_per_quarter: int = Field(default=480, ge=1, description="Resolution of decoded scores")

    @model_validator(mode="after")
    def check_ranges(self) -> "TokenizerConfig":
        if self.pitch_min > self.pitch_max:
            raise ValueError("empty pitch range")
        if not self.time_signatures:
            raise ValueError("at least one time signature is required")
        if self.tempo_min >= self.tempo_max:
            raise ValueError("empty tempo range")
        if self.max_duration_quarters < self.fine_duration_quarters:
            raise ValueError("max_duration_quarters must not be below fine_duration_quarters")
        for numerator, denominator in self.time_signatures:
            if numerator < 1 or denominator < 1 or denominator & (denominator - 1):
                raise ValueError(f"invalid time signature {numerator}/{denominator}")
        return self


class ModelConfig(BaseModel):
    """Shape of the causal transformer. Desk-scale defaults; 4 layers, d_model 512, 8 heads is the full size."""

    n_layers: int = Field(default=2, ge=1)
    d_model: int = Field(default=128, ge=1)
    n_heads: int = Field(default=4, ge=1)
    d_ff: int = Field(default=512, ge=1)
    vocab_size: int = Field(default=245, ge=2)
    max_seq_len: int = Field(default=512, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def check_heads(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class PretrainConfig(BaseModel):
    """Desk-scale pretraining defaults."""

    epochs: int = Field(default=3, ge=1)
    batch_size: int = Field(default=16, ge=1)
    crop_len: int = Field(default=512, ge=2)
    learning_rate: float = Field(default=1e-3, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    holdout_fraction: float = Field(default=0.1, ge=0, lt=1)
    validation_fraction: float = Field(default=0.1, ge=0, lt=1)
    seed: int = 0


class PromptSource(str, Enum):
    PROCEDURAL = "procedural"
    DATASET = "dataset"


class GrpoConfig(BaseModel):
    """Tuning loop settings."""

    prompts_per_iter: int = Field(default=8, ge=1)
    completions_per_prompt: int = Field(default=8, ge=2)
    temperature: float = Field(default=1.0, ge=0)
    beta: float = Field(default=0.04, ge=0)
    iterations: int = Field(default=200, ge=1)
    lr_start: float = Field(default=1e-4, ge=0)
    max_new_tokens: int = Field(default=256, ge=1)
    audio_crop_seconds: float = Field(default=10.0, gt=0, le=10.0)
    seed: int = 0
    prompt_source: PromptSource = PromptSource.PROCEDURAL
    prompt_len: int = Field(default=32, ge=1, description="Prefix length for dataset prompts")
    advantage_epsilon: float = Field(default=1e-4, ge=0)
    updates_per_batch: int = Field(default=1, ge=1)
    checkpoint_every: int = Field(default=50, ge=1)

    @property
    def rollouts_per_iter(self) -> int:
        return self.prompts_per_iter * self.completions_per_prompt


class RendererKind(str, Enum):
    BUILTIN = "builtin"
    EXTERNAL = "external"


class RendererChoice(BaseModel):
    """Builtin additive synth, or an external soundfont renderer invoked as
    `<executable> <midi path> <soundfont path> <out wav path>`."""

    kind: RendererKind = RendererKind.BUILTIN
    name: str = "builtin"
    executable: Optional[Path] = None
    soundfont: Optional[Path] = None
    timeout_s: float = Field(default=120.0, gt=0)

    @model_validator(mode="after")
    def check_external_paths(self) -> "RendererChoice":
        if self.kind == RendererKind.EXTERNAL:
            for label, path in (("executable", self.executable), ("soundfont", self.soundfont)):
                if path is None or not path.exists():
                    raise ValueError(f"external renderer {label} not found: {path}")
        return self


class RemoteScorerConfig(BaseModel):
    base_url: str = "http://127.0.0.1:8123"
    timeout_ms: int = Field(default=30000, ge=1)
    max_retries: int = Field(default=3, ge=0)
    max_in_flight: int = Field(default=8, ge=1)
    backoff_ms: int = Field(default=200, ge=0)
    token: Optional[SecretStr] = None


class PathsConfig(BaseModel):
    corpus_dir: Optional[Path] = None
    dataset: Path = Path("data/tokens.bin")
    base_checkpoint: Path = Path("runs/base.ckpt")
    tuned_checkpoint: Path = Path("runs/tuned.ckpt")
    output_dir: Path = Path("runs/out")

    @field_validator("*", mode="before")
    @classmethod
    def validate_path(cls, v: Optional[str | Path]) -> Optional[Path]:
        """Convert string paths to Path objects."""
        if v is None or isinstance(v, Path):
            return v
        return Path(v)


class PipelineConfig(BaseModel):
    """Everything a pipeline command needs; written next to every run's outputs."""

    paths: PathsConfig = Field(default_factory=PathsConfig)
    tokenizer: TokenizerConfig = Field(default_factory=TokenizerConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    grpo: GrpoConfig = Field(default_factory=GrpoConfig)
    reward: RewardSpec = Field(default_factory=RewardSpec)
    renderer: RendererChoice = Field(default_factory=RendererChoice)
    remote_scorer: RemoteScorerConfig = Field(default_factory=RemoteScorerConfig)
    sample_rate: int = Field(default=22050, ge=1000)
    seed: int = 0

    @model_validator(mode="after")
    def propagate_seed(self) -> "PipelineConfig":
        """The top-level seed wins over component seeds that were left at default."""
        for component in (self.model, self.pretrain, self.grpo):
            if "seed" not in component.model_fields_set:
                component.seed = self.seed
        return self


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_pipeline_config(
    config_file: Path | None = None,
    overrides: dict[str, Any] | None = None,
    env: Settings | None = None,
) -> PipelineConfig:
    """Resolve a PipelineConfig: CLI overrides > environment > config file > defaults."""
    data: dict[str, Any] = {}
    if config_file is not None:
        try:
            data = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read config file {config_file}: {e}")
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config file {config_file} must contain a JSON object")

    env = env or settings
    env_layer: dict[str, Any] = {}
    if env.scorer_url:
        env_layer.setdefault("remote_scorer", {})["base_url"] = env.scorer_url
    if env.scorer_token:
        env_layer.setdefault("remote_scorer", {})["token"] = env.scorer_token.get_secret_value()

    merged = _deep_merge(_deep_merge(data, env_layer), overrides or {})
    try:
        return PipelineConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}")


def dump_pipeline_config(config: PipelineConfig) -> dict[str, Any]:
    """JSON-ready view of a config, with secrets masked."""
    data = config.model_dump(mode="json")
    if config.remote_scorer.token is not None:
        data["remote_scorer"]["token"] = "**********"
    return data


