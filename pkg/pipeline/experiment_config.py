"""
Experiment configuration: pydantic models loaded from a JSON (or YAML)
document with strict key and type checking, plus its JSON Schema.
"""

import json
import logging
from pathlib import Path
from typing import Any, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config import DEFAULT_SEED, STRICT_DOCUMENT
from src.attacks import AttackConfig
from src.checkpoint import run_id as canonical_run_id
from src.classifier import EvalConfig
from src.data import BlobSpec
from src.tensor_core import derive_seed
from src.tm_trainer import TmRunConfig
from src.training import TrainConfig

logger = logging.getLogger(__name__)

ALL_STAGES = (
    "gen-data",
    "train-diffusion",
    "train-baseline",
    "adv-train-baseline",
    "gen-attack",
    "eval",
    "tm-finetune",
    "select-ckpt",
    "direct-attack",
    "report",
)


class ConfigError(ValueError):
    """Invalid experiment configuration (the message names the key path)."""


class Section(BaseModel):
    model_config = ConfigDict(**STRICT_DOCUMENT, frozen=True)


class ScheduleConfig(Section):
    num_timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


class DiffusionConfig(Section):
    time_dim: int = 32
    class_dim: int = 16
    hidden_dims: tuple[int, ...] = (128, 128)
    train: TrainConfig = TrainConfig()
    sanity_samples: int = 64
    sampler_variance: str = "beta"


class BaselineSpec(Section):
    hidden_dims: tuple[int, ...] = (128, 128)
    train: TrainConfig = TrainConfig()


class AdversarialTrainingConfig(Section):
    baseline: str = "mlp"
    attack: AttackConfig = AttackConfig(kind="pgd", iters=10)


class DirectAttackConfig(Section):
    attack: AttackConfig = AttackConfig(kind="direct_diffusion", iters=20)
    num_samples: int = 64


class TmStageConfig(Section):
    run: TmRunConfig = TmRunConfig()
    train_attack: str = "pgd"
    val_attack: str = "pgd"
    sweep_attacks: tuple[str, ...] = ()


def _default_baselines() -> dict:
    return {"mlp": BaselineSpec()}


def _default_attacks() -> dict:
    return {"fgsm": AttackConfig(kind="fgsm"), "pgd": AttackConfig(kind="pgd")}


class ExperimentConfig(Section):
    """
    Everything a run needs. (config, seed) determines every emitted number;
    component seeds derive from `seed` and the component name.
    """

    name: str = "reference"
    seed: int = DEFAULT_SEED
    output_dir: str = "outputs/runs"
    dataset: BlobSpec = BlobSpec()
    schedule: ScheduleConfig = ScheduleConfig()
    diffusion: DiffusionConfig = DiffusionConfig()
    baselines: dict[str, BaselineSpec] = Field(default_factory=_default_baselines)
    surrogate: str = "mlp"
    adversarial_training: AdversarialTrainingConfig = AdversarialTrainingConfig()
    attacks: dict[str, AttackConfig] = Field(default_factory=_default_attacks)
    evaluation: EvalConfig = EvalConfig()
    direct_attack: DirectAttackConfig = DirectAttackConfig()
    tm: TmStageConfig = TmStageConfig()
    stages: tuple[str, ...] = ALL_STAGES

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    @property
    def run_id(self) -> str:
        return canonical_run_id(self.to_dict())

    def component_seed(self, name: str, local: int = 0) -> int:
        return derive_seed(self.seed, name, local)

    def run_dir(self) -> Path:
        return Path(self.output_dir) / f"{self.name}-{self.run_id[:12]}"

    def with_seed(self, seed: Optional[int]) -> "ExperimentConfig":
        return self if seed is None else self.model_copy(update={"seed": int(seed)})

    @model_validator(mode="after")
    def _cross_checks(self) -> "ExperimentConfig":
        self.check()
        return self

    def check(self) -> None:
        """Value ranges and cross-references between sections."""
        checks = [
            ("dataset", self.dataset.validate),
            ("diffusion.train", self.diffusion.train.validate),
            ("evaluation", lambda: self.evaluation.validate(self.dataset.num_classes)),
            ("tm.run", self.tm.run.validate),
            ("adversarial_training.attack", self.adversarial_training.attack.validate),
            ("direct_attack.attack", self.direct_attack.attack.validate),
        ]
        checks += [(f"attacks.{name}", attack.validate) for name, attack in self.attacks.items()]
        checks += [(f"baselines.{name}.train", spec.train.validate)
                   for name, spec in self.baselines.items()]
        for path, check in checks:
            try:
                check()
            except ValueError as exc:
                raise ConfigError(f"{path}: {exc}") from exc

        if self.schedule.num_timesteps < 2 or not \
                0 < self.schedule.beta_start <= self.schedule.beta_end < 1:
            raise ConfigError("schedule: need num_timesteps >= 2 and 0 < beta_start <= beta_end < 1")
        if self.diffusion.sampler_variance not in ("beta", "posterior"):
            raise ConfigError(f"diffusion.sampler_variance: unknown value {self.diffusion.sampler_variance}")
        if not self.baselines:
            raise ConfigError("baselines: at least one baseline is required")
        if self.surrogate not in self.baselines:
            raise ConfigError(f"surrogate: '{self.surrogate}' is not a declared baseline")
        if self.adversarial_training.baseline not in self.baselines:
            raise ConfigError(
                f"adversarial_training.baseline: '{self.adversarial_training.baseline}' is not a declared baseline"
            )
        if self.adversarial_training.attack.kind != "pgd":
            raise ConfigError("adversarial_training.attack.kind: must be 'pgd'")
        for name, attack in self.attacks.items():
            if attack.kind == "direct_diffusion":
                raise ConfigError(f"attacks.{name}.kind: direct attacks belong in direct_attack")
        for key in ("train_attack", "val_attack"):
            if getattr(self.tm, key) not in self.attacks:
                raise ConfigError(f"tm.{key}: '{getattr(self.tm, key)}' is not a declared attack")
        for name in self.tm.sweep_attacks:
            if name not in self.attacks:
                raise ConfigError(f"tm.sweep_attacks: '{name}' is not a declared attack")
        unknown = [s for s in self.stages if s not in ALL_STAGES]
        if unknown:
            raise ConfigError(f"stages: unknown stage(s) {unknown}")
        if "select-ckpt" in self.stages and self.dataset.val_per_class < 1:
            raise ConfigError("dataset.val_per_class: select-ckpt needs a validation split")


# ============================================================
# LOADER
# ============================================================

def _describe(error: ValidationError) -> str:
    messages = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"])
        if item["type"] == "extra_forbidden":
            text = "unknown key"
        elif item["type"] == "value_error":
            text = str(item["ctx"]["error"])
        else:
            text = item["msg"]
        messages.append(f"{path}: {text}" if path else text)
    return "; ".join(messages)


def config_from_dict(data: Any) -> ExperimentConfig:
    """
    Validate a parsed document. Documents go through pydantic's JSON mode,
    where arrays become tuples and integers are accepted for floats.
    """
    try:
        return ExperimentConfig.model_validate_json(json.dumps(data))
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from exc


def load_config(path: Optional[Path] = None, seed: Optional[int] = None) -> ExperimentConfig:
    """
    Load and validate an experiment document; no path means all defaults.

    Raises:
        ConfigError: unreadable document, unknown key, wrong type or
            invalid value
    """
    if path is None:
        return ExperimentConfig().with_seed(seed)
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
        if path.suffix in (".yaml", ".yml"):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except (OSError, json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        config = config_from_dict(data if data is not None else {}).with_seed(seed)
    except TypeError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    logger.info(f"Loaded config '{config.name}' from {path} (run id {config.run_id[:12]})")
    return config
