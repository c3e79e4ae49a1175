"""Experiment configuration: a versioned JSON document.

Every section maps onto a dataclass; unknown keys anywhere are rejected
with their dotted path in the error message.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .contrastive.encoder import EncoderConfig
from .datasets import AugmentationPolicy, DatasetSpec
from .federation import FederationConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


@dataclass
class PartitionConfig:
    alpha: float = 0.5
    min_size: int = 1


@dataclass
class MembershipConfig:
    size: int = 100


@dataclass
class PassiveAttackConfig:
    n_views: int = 10
    n_classes: int = 10
    top_k: int = 3
    head_seed: int = 0
    loss_draws: int = 4
    classifier: str = "lda"
    split_seeds: int = 5
    test_size: float = 0.3
    taps: tuple = ("layer1", "layer2", "layer3", "layer4", "avgpool", "encoder")


@dataclass
class StaticAttackConfig:
    steps: int = 3
    lr: float = 0.05
    batch_size: int = 1
    eval_draws: int = 4


@dataclass
class InTrainingAttackConfig:
    attacker: int = 0
    rounds: int = 5
    steps: int = 10
    lr: float = 0.1
    honest_training: bool = False
    quantile: float = 0.95
    calibration_fraction: float = 0.5
    eval_draws: int = 4


@dataclass
class AttackConfig:
    passive: PassiveAttackConfig = field(default_factory=PassiveAttackConfig)
    static: StaticAttackConfig = field(default_factory=StaticAttackConfig)
    in_training: InTrainingAttackConfig = field(default_factory=InTrainingAttackConfig)


@dataclass
class ExperimentConfig:
    name: str = "run"
    seed: int = 0
    output_dir: str = "runs"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    membership: MembershipConfig = field(default_factory=MembershipConfig)
    attacks: AttackConfig = field(default_factory=AttackConfig)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        return _to_plain(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_NESTED = {
    (ExperimentConfig, "dataset"): DatasetSpec,
    (ExperimentConfig, "partition"): PartitionConfig,
    (ExperimentConfig, "federation"): FederationConfig,
    (ExperimentConfig, "membership"): MembershipConfig,
    (ExperimentConfig, "attacks"): AttackConfig,
    (AttackConfig, "passive"): PassiveAttackConfig,
    (AttackConfig, "static"): StaticAttackConfig,
    (AttackConfig, "in_training"): InTrainingAttackConfig,
    (FederationConfig, "arch"): EncoderConfig,
    (FederationConfig, "policy"): AugmentationPolicy,
}


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {where!r}")
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        sub = _NESTED.get((cls, key))
        if sub is not None:
            kwargs[key] = _build(sub, value, where)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    version = data.get("schema_version")
    if version is None:
        raise ConfigError("missing 'schema_version'")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    cfg = _build(ExperimentConfig, data, "")
    f = cfg.federation
    if f.n_clients < 1:
        raise ConfigError("federation.n_clients must be >= 1")
    if cfg.attacks.in_training.attacker >= f.n_clients:
        raise ConfigError("attacks.in_training.attacker is not a registered client")
    if not 0 < cfg.attacks.in_training.calibration_fraction < 1:
        raise ConfigError("attacks.in_training.calibration_fraction must lie in (0, 1)")
    return cfg


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def desk_config(**overrides):
    """The standard desk run: small synthetic pool, four clients, many rounds."""
    cfg = ExperimentConfig(
        name="desk",
        dataset=DatasetSpec(n_train=100, n_holdout=200, grid=16, latent_dim=128, pixel_noise=0.05),
        federation=FederationConfig(rounds=80, lr=0.3, queue_size=128, checkpoint_every=10),
        attacks=AttackConfig(
            passive=PassiveAttackConfig(n_views=16),
            static=StaticAttackConfig(steps=3, lr=0.02),
            in_training=InTrainingAttackConfig(steps=3, lr=0.02, honest_training=True),
        ),
    )
    return dataclasses.replace(cfg, **overrides)


def smoke_config(**overrides):
    """A seconds-long run exercising every code path."""
    cfg = ExperimentConfig(
        name="smoke",
        dataset=DatasetSpec(n_train=24, n_holdout=24, image_size=8, grid=4, latent_dim=16),
        federation=FederationConfig(
            n_clients=2, clients_per_round=2, rounds=4, local_epochs=1, lr=0.1, queue_size=16,
            batch_size=8, checkpoint_every=2, arch=EncoderConfig(channels=(8, 8), strides=(1, 2), dim=16),
        ),
        membership=MembershipConfig(size=12),
        attacks=AttackConfig(
            passive=PassiveAttackConfig(n_views=4, loss_draws=1, split_seeds=2, taps=("layer1", "layer2", "avgpool", "encoder")),
            static=StaticAttackConfig(steps=1, lr=0.02, eval_draws=1),
            in_training=InTrainingAttackConfig(rounds=2, steps=1, lr=0.02, eval_draws=1),
        ),
    )
    return dataclasses.replace(cfg, **overrides)
