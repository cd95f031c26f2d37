"""Pipeline configuration: one JSON document with a section per stage.

Numeric defaults follow the published hyperparameters where they exist
(AdamW 2e-3 / 0.999 / 0.01 / 1e-8, batch 64, lambda 0.6, KD alpha 0.9 and
tau 2, skip stride 1); the remaining defaults size runs for a laptop CPU.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .net import BlockConfig, ModelConfig
from .qabas import SearchSpace
from .signal_sim import SimConfig
from .train import OptimConfig


class PipelineConfigError(ValueError):
    pass


def toy_model_config(channels: int = 32, kernels=(9, 9, 15, 15), stem_stride: int = 4) -> ModelConfig:
    """Four two-repeat residual blocks over a strided stem."""
    return ModelConfig(
        stem=BlockConfig(kernel_size=9, channels_out=channels, stride=stem_stride),
        blocks=[BlockConfig(kernel_size=k, channels_out=channels, repeats=2, has_skip=True) for k in kernels],
    )


@dataclass
class TrainSection:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    chunks: int | None = None  # cap on training chunks
    model: dict = field(default_factory=lambda: toy_model_config().to_dict())

    def optim(self) -> OptimConfig:
        return OptimConfig(self.lr, self.beta1, self.beta2, self.weight_decay, self.eps)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)


@dataclass
class SearchSection:
    lam: float = 0.6
    target_latency: float | None = None  # None: cheapest non-identity path
    epochs: int = 10
    batch_size: int = 64
    lr: float = 2e-3
    alpha_lr: float = 2e-3
    alpha_weight_decay: float = 0.01
    warmup_steps: int = 0
    add_skips: bool = True
    space: dict = field(default_factory=lambda: SearchSpace(stem_stride=4).to_dict())

    def search_space(self) -> SearchSpace:
        return SearchSpace.from_dict(self.space)


@dataclass
class SkipClipSection:
    alpha: float = 0.9
    tau: float = 2.0
    skip_stride: int = 1
    divergence: str = "kl"
    epochs: int = 10
    batch_size: int = 64
    lr: float = 2e-3
    pretrain_epochs: int = 10  # used only when the student is an architecture file


@dataclass
class PruneSection:
    method: str = "element"
    sparsity: float = 0.15
    fine_tune_epochs: int = 2
    lr: float = 2e-3
    batch_size: int = 64
    sweep: list = field(default_factory=lambda: [0.0, 0.15, 0.3, 0.45, 0.6, 0.7, 0.8, 0.9, 0.95, 0.98])


@dataclass
class EvaluateSection:
    chunk_len: int = 400
    split: str = "eval"


@dataclass
class PipelineConfig:
    simulate: SimConfig = field(default_factory=SimConfig)
    train: TrainSection = field(default_factory=TrainSection)
    search: SearchSection = field(default_factory=SearchSection)
    skipclip: SkipClipSection = field(default_factory=SkipClipSection)
    prune: PruneSection = field(default_factory=PruneSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise PipelineConfigError("configuration must be a JSON object")
        kinds = {f.name: f.default_factory for f in fields(cls)}
        unknown = set(d) - set(kinds)
        if unknown:
            raise PipelineConfigError(f"unknown config sections: {sorted(unknown)}")
        out = {}
        for name, factory in kinds.items():
            section = factory()
            values = d.get(name, {})
            if not isinstance(values, dict):
                raise PipelineConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(section)}
            bad = set(values) - allowed
            if bad:
                raise PipelineConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            out[name] = type(section)(**{**asdict(section), **values})
        cfg = cls(**out)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.train.model_config()
            self.search.search_space()
        except ValueError as exc:
            raise PipelineConfigError(str(exc)) from None
        if self.prune.method not in ("element", "channel"):
            raise PipelineConfigError(f"prune.method must be element or channel, got {self.prune.method!r}")
        if self.evaluate.split not in ("train", "eval", "all"):
            raise PipelineConfigError("evaluate.split must be train, eval or all")


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise PipelineConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise PipelineConfigError(f"config {path} is not valid JSON: {exc}") from None
    return PipelineConfig.from_dict(data)
