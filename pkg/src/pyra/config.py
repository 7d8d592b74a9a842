"""Flat JSON run configuration covering architecture, schedule, PYRA, training and data."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .arch import ArchSpec
from .data import SyntheticTask
from .merge import ScheduleError
from .modulation import PyraConfig
from .schedule import (
    MergeSchedule,
    ScheduleSpec,
    constant_schedule,
    decreasing_schedule,
    published_schedule,
    validate_schedule,
)
from .train import TrainConfig

_ARCH_KEYS = ("L", "D", "H", "P", "img", "channels", "num_classes", "mlp_ratio", "use_cls")


class RunConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # architecture: a preset name, any field may be overridden
    arch: str = "tiny"
    L: int | None = None
    D: int | None = None
    H: int | None = None
    P: int | None = None
    img: int | None = None
    channels: int | None = None
    num_classes: int | None = None
    mlp_ratio: int | None = None
    use_cls: bool | None = None
    # schedule: an explicit list wins, then published, then constant, then ratio
    schedule: list[int] | None = None
    published: str | None = None
    constant_r: int | None = None
    target_ratio: float | None = None
    final_tokens: int = 4
    merge_mode: str = "weighted"
    partition_mode: str = "alternating"
    # adapters and generators
    lora_rank: int = 4
    pyra: bool = True
    pyra_mode: str = "full"
    rank_s: int = 1
    gated_hidden: int = 4
    gated_bias: bool = True
    activation: bool = True
    init_std: float = 0.02
    # training
    epochs: int = 25
    warmup_epochs: int = 2
    batch_size: int = 32
    steps_per_epoch: int | None = 8
    lr_peft: float = 1e-2
    lr_generators: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    pipeline: str = "one_stage"
    eval_batch_size: int = 64
    # synthetic data
    n_train: int = 256
    n_val: int = 128
    n_test: int = 128
    noise: float = 0.3

    def __post_init__(self):
        base = ArchSpec.preset(self.arch)
        for k in _ARCH_KEYS:
            if getattr(self, k) is None:
                setattr(self, k, getattr(base, k))
        arch = self.arch_spec()
        if self.schedule is None:
            self.schedule = list(self._resolve_schedule(arch).r)
        validate_schedule(self.schedule, arch, strict=True)
        self.pyra_config()
        self.train_config()

    def _resolve_schedule(self, arch: ArchSpec) -> MergeSchedule:
        if self.published is not None:
            return published_schedule(self.published)
        if self.constant_r is not None:
            return constant_schedule(arch, self.constant_r)
        if self.target_ratio is not None:
            return decreasing_schedule(arch, ScheduleSpec(self.target_ratio, self.final_tokens))
        return MergeSchedule.identity(arch.L)

    def arch_spec(self) -> ArchSpec:
        return ArchSpec(**{k: getattr(self, k) for k in _ARCH_KEYS})

    def pyra_config(self) -> PyraConfig | None:
        if not self.pyra:
            return None
        return PyraConfig(
            mode=self.pyra_mode,
            rank_s=self.rank_s,
            gated_hidden=self.gated_hidden,
            gated_bias=self.gated_bias,
            activation=self.activation,
            init_std=self.init_std,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            warmup_epochs=self.warmup_epochs,
            batch_size=self.batch_size,
            steps_per_epoch=self.steps_per_epoch,
            lr_peft=self.lr_peft,
            lr_generators=self.lr_generators,
            weight_decay=self.weight_decay,
            seed=self.seed,
            pipeline=self.pipeline,
            eval_batch_size=self.eval_batch_size,
        )

    def task(self) -> SyntheticTask:
        return SyntheticTask.for_arch(
            self.arch_spec(), n_train=self.n_train, n_val=self.n_val, n_test=self.n_test, noise=self.noise, seed=self.seed
        )

    def build_model(self):
        from .vit import init_model

        return init_model(
            self.arch_spec(),
            lora_rank=self.lora_rank or None,
            schedule=self.schedule,
            pyra=self.pyra_config(),
            seed=self.seed,
            merge_mode=self.merge_mode,
            partition_mode=self.partition_mode,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise RunConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise RunConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as err:
            if isinstance(err, (RunConfigError, ScheduleError)):
                raise
            raise RunConfigError(str(err)) from err

    @classmethod
    def from_json(cls, text) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as err:
            raise RunConfigError(f"config is not valid JSON: {err}") from err
        return cls.from_dict(data)
