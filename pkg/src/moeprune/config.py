"""Run configuration: every knob of an experiment in one serialisable object."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import kvtext
from .errors import ConfigError
from .model import ModelConfig
from .pruning import PruneConfig
from .tasks import TaskSpec

FORMAT_VERSION = 1
DEFAULT_OUT_ENV = "MOEP_OUT_DIR"


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01
    warmup_steps: int = 100

    def __post_init__(self):
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0 or self.warmup_steps < 0:
            raise ConfigError("optimizer hyperparameters out of range")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")


@dataclass(frozen=True)
class PruneSettings:
    mode: str = "eager"
    criterion: str = "alpha"
    beta: float = 1.0
    gamma: float = 1.0
    force_drop: bool = True

    def __post_init__(self):
        self.build(1, 1)  # validates mode, criterion, beta, gamma

    def build(self, total_steps: int, num_experts: int, mode: str | None = None) -> PruneConfig:
        return PruneConfig(mode or self.mode, self.criterion, self.beta, self.gamma,
                           total_steps, num_experts, self.force_drop)


@dataclass(frozen=True)
class TrainConfig:
    pretrain_steps: int = 3000
    finetune_steps: int = 800
    batch_size: int = 32
    finetune_pool: int = 512
    eval_size: int = 2000
    subtask: int = 0
    init_seed: int = 0
    seeds: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if min(self.pretrain_steps, self.finetune_steps, self.batch_size, self.eval_size) < 1:
            raise ConfigError("step counts, batch size and eval size must be >= 1")
        if self.finetune_pool < 0:
            raise ConfigError("finetune_pool must be >= 0 (0 draws fresh batches)")
        if not self.seeds:
            raise ConfigError("at least one seed is required")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    prune: PruneSettings = field(default_factory=PruneSettings)
    pretrain_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=3e-3, warmup_steps=300))
    finetune_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=5e-4, warmup_steps=16))
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = ""

    def __post_init__(self):
        if self.model.feature_dim != self.task.feature_dim:
            raise ConfigError(f"model.feature_dim {self.model.feature_dim} != task.feature_dim {self.task.feature_dim}")
        if self.model.num_classes != self.task.classes_per_subtask:
            raise ConfigError("model.num_classes must equal task.classes_per_subtask")
        if not 0 <= self.train.subtask < self.task.num_subtasks:
            raise ConfigError(f"train.subtask {self.train.subtask} outside [0, {self.task.num_subtasks})")

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model": self.model.to_dict(),
            "task": self.task.to_dict(),
            "prune": asdict(self.prune),
            "pretrain_optim": asdict(self.pretrain_optim),
            "finetune_optim": asdict(self.finetune_optim),
            "train": {**asdict(self.train), "seeds": list(self.train.seeds)},
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported config format_version {version}")
        sections = {"model": ModelConfig, "task": TaskSpec, "prune": PruneSettings,
                    "pretrain_optim": OptimConfig, "finetune_optim": OptimConfig, "train": TrainConfig}
        unknown = set(d) - set(sections) - {"out_dir"}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kwargs = {}
        for name, typ in sections.items():
            if name in d:
                kwargs[name] = _build(typ, d[name], name)
        if "out_dir" in d:
            kwargs["out_dir"] = str(d["out_dir"])
        return cls(**kwargs)

    def dumps(self) -> str:
        return kvtext.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls.from_dict(kvtext.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def with_overrides(self, **sections) -> "RunConfig":
        """``cfg.with_overrides(prune={"beta": 0.5})`` returns an updated copy."""
        kwargs = {}
        for name, changes in sections.items():
            current = getattr(self, name)
            if not isinstance(changes, dict):
                kwargs[name] = changes
            elif name == "task":
                # derived arrays (centers, label rules) must be regenerated from the new seed
                kwargs[name] = TaskSpec(**{**current.to_dict(), **changes})
            else:
                kwargs[name] = replace(current, **changes)
        return replace(self, **kwargs)

    def output_root(self) -> Path:
        return Path(self.out_dir or os.environ.get(DEFAULT_OUT_ENV, "runs"))


def _build(typ, values, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a table of keys")
    allowed = {f.name for f in fields(typ) if f.init and f.name not in ("cluster_centers", "label_rules")}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return typ(**values)
    except TypeError as exc:
        raise ConfigError(f"bad value in [{section}]: {exc}") from None

