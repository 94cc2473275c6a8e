"""One YAML file drives every subcommand; command-line flags override it."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .actions import ActionDiscretization
from .sim import WorkspaceConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    workspace: WorkspaceConfig = field(default_factory=WorkspaceConfig)
    discretization: ActionDiscretization = field(default_factory=ActionDiscretization.coarse)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str = "runs/dataset"
    checkpoint: str = "runs/train/checkpoint.fcqn"
    output_dir: str = "runs"
    transitions: int = 300
    episode_length: int = 10
    collect_seed: int = 0
    eval_seed: int = 0
    eval_trials: int = 10
    eval_tasks: tuple[str, ...] = ("small_inward", "double_inward", "four_corners_inward",
                                   "single_triangle", "double_straight", "double_triangle")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items()
             if k not in ("workspace", "discretization", "train")}
        d["eval_tasks"] = list(self.eval_tasks)
        d["workspace"] = self.workspace.to_dict()
        d["discretization"] = self.discretization.to_dict()
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        kw = {}
        if "workspace" in d:
            kw["workspace"] = WorkspaceConfig.from_dict({**base.workspace.to_dict(),
                                                         **d.pop("workspace")})
        if "discretization" in d:
            kw["discretization"] = ActionDiscretization.from_dict(
                {**base.discretization.to_dict(), **d.pop("discretization")})
        if "train" in d:
            kw["train"] = TrainConfig.from_dict({**base.train.to_dict(), **d.pop("train")})
        if "eval_tasks" in d:
            kw["eval_tasks"] = tuple(d.pop("eval_tasks"))
        return replace(base, **kw, **d)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.dump())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})
