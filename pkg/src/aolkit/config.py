"""Run configuration: one JSON file with model, train, dataset and eps sections."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from aolkit.certification import DEFAULT_EPS
from aolkit.data import DatasetSource
from aolkit.layers import ModelSpec
from aolkit.training import TrainConfig

SECTIONS = {"model", "train", "dataset", "eps", "seed", "name"}


@dataclass
class RunConfig:
    model: ModelSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSource | None = None
    eps: tuple = DEFAULT_EPS
    seed: int = 0
    name: str = ""

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "RunConfig":
        unknown = set(d) - SECTIONS
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        if "model" not in d:
            raise ValueError("config needs a 'model' section")
        dataset = d.get("dataset")
        return cls(
            model=ModelSpec.from_dict(d["model"]),
            train=TrainConfig.from_dict(d.get("train", {})),
            dataset=DatasetSource.from_dict(dataset, base_dir) if dataset else None,
            eps=tuple(float(e) for e in d.get("eps", DEFAULT_EPS)),
            seed=int(d.get("seed", 0)),
            name=str(d.get("name", "")),
        )

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        with open(path) as f:
            return cls.from_dict(json.load(f), base_dir=path.parent)

    def to_dict(self) -> dict:
        d = {"model": self.model.to_dict(), "train": self.train.to_dict(),
             "eps": list(self.eps), "seed": self.seed}
        if self.dataset is not None:
            d["dataset"] = self.dataset.to_dict()
        if self.name:
            d["name"] = self.name
        return d

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def canonical_json(d) -> str:
    return json.dumps(d, sort_keys=True, indent=2) + "\n"
