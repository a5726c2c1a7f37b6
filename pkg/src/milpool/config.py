"""Experiment configuration: JSON documents, ``key=value`` overrides and presets."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import (METAL_BALLS, BagCsvSchema, DatasetSplit, MixtureSpec, check_task_fits, generate_metal_balls,
                   generate_task_bags, load_bag_csv, load_musk_format, normalize_features, stratified_split)
from .errors import MilError, SpecError
from .model import LayerSpec, ModelSpec, TaskKind
from .pooling import PoolingSpec
from .train import TrainConfig

SOURCES = ("metal_balls", "mixture", "csv", "musk")
DEFAULT_FRACTIONS = (4 / 6, 1 / 6, 1 / 6)


class ConfigError(MilError, ValueError):
    def __init__(self, problems):
        self.problems = list(problems) if not isinstance(problems, str) else [problems]
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class ExperimentConfig:
    model: ModelSpec
    train: TrainConfig
    data: dict = field(default_factory=lambda: {"source": "metal_balls"})
    normalize: bool = False
    out_dir: str = "out"

    @property
    def task(self) -> TaskKind:
        return self.model.task

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        task = model.pop("task")
        return {
            "task": task,
            "data": copy.deepcopy(self.data),
            "model": model,
            "train": self.train.to_dict(),
            "normalize": self.normalize,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        problems = []
        try:
            model_d = dict(d["model"])
            model_d["task"] = d["task"]
            model = ModelSpec.from_dict(model_d)
        except (KeyError, TypeError, MilError) as exc:
            problems.append(f"model/task: {exc}")
            model = None
        try:
            train = TrainConfig.from_dict(d.get("train", {}))
        except TypeError as exc:
            problems.append(f"train: {exc}")
            train = None
        if problems:
            raise ConfigError(problems)
        return cls(model, train, dict(d.get("data", {"source": "metal_balls"})),
                   bool(d.get("normalize", False)), d.get("out_dir", "out"))

    def problems(self) -> list[str]:
        errs = [f"model: {p}" for p in self.model.problems()]
        errs += [f"train: {p}" for p in self.train.problems()]
        src = self.data.get("source")
        if src not in SOURCES:
            errs.append(f"data.source must be one of {SOURCES}, got {src!r}")
        if src in ("csv", "musk"):
            path = self.data.get("path")
            if not path:
                errs.append(f"data.path is required for source {src!r}")
            elif not Path(path).exists():
                errs.append(f"data.path {path!r} does not exist")
        if src == "metal_balls":
            if self.task.kind != "multi_class" or self.task.num_classes != 3:
                errs.append("metal_balls data is a 3-class multi_class task")
            if self.model.input_dim != 1:
                errs.append(f"metal_balls bags have 1 raw feature, model.input_dim={self.model.input_dim}")
        if src == "mixture":
            try:
                mix = MixtureSpec.from_dict(self.data["mixture"]) if "mixture" in self.data else METAL_BALLS
                check_task_fits(mix, self.task)
            except (MilError, KeyError) as exc:
                errs.append(f"data.mixture: {exc}")
        fr = self.data.get("split", DEFAULT_FRACTIONS)
        if len(fr) != 3 or abs(sum(fr) - 1) > 1e-9:
            errs.append(f"data.split must be three fractions summing to 1, got {fr}")
        return errs

    def validate(self) -> "ExperimentConfig":
        errs = self.problems()
        if errs:
            raise ConfigError(errs)
        return self


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` assignments; values parse as JSON when they can."""
    d = copy.deepcopy(d)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if isinstance(node, list):
                node = node[int(p)]
            else:
                node = node.setdefault(p, {})
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = _parse_value(value)
        else:
            node[last] = _parse_value(value)
    return d


def load_config(path=None, preset: str | None = None, overrides=()) -> ExperimentConfig:
    if path is not None:
        try:
            base = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    else:
        base = preset_config(preset or "metal-balls").to_dict()
    return ExperimentConfig.from_dict(apply_overrides(base, overrides))


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


# -- presets ---------------------------------------------------------------

def metal_balls_model(pooling: str = "distribution") -> ModelSpec:
    """input-1 -> pooling -> fc-3 -> softmax; 101 bins, sigma 0.005."""
    return ModelSpec(1, [], PoolingSpec(pooling, 101, 0.005, [8]), [], TaskKind("multi_class", 3))


def metal_balls_train() -> TrainConfig:
    # patience 100: max pooling's 1-D linear classifier plateaus in accuracy
    # for dozens of epochs before the green/blue boundary settles
    return TrainConfig(lr=1e-2, weight_decay=5e-4, batch_size=64, max_epochs=500, patience=100)


def musk_model(pooling: str = "distribution") -> ModelSpec:
    return ModelSpec(
        166,
        [LayerSpec(64, "relu"), LayerSpec(32, "relu", 0.5), LayerSpec(32, "sigmoid", 0.5)],
        PoolingSpec(pooling, 11, 0.1),
        [LayerSpec(64, "relu", 0.5), LayerSpec(32, "relu", 0.5)],
        TaskKind("pos_neg"),
        head_dropout=0.5,
    )


def musk_train() -> TrainConfig:
    return TrainConfig(lr=5e-4, weight_decay=0.1, batch_size=8, max_epochs=500, patience=20,
                       bag_size=16, eval_resamples=100)


def animal_model(pooling: str = "distribution") -> ModelSpec:
    return ModelSpec(
        230,
        [LayerSpec(256, "relu"), LayerSpec(128, "relu", 0.5), LayerSpec(64, "relu", 0.5),
         LayerSpec(32, "sigmoid", 0.5)],
        PoolingSpec(pooling, 11, 0.1),
        [LayerSpec(384, "relu", 0.5), LayerSpec(192, "relu", 0.5)],
        TaskKind("pos_neg"),
        head_dropout=0.5,
    )


def animal_train() -> TrainConfig:
    return TrainConfig(lr=5e-6, weight_decay=0.1, batch_size=8, max_epochs=500, patience=20,
                       bag_size=16, eval_resamples=100)


def mixture_model(task: TaskKind, pooling: str = "distribution", num_components: int = 2) -> ModelSpec:
    """Small extractor over 1-D mixture instances, shared by every filter."""
    return ModelSpec(
        1,
        [LayerSpec(16, "relu"), LayerSpec(4, "sigmoid")],
        PoolingSpec(pooling, 21, 0.05, [16]),
        [LayerSpec(32, "relu")],
        task,
    )


def preset_config(name: str) -> ExperimentConfig:
    if name == "metal-balls":
        return ExperimentConfig(metal_balls_model(), metal_balls_train(),
                                {"source": "metal_balls", "bags_per_class": 300, "balls_per_bag": 200})
    if name == "musk":
        return ExperimentConfig(musk_model(), musk_train(), {"source": "musk", "path": "clean1.data"},
                                normalize=True)
    if name == "animal":
        data = {"source": "csv", "path": "fox.csv", "schema": {"label_map": {"-1": 0}}}
        return ExperimentConfig(animal_model(), animal_train(), data, normalize=True)
    if name == "mixture":
        mix = MixtureSpec.from_pairs([(0.3, 0.05), (0.6, 0.05)], ("negative", "positive"))
        return ExperimentConfig(
            mixture_model(TaskKind("ucc", 2)),
            TrainConfig(lr=1e-3, weight_decay=5e-4, batch_size=16, max_epochs=200, patience=20),
            {"source": "mixture", "mixture": mix.to_dict(), "num_bags": 600, "balls_per_bag": 32, "designated": 1},
        )
    raise SpecError(f"unknown preset {name!r}; choose from metal-balls, musk, animal, mixture")


PRESETS = ("metal-balls", "musk", "animal", "mixture")


# -- datasets --------------------------------------------------------------

def load_bags(config: ExperimentConfig, rng) -> list:
    d = config.data
    src = d.get("source")
    if src == "metal_balls":
        mix = MixtureSpec.from_dict(d["mixture"]) if "mixture" in d else METAL_BALLS
        return generate_metal_balls(mix, int(d.get("bags_per_class", 300)), int(d.get("balls_per_bag", 200)), rng)
    if src == "mixture":
        mix = MixtureSpec.from_dict(d["mixture"]) if "mixture" in d else METAL_BALLS
        return generate_task_bags(mix, config.task, int(d.get("num_bags", 600)), int(d.get("balls_per_bag", 32)),
                                  rng, int(d.get("designated", 0)))
    if src == "csv":
        schema = BagCsvSchema(label_key=config.task.kind, **d.get("schema", {}))
        return load_bag_csv(d["path"], schema)
    if src == "musk":
        return load_musk_format(d["path"], int(d.get("num_features", 166)))
    raise ConfigError(f"unknown data source {src!r}")


def make_split(config: ExperimentConfig, bags, rng) -> DatasetSplit:
    key = config.task.kind if config.task.is_classification else None
    split = stratified_split(bags, tuple(config.data.get("split", DEFAULT_FRACTIONS)), key, rng)
    return normalize_features(split) if config.normalize else split
