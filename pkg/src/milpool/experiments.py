"""End-to-end runs shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_bags, make_split, preset_config
from .model import build_model
from .rng import RngStream
from .train import Metrics, TrainResult, evaluate, train_model

SWEEP_SIZES = (10, 50, 100, 200)
SWEEP_FILTERS = ("distribution", "mean", "max")


def run_experiment(config: ExperimentConfig, seed: int = 0) -> tuple[TrainResult, Metrics, object]:
    """Load data, split, train and test one model. Returns (result, test metrics, split)."""
    rng = RngStream(seed)
    bags = load_bags(config, rng.child(0))
    split = make_split(config, bags, rng.child(1))
    model = build_model(config.model, rng.child(2))
    res = train_model(model, split, config.train, rng.child(3))
    m = evaluate(res.model, split.test, config.task, config.train.eval_resamples, rng.child(4),
                 config.train.bag_size)
    return res, m, split


def with_variant(config: ExperimentConfig, pooling: str | None = None, balls_per_bag: int | None = None
                 ) -> ExperimentConfig:
    """Copy of ``config`` with another pooling filter and/or bag size."""
    model = config.model
    if pooling is not None:
        model = replace(model, pooling=replace(model.pooling, kind=pooling))
    data = dict(config.data)
    if balls_per_bag is not None:
        data["balls_per_bag"] = int(balls_per_bag)
    return replace(config, model=model, data=data).validate()


def run_metal_balls(pooling: str, balls_per_bag: int, seed: int = 0, bags_per_class: int = 300,
                    train_cfg=None) -> tuple[TrainResult, Metrics]:
    """One metal-balls model; 600/150/150 split with equal classes in each part."""
    cfg = preset_config("metal-balls")
    cfg.data["bags_per_class"] = bags_per_class
    if train_cfg is not None:
        cfg.train = train_cfg
    res, m, _ = run_experiment(with_variant(cfg, pooling, balls_per_bag), seed)
    return res, m


def sweep_bag_sizes(config: ExperimentConfig | None = None, sizes=SWEEP_SIZES, filters=SWEEP_FILTERS,
                    seed: int = 0) -> list[dict]:
    """Test loss/accuracy for every (filter, bag size) pair.

    Every filter sees the same corpus at a given size (same seed), so rows
    differ only in the pooling filter.
    """
    config = config or preset_config("metal-balls")
    rows = []
    for pooling in filters:
        for n in sizes:
            res, m, _ = run_experiment(with_variant(config, pooling, n), seed)
            rows.append({
                "pooling": pooling,
                "bag_size": int(n),
                "test_loss": m.loss,
                "test_accuracy": m.score,
                "epochs": res.epochs_run,
                "confusion": m.confusion,
            })
    return rows


def write_sweep(rows, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep_bagsize.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pooling", "bag_size", "test_loss", "test_accuracy", "epochs"])
        for r in rows:
            w.writerow([r["pooling"], r["bag_size"], repr(r["test_loss"]), repr(r["test_accuracy"]), r["epochs"]])
    for r in rows:
        if r["confusion"] is not None:
            write_confusion_csv(r["confusion"], out / f"confusion_{r['pooling']}_{r['bag_size']}.csv")


def write_confusion_csv(cm: np.ndarray, path, names=None) -> None:
    k = cm.shape[0]
    names = list(names or range(k))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["truth\\predicted", *names])
        for i in range(k):
            w.writerow([names[i], *[int(v) for v in cm[i]]])

