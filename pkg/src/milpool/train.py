"""ADAM training with early stopping, evaluation metrics and cross-validation."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DatasetSplit, kfold_split, normalize_features, stratified_holdout, subsample_indices
from .errors import InputError, NumericError, ParameterError, TrainingError
from .model import Model, ModelSpec, TaskKind, batch_loss, build_model, forward_batch
from .rng import RngStream, as_generator

log = logging.getLogger(__name__)

MONITORS = ("val_accuracy", "val_loss")
EVAL_CHUNK = 256


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 8
    max_epochs: int = 500
    patience: int = 20
    bag_size: int | None = None
    monitor: str | None = None
    seed: int = 0
    eval_resamples: int = 1
    resample_each_epoch: bool = True
    loss_tiebreak: bool = True

    def problems(self) -> list[str]:
        errs = []
        if not self.lr > 0:
            errs.append(f"lr must be positive, got {self.lr}")
        if not self.weight_decay >= 0:
            errs.append(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1:
            errs.append(f"batch_size must be at least 1, got {self.batch_size}")
        if self.max_epochs < 1:
            errs.append(f"max_epochs={self.max_epochs}: nothing to train")
        if self.patience < 1:
            errs.append(f"patience must be at least 1, got {self.patience}")
        if self.bag_size is not None and self.bag_size < 1:
            errs.append(f"bag_size must be at least 1, got {self.bag_size}")
        if self.monitor is not None and self.monitor not in MONITORS:
            errs.append(f"monitor must be one of {MONITORS}, got {self.monitor!r}")
        if self.eval_resamples < 1:
            errs.append(f"eval_resamples must be at least 1, got {self.eval_resamples}")
        return errs

    def monitor_for(self, task: TaskKind) -> str:
        if self.monitor:
            return self.monitor
        return "val_accuracy" if task.is_classification else "val_loss"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One ADAM update with the L2 penalty folded into the gradient.

    ``params`` maps names to leaf tensors (updated in place); ``grads`` maps
    the same names to arrays, ``None`` meaning zero.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=float)
        if weight_decay:
            g = g + weight_decay * p.values
        if name not in state.m:
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class Metrics:
    task: TaskKind
    loss: float
    bag_ids: list
    outputs: np.ndarray
    predictions: list
    truths: list
    accuracy: float | None = None
    mae: float | None = None
    per_task_accuracy: list | None = None
    confusion: np.ndarray | None = None

    @property
    def score(self) -> float:
        return self.accuracy if self.task.is_classification else self.mae

    @property
    def abs_errors(self) -> np.ndarray:
        return np.abs(np.asarray(self.predictions, dtype=float) - np.asarray(self.truths, dtype=float))

    def to_dict(self) -> dict:
        d = {"task": self.task.to_dict(), "n": len(self.bag_ids), "loss": self.loss}
        if self.accuracy is not None:
            d["accuracy"] = self.accuracy
        if self.mae is not None:
            d["mae"] = self.mae
        if self.per_task_accuracy is not None:
            d["per_task_accuracy"] = self.per_task_accuracy
        if self.confusion is not None:
            d["confusion"] = self.confusion.tolist()
        return d


def confusion_matrix(task: TaskKind, predictions, truths) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    k = task.head_width
    cm = np.zeros((k, k), dtype=int)
    for p, y in zip(predictions, truths):
        cm[task.class_index(y), task.class_index(p)] += 1
    return cm


def _group_forward(model: Model, arrays) -> np.ndarray:
    """Eval-mode head outputs for a list of (N_i, D) arrays, batched by size."""
    out = np.empty((len(arrays), model.task.head_width))
    by_size = {}
    for i, a in enumerate(arrays):
        by_size.setdefault(a.shape, []).append(i)
    with T.no_grad():
        for idx in by_size.values():
            for s in range(0, len(idx), EVAL_CHUNK):
                chunk = idx[s:s + EVAL_CHUNK]
                out[chunk] = forward_batch(model, np.stack([arrays[i] for i in chunk]), "eval").values
    return out


def evaluate(model: Model, bags, task: TaskKind | None = None, resamples: int = 1, rng=None,
             bag_size: int | None = None) -> Metrics:
    """Score a model on labelled bags.

    With ``bag_size`` set, each bag is resampled ``resamples`` times to that
    size and the head outputs are averaged before predicting the label;
    without it the full bag is used once.
    """
    task = task or model.task
    bags = list(bags)
    if not bags:
        raise InputError("evaluate needs at least one bag")
    if resamples < 1:
        raise ParameterError(f"resamples must be at least 1, got {resamples}")
    if bag_size is None:
        arrays, owner = [b.instances for b in bags], np.arange(len(bags))
    else:
        gen = as_generator(rng if rng is not None else 0)
        arrays, owner = [], []
        for i, b in enumerate(bags):
            for _ in range(resamples):
                arrays.append(b.instances[subsample_indices(b.size, bag_size, gen)])
                owner.append(i)
        owner = np.array(owner)
    raw = _group_forward(model, arrays)
    counts = np.bincount(owner, minlength=len(bags))
    outputs = np.zeros((len(bags), raw.shape[1]))
    np.add.at(outputs, owner, raw)
    outputs /= counts[:, None]
    truths = [b.label(task) for b in bags]
    targets = np.stack([task.encode(y) for y in truths])
    with T.no_grad():
        loss = batch_loss(task, T.Tensor(outputs), targets).item()
    preds = [task.predict(o) for o in outputs]
    m = Metrics(task, loss, [b.bag_id for b in bags], outputs, preds, truths)
    if task.kind == "regression":
        m.mae = float(np.mean(m.abs_errors))
    elif task.kind == "multi_task":
        p, y = np.array(preds), np.array([tuple(t) for t in truths])
        m.per_task_accuracy = [float(v) for v in (p == y).mean(axis=0)]
        m.accuracy = float(np.mean(np.all(p == y, axis=1)))
    else:
        m.accuracy = float(np.mean([task.class_index(p) == task.class_index(y) for p, y in zip(preds, truths)]))
        m.confusion = confusion_matrix(task, preds, truths)
    return m


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float
    val_accuracy: float | None = None


@dataclass
class TrainResult:
    model: Model
    history: list
    best_epoch: int
    best_metric: float
    monitor: str

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def _improved(monitor, rec, best, tiebreak):
    if best is None:
        return True
    if monitor == "val_loss":
        return rec.val_loss < best.val_loss
    if rec.val_metric != best.val_metric:
        return rec.val_metric > best.val_metric
    return tiebreak and rec.val_loss < best.val_loss


def _stack_batch(bags, gen, bag_size, fixed):
    arrays = []
    for b in bags:
        if bag_size is None:
            arrays.append(b.instances)
        elif fixed is not None:
            arrays.append(fixed[b.bag_id])
        else:
            arrays.append(b.instances[subsample_indices(b.size, bag_size, gen)])
    return arrays


def train_model(model: Model, split: DatasetSplit, cfg: TrainConfig, rng=None) -> TrainResult:
    """Mini-batch ADAM with early stopping on the validation split.

    After every epoch the monitored validation metric is compared with the
    best so far (validation accuracy ties are broken by validation loss when
    ``cfg.loss_tiebreak``). Training stops after ``cfg.patience`` epochs
    without improvement and the best parameters are restored. Without
    ``rng`` the streams derive from ``cfg.seed``.
    """
    problems = cfg.problems()
    if problems:
        raise ParameterError("invalid training config:\n  " + "\n  ".join(problems))
    if not split.train or not split.validation:
        raise InputError("training needs non-empty train and validation splits")
    if rng is None:
        rng = RngStream(cfg.seed)
    rng = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    task = model.task
    monitor = cfg.monitor_for(task)
    train = list(split.train)
    targets = {b.bag_id: task.encode(b.label(task)) for b in train}
    fixed = None
    if cfg.bag_size is not None and not cfg.resample_each_epoch:
        g0 = rng.child(0).generator()
        fixed = {b.bag_id: b.instances[subsample_indices(b.size, cfg.bag_size, g0)] for b in train}
    state = AdamState()
    history, best, best_state, stale = [], None, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        gen = rng.child(1).child(epoch).generator()
        order = gen.permutation(len(train))
        total, seen = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[s:s + cfg.batch_size]]
            arrays = _stack_batch(batch, gen, cfg.bag_size, fixed)
            model.zero_grad()
            loss = None
            groups = {}
            for i, a in enumerate(arrays):
                groups.setdefault(a.shape, []).append(i)
            for idx in groups.values():
                pred = forward_batch(model, np.stack([arrays[i] for i in idx]), "train", gen)
                part = batch_loss(task, pred, np.stack([targets[batch[i].bag_id] for i in idx]))
                part = T.scale(part, len(idx) / len(batch))
                loss = part if loss is None else T.add(loss, part)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}", history)
            T.backward(loss)
            adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state, cfg.lr, cfg.weight_decay)
            total += value * len(batch)
            seen += len(batch)
        val = evaluate(model, split.validation, task, cfg.eval_resamples, rng.child(2), cfg.bag_size)
        if not math.isfinite(val.loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", history)
        metric = val.loss if monitor == "val_loss" else val.accuracy
        rec = EpochRecord(epoch, total / seen, val.loss, metric, val.accuracy)
        history.append(rec)
        if _improved(monitor, rec, best, cfg.loss_tiebreak):
            best, best_state, stale = rec, model.get_state(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.set_state(best_state)
    log.debug("stopped after %d epochs; best epoch %d (%s=%.4g)", len(history), best.epoch, monitor, best.val_metric)
    return TrainResult(model, history, best.epoch, best.val_metric, monitor)


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_metric"])
        for rec in history:
            w.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_metric)])


@dataclass
class FoldResult:
    repeat: int
    fold: int
    score: float | None
    loss: float | None = None
    epochs: int | None = None
    error: str | None = None
    predictions: list = field(default_factory=list)


@dataclass
class CVReport:
    task: TaskKind
    k: int
    repeats: int
    folds: list

    @property
    def scores(self) -> np.ndarray:
        return np.array([f.score for f in self.folds if f.error is None], dtype=float)

    @property
    def mean(self) -> float:
        return float(self.scores.mean()) if self.scores.size else math.nan

    @property
    def stderr(self) -> float:
        s = self.scores
        return float(s.std(ddof=1) / math.sqrt(s.size)) if s.size > 1 else math.nan

    @property
    def repeat_means(self) -> list[float]:
        means = []
        for r in range(self.repeats):
            s = [f.score for f in self.folds if f.repeat == r and f.error is None]
            if s:
                means.append(float(np.mean(s)))
        return means

    @property
    def repeat_stderr(self) -> float:
        m = np.array(self.repeat_means)
        return float(m.std(ddof=1) / math.sqrt(m.size)) if m.size > 1 else math.nan

    def summary(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "metric": "accuracy" if self.task.is_classification else "mae",
            "k": self.k,
            "repeats": self.repeats,
            "n_scores": int(self.scores.size),
            "mean": self.mean,
            "stderr": self.stderr,
            "stderr_basis": "fold scores",
            "repeat_means": self.repeat_means,
            "repeat_stderr": self.repeat_stderr,
            "failed_folds": [{"repeat": f.repeat, "fold": f.fold, "error": f.error} for f in self.folds if f.error],
        }

    def write(self, out_dir, prefix: str = "cv") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{prefix}_folds.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["repeat", "fold", "score"])
            for f in self.folds:
                w.writerow([f.repeat, f.fold, "" if f.score is None else repr(f.score)])
        with open(out / f"{prefix}_predictions.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["repeat", "fold", "bag_id", "truth", "prediction"])
            for f in self.folds:
                for bag_id, y, p in f.predictions:
                    w.writerow([f.repeat, f.fold, bag_id, encode_value(y), encode_value(p)])
        (out / f"{prefix}_summary.json").write_text(json.dumps(self.summary(), indent=2) + "\n")


def encode_value(v) -> str:
    """Label/prediction text for CSV cells; vectors are ``;``-joined."""
    if isinstance(v, (tuple, list, np.ndarray)):
        return ";".join(encode_value(x) for x in v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def decode_value(s: str):
    if ";" in s:
        return tuple(decode_value(x) for x in s.split(";"))
    try:
        return int(s)
    except ValueError:
        return float(s)


def _run_fold(job):
    bags, spec_dict, cfg_dict, r, f, train_ids, test_ids, seed_path, normalize = job
    spec, cfg = ModelSpec.from_dict(spec_dict), TrainConfig.from_dict(cfg_dict)
    fold_rng = RngStream(seed_path[0], tuple(seed_path[1:]))
    by_id = {b.bag_id: b for b in bags}
    train_bags = [by_id[i] for i in train_ids]
    test_bags = [by_id[i] for i in test_ids]
    label_key = spec.task.kind if spec.task.is_classification else None
    try:
        kept, val = stratified_holdout(train_bags, 0.1, label_key, fold_rng.child(0))
        split = DatasetSplit(kept, val, test_bags)
        if normalize:
            split = normalize_features(split)
        model = build_model(spec, fold_rng.child(1))
        res = train_model(model, split, cfg, fold_rng.child(2))
        m = evaluate(res.model, split.test, spec.task, cfg.eval_resamples, fold_rng.child(3), cfg.bag_size)
    except (TrainingError, NumericError) as exc:
        return FoldResult(r, f, None, error=str(exc))
    preds = list(zip(m.bag_ids, m.truths, m.predictions))
    return FoldResult(r, f, m.score, m.loss, res.epochs_run, predictions=preds)


def cross_validate(bags, spec: ModelSpec, cfg: TrainConfig, k: int = 10, repeats: int = 5, rng=0,
                   normalize: bool = False, jobs: int = 1) -> CVReport:
    """Repeated k-fold CV; 10% of each training fold is held out for early stopping.

    Every (repeat, fold) owns its random stream, so results do not depend on
    ``jobs``. A fold whose training diverges is recorded with its error and
    left out of the aggregates.
    """
    bags = list(bags)
    rng = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    label_key = spec.task.kind if spec.task.is_classification else None
    folds = kfold_split(bags, k, repeats, stratify=label_key is not None, rng=rng.child(0), label_key=label_key)
    jobs_list = []
    for r, per_repeat in enumerate(folds):
        for f, (train_ids, test_ids) in enumerate(per_repeat):
            fold_rng = rng.child(1).child(r).child(f)
            jobs_list.append((bags, spec.to_dict(), cfg.to_dict(), r, f, train_ids, test_ids,
                              (fold_rng.seed,) + fold_rng.path, normalize))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, jobs_list))
    else:
        results = [_run_fold(j) for j in jobs_list]
    for res in results:
        if res.error:
            log.warning("repeat %d fold %d failed: %s", res.repeat, res.fold, res.error)
    return CVReport(spec.task, k, repeats, results)
