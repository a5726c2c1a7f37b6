"""Bag corpora: synthetic generators, file loaders, subsampling, splits and folds."""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InputError, LoadError, ParameterError, SpecError
from .model import TaskKind
from .rng import RngStream, as_generator

STD_FLOOR = 1e-8


class StratificationWarning(UserWarning):
    pass


@dataclass
class RawBag:
    bag_id: str
    instances: np.ndarray
    labels: dict = field(default_factory=dict)
    instance_classes: np.ndarray | None = None
    source: str = ""

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=float)
        if self.instances.ndim == 1:
            self.instances = self.instances[:, None]
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise InputError(f"bag {self.bag_id}: instances must be a non-empty (N, D) matrix")

    @property
    def size(self) -> int:
        return self.instances.shape[0]

    @property
    def num_features(self) -> int:
        return self.instances.shape[1]

    def label(self, task: TaskKind | str):
        key = task.kind if isinstance(task, TaskKind) else task
        try:
            return self.labels[key]
        except KeyError:
            raise InputError(f"bag {self.bag_id} has no {key!r} label (has {sorted(self.labels)})") from None


@dataclass
class MixtureSpec:
    """Per-class normal distributions over raw instance features.

    ``means`` and ``stds`` are ``(C, D)``: one row per class
    (production line), one column per raw feature.
    """

    means: np.ndarray
    stds: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.stds = np.atleast_2d(np.asarray(self.stds, dtype=float))
        if self.means.shape != self.stds.shape:
            raise SpecError(f"means {self.means.shape} and stds {self.stds.shape} differ in shape")
        if np.any(~(self.stds > 0)):
            raise SpecError("every component std must be positive")
        if not self.names:
            self.names = tuple(f"class{i}" for i in range(self.num_components))
        if len(self.names) != self.num_components:
            raise SpecError(f"{len(self.names)} names for {self.num_components} components")
        self.names = tuple(self.names)

    @classmethod
    def from_pairs(cls, pairs, names=()) -> "MixtureSpec":
        """One-feature spec from ``[(mean, std), ...]``."""
        arr = np.asarray(pairs, dtype=float)
        return cls(arr[:, :1], arr[:, 1:2], tuple(names))

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    @property
    def num_features(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist(), "names": list(self.names)}

    @classmethod
    def from_dict(cls, d) -> "MixtureSpec":
        return cls(d["means"], d["stds"], tuple(d.get("names", ())))


METAL_BALLS = MixtureSpec.from_pairs([(0.3, 0.02), (0.5, 0.02), (0.5, 0.005)], ("red", "green", "blue"))


def derive_labels(instance_classes, num_components: int, designated: int = 0) -> dict:
    """Labels of every task kind from the hidden instance classes.

    ``multi_class`` is the pure component index when the bag holds one class
    and ``num_components`` ("mixed") otherwise.
    """
    cls = np.asarray(instance_classes, dtype=int)
    present = np.zeros(num_components, dtype=int)
    present[np.unique(cls)] = 1
    distinct = int(present.sum())
    return {
        "pos_neg": int(present[designated]),
        "ucc": distinct,
        "multi_class": int(cls[0]) if distinct == 1 else num_components,
        "multi_task": tuple(int(p) for p in present),
        "regression": float(np.mean(cls == designated)),
    }


def _draw(spec: MixtureSpec, classes, gen) -> np.ndarray:
    mu, sd = spec.means[classes], spec.stds[classes]
    return mu + sd * gen.standard_normal(mu.shape)


def generate_metal_balls(spec: MixtureSpec = METAL_BALLS, bags_per_class: int = 300,
                         balls_per_bag: int = 200, rng=0) -> list[RawBag]:
    """``bags_per_class`` pure bags for each production line, ordered by class."""
    if bags_per_class < 1 or balls_per_bag < 1:
        raise ParameterError("bags_per_class and balls_per_bag must be at least 1")
    gen = as_generator(rng)
    bags = []
    for c in range(spec.num_components):
        for _ in range(bags_per_class):
            classes = np.full(balls_per_bag, c)
            bags.append(
                RawBag(
                    f"bag{len(bags):05d}",
                    _draw(spec, classes, gen),
                    derive_labels(classes, spec.num_components),
                    classes,
                    "metal_balls",
                )
            )
    return bags


def check_task_fits(spec: MixtureSpec, task: TaskKind):
    L = spec.num_components
    if L < 2:
        raise SpecError("mixture bags need at least 2 components")
    if task.kind == "multi_class" and task.num_classes != L + 1:
        raise SpecError(f"multi_class on {L} components has {L + 1} classes (pure per component + mixed), "
                        f"got num_classes={task.num_classes}")
    if task.kind == "multi_task" and task.num_classes != L:
        raise SpecError(f"multi_task on {L} components needs num_classes={L}, got {task.num_classes}")
    if task.kind == "ucc" and task.num_classes < L:
        raise SpecError(f"ucc on {L} components needs num_classes >= {L}, got {task.num_classes}")


def generate_task_bags(spec: MixtureSpec, task: TaskKind, num_bags: int, balls_per_bag: int,
                       rng=0, designated: int = 0) -> list[RawBag]:
    """Bags mixing a random nonempty subset of components.

    The subset is uniform over all nonempty subsets; mixing proportions come
    from a flat Dirichlet draw. Every chosen component contributes at least
    one instance, so the unique-class count equals the subset size.
    """
    check_task_fits(spec, task)
    L = spec.num_components
    if not 0 <= designated < L:
        raise SpecError(f"designated component {designated} outside 0..{L - 1}")
    if num_bags < 1 or balls_per_bag < L:
        raise ParameterError(f"need num_bags >= 1 and balls_per_bag >= {L} (one per component)")
    gen = as_generator(rng)
    subsets = [s for r in range(1, L + 1) for s in itertools.combinations(range(L), r)]
    bags = []
    for i in range(num_bags):
        chosen = np.array(subsets[gen.integers(len(subsets))])
        props = gen.dirichlet(np.ones(len(chosen)))
        counts = 1 + gen.multinomial(balls_per_bag - len(chosen), props)
        classes = gen.permutation(np.repeat(chosen, counts))
        bags.append(
            RawBag(f"bag{i:05d}", _draw(spec, classes, gen), derive_labels(classes, L, designated), classes, "mixture")
        )
    return bags


def subset_size_distribution(num_components: int) -> np.ndarray:
    """P(unique-class count = s) for s = 1..L under uniform nonempty subsets."""
    sizes = np.array([math.comb(num_components, s) for s in range(1, num_components + 1)], dtype=float)
    return sizes / sizes.sum()


def _label_fields(value) -> list[str]:
    if isinstance(value, (tuple, list, np.ndarray)):
        return [f for v in value for f in _label_fields(v)]
    if isinstance(value, (int, np.integer)):
        return [str(int(value))]
    return [repr(float(value))]


def write_bag_csv(bags, path, label_key: str) -> None:
    """Write ``bag_id,label,f0..f{D-1}`` (``label_0..`` for vector labels), one row per instance."""
    bags = list(bags)
    if not bags:
        raise InputError("no bags to write")
    first = bags[0].label(label_key)
    width = len(first) if isinstance(first, (tuple, list)) else 0
    label_cols = [f"label_{k}" for k in range(width)] if width else ["label"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bag_id", *label_cols, *[f"f{j}" for j in range(bags[0].num_features)]])
        for bag in bags:
            lab = _label_fields(bag.label(label_key))
            for row in bag.instances:
                w.writerow([bag.bag_id, *lab, *[repr(float(v)) for v in row]])


@dataclass
class BagCsvSchema:
    """Column mapping for :func:`load_bag_csv`.

    ``label_columns=None`` picks every header starting with ``label``;
    ``feature_columns=None`` takes all remaining columns. Parsed labels are
    stored under ``labels[label_key]``. ``label_map`` rewrites raw label
    text first, e.g. ``{"-1": 0}`` for files that code negatives as -1.
    """

    bag_id: str = "bag_id"
    label_columns: tuple | None = None
    feature_columns: tuple | None = None
    label_key: str = "pos_neg"
    label_map: dict | None = None


def _parse_label(fields):
    vals = []
    for f in fields:
        x = float(f)
        vals.append(int(x) if x.is_integer() and "." not in f and "e" not in f.lower() else x)
    return vals[0] if len(vals) == 1 else tuple(vals)


def load_bag_csv(path, schema: BagCsvSchema | None = None) -> list[RawBag]:
    """Rows grouped by bag id (not contiguity); instance order follows the file."""
    schema = schema or BagCsvSchema()
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{path}: empty file", 1) from None
        if schema.bag_id not in header:
            raise LoadError(f"{path}: no {schema.bag_id!r} column in header", 1)
        label_cols = list(schema.label_columns or [h for h in header if h.startswith("label")])
        missing = [c for c in label_cols if c not in header]
        if not label_cols or missing:
            raise LoadError(f"{path}: label column(s) missing: {missing or 'none found'}", 1)
        feat_cols = list(schema.feature_columns or [h for h in header if h != schema.bag_id and h not in label_cols])
        missing = [c for c in feat_cols if c not in header]
        if missing:
            raise LoadError(f"{path}: feature column(s) missing: {missing}", 1)
        id_i = header.index(schema.bag_id)
        lab_i = [header.index(c) for c in label_cols]
        feat_i = [header.index(c) for c in feat_cols]
        rows = OrderedDict()
        labels = {}
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise LoadError(f"{path}: expected {len(header)} columns, got {len(row)}", line)
            try:
                feats = [float(row[i]) for i in feat_i]
                raw = [row[i].strip() for i in lab_i]
                if schema.label_map and len(raw) == 1 and raw[0] in schema.label_map:
                    lab = schema.label_map[raw[0]]
                else:
                    lab = _parse_label(raw)
            except ValueError as exc:
                raise LoadError(f"{path}: unparseable number ({exc})", line) from None
            bid = row[id_i]
            if bid in labels and labels[bid] != lab:
                raise LoadError(f"{path}: bag {bid!r} has conflicting labels {labels[bid]!r} and {lab!r}", line)
            labels[bid] = lab
            rows.setdefault(bid, []).append(feats)
    if not rows:
        raise LoadError(f"{path}: no data rows", 2)
    return [RawBag(bid, np.array(r), {schema.label_key: labels[bid]}, None, str(path)) for bid, r in rows.items()]


def load_musk_format(path, num_features: int = 166) -> list[RawBag]:
    """Molecule bags from the public MUSK layout.

    Columns: molecule name, conformation name, ``num_features`` numbers,
    class (0/1). A molecule is positive iff any of its rows is.
    """
    path = Path(path)
    rows = OrderedDict()
    label = {}
    ncol = num_features + 3
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != ncol:
                raise LoadError(f"{path}: expected {ncol} columns, got {len(parts)}", line_no)
            try:
                feats = [float(p) for p in parts[2:-1]]
                cls = int(float(parts[-1]))
            except ValueError as exc:
                raise LoadError(f"{path}: unparseable number ({exc})", line_no) from None
            if cls not in (0, 1):
                raise LoadError(f"{path}: class must be 0 or 1, got {parts[-1]!r}", line_no)
            mol = parts[0]
            rows.setdefault(mol, []).append(feats)
            label[mol] = max(label.get(mol, 0), cls)
    if not rows:
        raise LoadError(f"{path}: no data rows")
    return [RawBag(m, np.array(r), {"pos_neg": label[m]}, None, "musk") for m, r in rows.items()]


def subsample_indices(n: int, target_n: int, gen) -> np.ndarray:
    if target_n < 1:
        raise ParameterError(f"target bag size must be at least 1, got {target_n}")
    if n >= target_n:
        return gen.choice(n, target_n, replace=False)
    reps, rem = divmod(target_n, n)
    idx = np.concatenate([np.tile(np.arange(n), reps), gen.choice(n, rem, replace=False)])
    return gen.permutation(idx)


def subsample_bag(bag: RawBag, target_n: int, rng) -> RawBag:
    """Resize a bag to ``target_n`` instances.

    Bags at least that large lose instances (drawn without replacement);
    smaller bags repeat every instance ``target_n // N`` times and fill the
    rest with distinct draws.
    """
    idx = subsample_indices(bag.size, target_n, as_generator(rng))
    classes = None if bag.instance_classes is None else np.asarray(bag.instance_classes)[idx]
    return replace(bag, instances=bag.instances[idx], instance_classes=classes)


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        ids = [b.bag_id for b in self.train + self.validation + self.test]
        if len(ids) != len(set(ids)):
            raise InputError("train/validation/test must be disjoint by bag id")


def normalize_features(split: DatasetSplit) -> DatasetSplit:
    """Z-score every raw feature with statistics of the training instances only."""
    if not split.train:
        raise InputError("cannot normalize: training split is empty")
    allx = np.concatenate([b.instances for b in split.train])
    mean = allx.mean(axis=0)
    std = np.maximum(allx.std(axis=0), STD_FLOOR)
    return DatasetSplit(*(apply_normalization(part, mean, std) for part in (split.train, split.validation, split.test)),
                        mean=mean, std=std)


def apply_normalization(bags, mean, std) -> list:
    return [replace(b, instances=(b.instances - mean) / std) for b in bags]


def _strat_value(bag, label_key):
    if label_key is None:
        return None
    v = bag.labels.get(label_key)
    if isinstance(v, float) and not v.is_integer():
        return None
    return v


def _groups(bags, label_key):
    groups = defaultdict(list)
    for b in bags:
        groups[_strat_value(b, label_key)].append(b)
    return [groups[k] for k in sorted(groups, key=repr)]


def stratified_split(bags, fractions=(4 / 6, 1 / 6, 1 / 6), label_key: str | None = "multi_class",
                     rng=0) -> DatasetSplit:
    """Train/validation/test split keeping class proportions (exact when divisible)."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ParameterError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    gen = as_generator(rng)
    parts = ([], [], [])
    for group in _groups(bags, label_key):
        order = gen.permutation(len(group))
        n = len(group)
        n_train = int(round(fractions[0] * n))
        n_val = int(round((fractions[0] + fractions[1]) * n)) - n_train
        cuts = (0, n_train, n_train + n_val, n)
        for p in range(3):
            parts[p].extend(group[i] for i in order[cuts[p]:cuts[p + 1]])
    return DatasetSplit(*(sorted(p, key=lambda b: b.bag_id) for p in parts))


def stratified_holdout(bags, fraction: float, label_key: str | None, rng) -> tuple[list, list]:
    """Split off roughly ``fraction`` of the bags per class; returns (kept, held_out)."""
    gen = as_generator(rng)
    kept, held = [], []
    for group in _groups(bags, label_key):
        order = gen.permutation(len(group))
        n_held = int(round(fraction * len(group)))
        if len(group) > 1:
            n_held = min(max(n_held, 1), len(group) - 1)
        elif len(bags) > 1:
            n_held = 0
        held.extend(group[i] for i in order[:n_held])
        kept.extend(group[i] for i in order[n_held:])
    if not held:
        held, kept = kept[:1], kept[1:]
    return kept, held


def kfold_split(bags, k: int, repeats: int = 1, stratify: bool = True, rng=0,
                label_key: str | None = "pos_neg") -> list[list[tuple[list, list]]]:
    """Repeated k-fold partitions of bag ids.

    Returns ``folds[repeat][fold] = (train_ids, test_ids)``. Repeat ``r``
    depends only on ``(seed, r)``. Stratified folds deal each class
    round-robin so per-class and total fold sizes differ by at most one.
    """
    ids = [b.bag_id for b in bags]
    if len(set(ids)) != len(ids):
        raise InputError("bag ids must be unique for k-fold splitting")
    if not 2 <= k <= len(bags):
        raise ParameterError(f"k must be in [2, {len(bags)}], got {k}")
    if repeats < 1:
        raise ParameterError(f"repeats must be at least 1, got {repeats}")
    groups = [list(bags)]
    if stratify:
        continuous = any(_strat_value(b, label_key) is None for b in bags)
        strata = _groups(bags, label_key)
        if continuous or min(map(len, strata)) < k:
            warnings.warn(
                f"cannot stratify {k} folds (continuous labels or a class with fewer than {k} bags); "
                "falling back to unstratified folds",
                StratificationWarning,
                stacklevel=2,
            )
        else:
            groups = strata
    base = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    out = []
    for r in range(repeats):
        gen = base.child(r).generator()
        assign = defaultdict(list)
        pos = 0
        for group in groups:
            for i in gen.permutation(len(group)):
                assign[pos % k].append(group[i].bag_id)
                pos += 1
        folds = []
        for f in range(k):
            test = set(assign[f])
            folds.append(([i for i in ids if i not in test], [i for i in ids if i in test]))
        out.append(folds)
    return out
