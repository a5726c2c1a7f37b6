"""Bag-level models: feature extractor -> MIL pooling -> transform -> task head.

A :class:`ModelSpec` fully determines the network. :func:`build_model` turns
it into a :class:`Model` whose parameters are plain leaf tensors, so the
optimizer and serializer can treat them as a flat, ordered store.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import InputError, SpecError
from .pooling import PoolingSpec, apply_pooling
from .rng import as_generator
from .tensor import Tensor

FORMAT_TAG = "milpool.model/v1"
PROB_CLAMP = 1e-12

TASK_KINDS = ("pos_neg", "ucc", "multi_class", "multi_task", "regression")
ACTIVATIONS = ("relu", "sigmoid", "tanh", "none")


@dataclass(frozen=True)
class TaskKind:
    """One of the five MIL tasks; fixes head width, output activation, loss and label codec.

    ``num_classes`` is K for ``multi_class``/``multi_task`` and the largest
    possible unique-class count L for ``ucc``.
    """

    kind: str
    num_classes: int | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise SpecError(f"unknown task {self.kind!r}; expected one of {TASK_KINDS}")
        if self.kind == "pos_neg" and self.num_classes not in (None, 2):
            raise SpecError("pos_neg always has 2 classes")
        if self.kind == "ucc" and self.num_classes is None:
            object.__setattr__(self, "num_classes", 2)
        if self.kind in ("multi_class", "multi_task") and not self.num_classes:
            raise SpecError(f"{self.kind} needs num_classes")
        if self.num_classes is not None and self.num_classes < (1 if self.kind == "multi_task" else 2):
            raise SpecError(f"{self.kind}: num_classes={self.num_classes} is too small")

    @property
    def head_width(self) -> int:
        if self.kind == "pos_neg":
            return 2
        if self.kind == "regression":
            return 1
        return int(self.num_classes)

    @property
    def activation(self) -> str:
        return {"multi_task": "sigmoid", "regression": "none"}.get(self.kind, "softmax")

    @property
    def loss_name(self) -> str:
        return {"multi_task": "bce", "regression": "l1"}.get(self.kind, "cce")

    @property
    def is_classification(self) -> bool:
        return self.kind != "regression"

    @property
    def single_label(self) -> bool:
        return self.activation == "softmax"

    def class_index(self, label) -> int:
        """Confusion-matrix row/column of a single-label task label."""
        return int(label) - 1 if self.kind == "ucc" else int(label)

    def encode(self, label) -> np.ndarray:
        """Bag label -> target vector matching the head output."""
        k = self.head_width
        if self.kind == "regression":
            return np.array([float(np.asarray(label, dtype=float).reshape(-1)[0])])
        if self.kind == "multi_task":
            y = np.asarray(label, dtype=float).reshape(-1)
            if y.shape != (k,) or not np.all((y == 0) | (y == 1)):
                raise InputError(f"multi_task label must be a binary {k}-vector, got {label!r}")
            return y
        arr = np.asarray(label)
        if arr.ndim == 1 and arr.size == k:
            if not (np.all((arr == 0) | (arr == 1)) and arr.sum() == 1):
                raise InputError(f"{self.kind} label must be one-hot, got {label!r}")
            return arr.astype(float)
        if arr.ndim != 0:
            raise InputError(f"{self.kind} label does not fit a {k}-way head: {label!r}")
        idx = self.class_index(arr)
        if not 0 <= idx < k:
            raise InputError(f"{self.kind} label {label!r} outside the {k}-way head")
        y = np.zeros(k)
        y[idx] = 1.0
        return y

    def predict(self, output):
        """Head output -> bag label (first index wins ties)."""
        out = np.asarray(output, dtype=float).reshape(-1)
        if self.kind == "regression":
            return float(out[0])
        if self.kind == "multi_task":
            return tuple(int(p >= 0.5) for p in out)
        idx = int(np.argmax(out))
        return idx + 1 if self.kind == "ucc" else idx

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.num_classes is not None and self.kind != "pos_neg":
            d["num_classes"] = self.num_classes
        return d

    @classmethod
    def from_dict(cls, d) -> "TaskKind":
        if isinstance(d, str):
            return cls(d)
        return cls(d["kind"], d.get("num_classes"))


def predict_label(task: TaskKind, prediction):
    return task.predict(prediction.values if isinstance(prediction, Tensor) else prediction)


@dataclass(frozen=True)
class LayerSpec:
    """A dense layer; ``dropout`` is applied to the layer's input."""

    units: int
    activation: str = "relu"
    dropout: float = 0.0

    def to_dict(self) -> dict:
        return {"units": self.units, "activation": self.activation, "dropout": self.dropout}

    @classmethod
    def from_dict(cls, d) -> "LayerSpec":
        if isinstance(d, (list, tuple)):
            return cls(*d)
        return cls(**d)


@dataclass
class ModelSpec:
    input_dim: int
    extractor_layers: list
    pooling: PoolingSpec
    transform_layers: list
    task: TaskKind
    head_dropout: float = 0.0

    def __post_init__(self):
        self.extractor_layers = [_layer(l) for l in self.extractor_layers]
        self.transform_layers = [_layer(l) for l in self.transform_layers]
        if isinstance(self.pooling, dict):
            self.pooling = PoolingSpec.from_dict(self.pooling)
        if not isinstance(self.task, TaskKind):
            self.task = TaskKind.from_dict(self.task)

    @property
    def num_features(self) -> int:
        return self.extractor_layers[-1].units if self.extractor_layers else self.input_dim

    @property
    def representation_width(self) -> int:
        return self.pooling.output_width(self.num_features)

    def problems(self) -> list[str]:
        """Every violated constraint, not just the first."""
        errs = []
        if self.input_dim < 1:
            errs.append(f"input_dim must be positive, got {self.input_dim}")
        for where, layers in (("extractor", self.extractor_layers), ("transform", self.transform_layers)):
            for i, layer in enumerate(layers):
                if layer.units < 1:
                    errs.append(f"{where} layer {i}: units must be positive, got {layer.units}")
                if layer.activation not in ACTIVATIONS:
                    errs.append(f"{where} layer {i}: unknown activation {layer.activation!r}")
                if not 0.0 <= layer.dropout < 1.0:
                    errs.append(f"{where} layer {i}: dropout {layer.dropout} outside [0, 1)")
        if not 0.0 <= self.head_dropout < 1.0:
            errs.append(f"head_dropout {self.head_dropout} outside [0, 1)")
        if self.pooling.is_distribution and self.extractor_layers:
            last = self.extractor_layers[-1].activation
            if last != "sigmoid":
                errs.append(
                    f"{self.pooling.kind} pooling needs features in [0, 1]: "
                    f"extractor must end in sigmoid, not {last!r}"
                )
        return errs

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "extractor_layers": [l.to_dict() for l in self.extractor_layers],
            "pooling": self.pooling.to_dict(),
            "transform_layers": [l.to_dict() for l in self.transform_layers],
            "task": self.task.to_dict(),
            "head_dropout": self.head_dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            extractor_layers=d.get("extractor_layers", []),
            pooling=PoolingSpec.from_dict(d["pooling"]),
            transform_layers=d.get("transform_layers", []),
            task=TaskKind.from_dict(d["task"]),
            head_dropout=float(d.get("head_dropout", 0.0)),
        )


def _layer(l):
    return l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l)


_ACT = {"relu": T.relu, "sigmoid": T.sigmoid, "tanh": T.tanh, "none": lambda x: x}


@dataclass
class Dense:
    weight: Tensor
    bias: Tensor
    activation: str
    dropout: float = 0.0

    def __call__(self, x, mode="eval", rng=None):
        x = T.dropout(x, self.dropout, mode, rng)
        return _ACT[self.activation](T.add_bias(T.matmul(x, self.weight), self.bias))


@dataclass
class MLP:
    layers: list = field(default_factory=list)

    def __call__(self, x, mode="eval", rng=None):
        for layer in self.layers:
            x = layer(x, mode, rng)
        return x


class Model:
    """Trainable bag classifier/regressor built from a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, params: "OrderedDict[str, Tensor]"):
        self.spec = spec
        self.params = params
        self.extractor = self._mlp("extractor", spec.extractor_layers)
        hidden = self._mlp("transform", spec.transform_layers)
        head = Dense(params["head.weight"], params["head.bias"], "none", spec.head_dropout)
        self.transform = MLP(hidden.layers + [head])
        self.attention = None
        if spec.pooling.uses_attention:
            acts = ["tanh"] * len(spec.pooling.attention_layers) + ["none"]
            self.attention = MLP(
                [
                    Dense(params[f"attention.{i}.weight"], params[f"attention.{i}.bias"], a)
                    for i, a in enumerate(acts)
                ]
            )

    def _mlp(self, prefix, layers):
        return MLP(
            [
                Dense(self.params[f"{prefix}.{i}.weight"], self.params[f"{prefix}.{i}.bias"], l.activation, l.dropout)
                for i, l in enumerate(layers)
            ]
        )

    @property
    def task(self) -> TaskKind:
        return self.spec.task

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def get_state(self) -> dict:
        return {k: p.values.copy() for k, p in self.params.items()}

    def set_state(self, state: dict):
        for k, p in self.params.items():
            p.values[...] = state[k]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def layer_shapes(spec: ModelSpec) -> "OrderedDict[str, tuple]":
    """Name -> shape for every parameter of ``spec``, in canonical order."""
    shapes = OrderedDict()
    width = spec.input_dim
    for i, l in enumerate(spec.extractor_layers):
        shapes[f"extractor.{i}.weight"] = (width, l.units)
        shapes[f"extractor.{i}.bias"] = (l.units,)
        width = l.units
    if spec.pooling.uses_attention:
        a_in = width
        for i, units in enumerate(list(spec.pooling.attention_layers) + [1]):
            shapes[f"attention.{i}.weight"] = (a_in, units)
            shapes[f"attention.{i}.bias"] = (units,)
            a_in = units
    width = spec.pooling.output_width(width)
    for i, l in enumerate(spec.transform_layers):
        shapes[f"transform.{i}.weight"] = (width, l.units)
        shapes[f"transform.{i}.bias"] = (l.units,)
        width = l.units
    shapes["head.weight"] = (width, spec.task.head_width)
    shapes["head.bias"] = (spec.task.head_width,)
    return shapes


def build_model(spec: ModelSpec, rng) -> Model:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    problems = spec.problems()
    if problems:
        raise SpecError("invalid model spec:\n  " + "\n  ".join(problems))
    gen = as_generator(rng)
    params = OrderedDict()
    for name, shape in layer_shapes(spec).items():
        if name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            values = gen.uniform(-bound, bound, size=shape)
        params[name] = Tensor(values, requires_grad=True)
    return Model(spec, params)


def forward_batch(model: Model, bags, mode: str = "eval", rng=None) -> Tensor:
    """Head outputs ``(B, K)`` for equally sized raw bags ``(B, N, D)``."""
    x = np.asarray(bags, dtype=float)
    if x.ndim != 3:
        raise InputError(f"expected bags shaped (B, N, D), got {x.shape}")
    b, n, d = x.shape
    if d != model.spec.input_dim:
        raise InputError(f"bag has {d} raw features, model expects {model.spec.input_dim}")
    if n < 1:
        raise InputError("empty bag")
    gen = as_generator(rng) if mode == "train" and rng is not None else None
    feats = model.extractor(Tensor(x.reshape(b * n, d)), mode, gen)
    feats = T.reshape(feats, (b, n, feats.shape[1]))
    h = apply_pooling(model.spec.pooling, feats, model.attention)
    out = model.transform(h, mode, gen)
    act = model.task.activation
    if act == "softmax":
        return T.softmax_rows(out)
    if act == "sigmoid":
        return T.sigmoid(out)
    return out


def forward_bag(model: Model, bag, mode: str = "eval", rng=None) -> Tensor:
    """Head output ``(K,)`` for one raw bag ``(N, D)``."""
    x = np.asarray(bag, dtype=float)
    if x.ndim != 2:
        raise InputError(f"expected a bag shaped (N, D), got {x.shape}")
    out = forward_batch(model, x[None], mode, rng)
    return T.reshape(out, (out.shape[1],))


def batch_loss(task: TaskKind, prediction: Tensor, targets) -> Tensor:
    """Mean per-bag loss over a ``(B, K)`` prediction and encoded ``(B, K)`` targets."""
    y = np.asarray(targets, dtype=float)
    if prediction.values.ndim == 1:
        prediction = T.reshape(prediction, (1, prediction.shape[0]))
        y = y.reshape(1, -1)
    if y.shape != prediction.shape:
        raise InputError(f"label shape {y.shape} does not match head output {prediction.shape}")
    b, k = y.shape
    yt = Tensor(y)
    name = task.loss_name
    if name == "cce":
        logp = T.log(T.clip(prediction, PROB_CLAMP, 1.0 - PROB_CLAMP))
        return T.scale(T.sum(T.mul(yt, logp)), -1.0 / b)
    if name == "bce":
        p = T.clip(prediction, PROB_CLAMP, 1.0 - PROB_CLAMP)
        q = T.sub(Tensor(np.ones((b, k))), p)
        terms = T.add(T.mul(yt, T.log(p)), T.mul(Tensor(1.0 - y), T.log(q)))
        return T.scale(T.sum(terms), -1.0 / (b * k))
    return T.scale(T.sum(T.abs(T.sub(prediction, yt))), 1.0 / b)


def loss(task: TaskKind, prediction: Tensor, label) -> Tensor:
    """Loss of a single bag prediction against its (un-encoded) label."""
    return batch_loss(task, prediction, task.encode(label))


@dataclass
class Prediction:
    output: np.ndarray
    label: object


def average_predictions(model: Model, bags) -> Prediction:
    """Mean head output over several resampled versions of one sample."""
    bags = list(bags)
    if not bags:
        raise InputError("average_predictions needs at least one bag")
    with T.no_grad():
        sizes = {np.shape(b) for b in bags}
        if len(sizes) == 1:
            outs = forward_batch(model, np.stack(bags), "eval").values
        else:
            outs = np.stack([forward_bag(model, b, "eval").values for b in bags])
    mean = outs.mean(axis=0)
    return Prediction(mean, model.task.predict(mean))


def model_to_dict(model: Model) -> dict:
    return {
        "format": FORMAT_TAG,
        "spec": model.spec.to_dict(),
        "params": {
            k: {"shape": list(p.shape), "values": [float(v) for v in p.values.reshape(-1)]}
            for k, p in model.params.items()
        },
    }


def model_from_dict(d: dict) -> Model:
    if d.get("format") != FORMAT_TAG:
        raise SpecError(f"unsupported model format {d.get('format')!r}; expected {FORMAT_TAG!r}")
    spec = ModelSpec.from_dict(d["spec"])
    problems = spec.problems()
    expected = layer_shapes(spec)
    stored = d["params"]
    for name, shape in expected.items():
        if name not in stored:
            problems.append(f"missing parameter {name}")
        elif tuple(stored[name]["shape"]) != shape:
            problems.append(f"{name}: stored shape {tuple(stored[name]['shape'])} vs spec shape {shape}")
    for name in stored:
        if name not in expected:
            problems.append(f"unexpected parameter {name}")
    if problems:
        raise SpecError("model file inconsistent with its spec:\n  " + "\n  ".join(problems))
    params = OrderedDict(
        (k, Tensor(np.array(stored[k]["values"], dtype=float).reshape(shape), requires_grad=True))
        for k, shape in expected.items()
    )
    return Model(spec, params)


def save_model(model: Model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path) -> Model:
    return model_from_dict(json.loads(Path(path).read_text()))
