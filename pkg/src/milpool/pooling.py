"""MIL pooling filters: max, mean, attention, distribution, distribution with attention.

All filters take extracted instance features shaped ``(N, J)`` for a single
bag or ``(B, N, J)`` for a batch of equally sized bags, and return one
representation per bag: ``J`` values for the point-estimate filters and
``J * M`` values for the distribution filters, flattened feature-major
(all ``M`` bins of feature 0 first).

The distribution filters evaluate a Gaussian kernel density estimate of each
feature's marginal on the fixed grid ``v_b = b / (M - 1)``. The grid spans
``[0, 1]``, so features must already lie in that interval (normally through a
sigmoid at the end of the feature extractor). Out-of-range features raise
instead of being clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DomainError, InputError, ParameterError
from .tensor import Tensor, _make

KINDS = ("max", "mean", "attention", "distribution", "distribution_attention")
DISTRIBUTION_KINDS = ("distribution", "distribution_attention")
ATTENTION_KINDS = ("attention", "distribution_attention")
EXP_FLOOR = -700.0


@dataclass
class PoolingSpec:
    kind: str
    num_bins: int = 11
    sigma: float = 0.1
    attention_layers: list = field(default_factory=lambda: [128])

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown pooling kind {self.kind!r}; expected one of {KINDS}")
        if self.is_distribution:
            check_distribution_params(self.num_bins, self.sigma)
        self.attention_layers = [int(w) for w in self.attention_layers]

    @property
    def is_distribution(self) -> bool:
        return self.kind in DISTRIBUTION_KINDS

    @property
    def uses_attention(self) -> bool:
        return self.kind in ATTENTION_KINDS

    def output_width(self, num_features: int) -> int:
        return num_features * self.num_bins if self.is_distribution else num_features

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.is_distribution:
            d.update(num_bins=self.num_bins, sigma=self.sigma)
        if self.uses_attention:
            d["attention_layers"] = list(self.attention_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PoolingSpec":
        return cls(**d)


def check_distribution_params(num_bins, sigma):
    if int(num_bins) != num_bins or num_bins < 2:
        raise ParameterError(f"distribution pooling needs at least 2 bins, got {num_bins}")
    if not sigma > 0:
        raise ParameterError(f"kernel sigma must be positive, got {sigma}")


def bin_centers(num_bins: int) -> np.ndarray:
    return np.arange(num_bins) / (num_bins - 1)


def _batched(features: Tensor) -> tuple[Tensor, bool]:
    """View features as ``(B, N, J)``; the flag says whether to squeeze back."""
    if not isinstance(features, Tensor):
        features = Tensor(features)
    if features.values.ndim == 2:
        if features.shape[0] < 1:
            raise InputError("empty bag: pooling needs at least one instance")
        return T.reshape(features, (1,) + features.shape), True
    if features.values.ndim == 3:
        if features.shape[1] < 1:
            raise InputError("empty bag: pooling needs at least one instance")
        return features, False
    raise InputError(f"features must be (N, J) or (B, N, J), got shape {features.shape}")


def _unbatch(out: Tensor, single: bool) -> Tensor:
    return T.reshape(out, out.shape[1:]) if single else out


def pool_max(features) -> Tensor:
    """Feature-wise maximum; the gradient goes to the first maximizing instance."""
    f, single = _batched(features)
    fv = f.values
    b, n, j = fv.shape
    idx = fv.argmax(axis=1)
    out = np.take_along_axis(fv, idx[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        gf = np.zeros((b, n, j))
        np.put_along_axis(gf, idx[:, None, :], g[:, None, :], axis=1)
        return (gf,)

    return _unbatch(_make(out, (f,), "pool_max", backward), single)


def pool_mean(features) -> Tensor:
    f, single = _batched(features)
    n = f.shape[1]

    def backward(g):
        return (np.repeat(g[:, None, :] / n, n, axis=1),)

    return _unbatch(_make(f.values.mean(axis=1), (f,), "pool_mean", backward), single)


def weighted_sum(weights: Tensor, features: Tensor) -> Tensor:
    """``h[b, j] = sum_i w[b, i] * f[b, i, j]`` for ``w`` (B, N) and ``f`` (B, N, J)."""
    wv, fv = weights.values, features.values
    if wv.shape != fv.shape[:2]:
        raise InputError(f"weights {wv.shape} do not match features {fv.shape}")

    def backward(g):
        return np.einsum("bj,bij->bi", g, fv), wv[:, :, None] * g[:, None, :]

    return _make(np.einsum("bi,bij->bj", wv, fv), (weights, features), "weighted_sum", backward)


def attention_weights(features, net) -> Tensor:
    """Softmax over instances of the scores ``net`` assigns to each feature vector.

    ``net`` is any callable mapping a ``(R, J)`` tensor to ``(R, 1)`` scores,
    normally an :class:`milpool.model.MLP` ending in a single linear unit.
    Returns ``(N,)`` weights for one bag or ``(B, N)`` for a batch.
    """
    f, single = _batched(features)
    b, n, j = f.shape
    scores = net(T.reshape(f, (b * n, j)))
    if scores.shape != (b * n, 1):
        raise InputError(f"attention net must return one score per instance, got {scores.shape}")
    w = T.softmax_rows(T.reshape(scores, (b, n)))
    return T.reshape(w, (n,)) if single else w


def pool_attention(features, net) -> Tensor:
    f, single = _batched(features)
    w = attention_weights(f, net)
    return _unbatch(weighted_sum(w, f), single)


def _check_unit_interval(fv):
    if fv.size and (fv.min() < 0.0 or fv.max() > 1.0):
        raise DomainError(
            "distribution pooling needs features in [0, 1] "
            f"(got range [{fv.min():.4g}, {fv.max():.4g}]); end the extractor with a sigmoid"
        )


def gaussian_kernel(values: np.ndarray, num_bins: int, sigma: float) -> np.ndarray:
    """``K[..., m] = N(v_m; values, sigma^2)`` with a trailing bin axis."""
    v = bin_centers(num_bins)
    arg = v - values[..., None]
    arg *= arg
    arg *= -0.5 / (sigma * sigma)
    # exp() is ~10x slower on deep-underflow inputs; exp(-700) < 1e-304 anyway
    np.maximum(arg, EXP_FLOOR, out=arg)
    np.exp(arg, out=arg)
    arg *= 1.0 / math.sqrt(2.0 * math.pi * sigma * sigma)
    return arg


def kde_pool(features: Tensor, weights: Tensor | None, num_bins: int, sigma: float) -> Tensor:
    """Weighted Gaussian KDE of every feature, sampled on the unit bin grid.

    ``features`` is (B, N, J); ``weights`` is (B, N) or ``None`` for uniform
    ``1/N``. Returns (B, J * M).
    """
    check_distribution_params(num_bins, sigma)
    fv = features.values
    _check_unit_interval(fv)
    b, n, j = fv.shape
    jm = j * num_bins
    kern = gaussian_kernel(fv, num_bins, sigma).reshape(b, n, jm)
    if weights is None:
        wv = np.full((b, n), 1.0 / n)
        parents = (features,)
    else:
        wv = weights.values
        if wv.shape != (b, n):
            raise InputError(f"weights {wv.shape} do not match features {fv.shape}")
        parents = (features, weights)
    dens = np.matmul(wv[:, None, :], kern)[:, 0, :]

    def backward(g):
        gk = (kern * g[:, None, :]).reshape(b, n, j, num_bins)
        # dK/df = K * (v - f) / sigma^2
        moment = gk @ bin_centers(num_bins) - fv * gk.sum(axis=-1)
        gf = wv[:, :, None] * moment / (sigma * sigma)
        if weights is None:
            return (gf,)
        return gf, np.matmul(kern, g[:, :, None])[:, :, 0]

    return _make(dens, parents, "kde_pool", backward)


def pool_distribution(features, num_bins: int, sigma: float) -> Tensor:
    f, single = _batched(features)
    return _unbatch(kde_pool(f, None, num_bins, sigma), single)


def pool_distribution_attention(features, net, num_bins: int, sigma: float) -> Tensor:
    f, single = _batched(features)
    check_distribution_params(num_bins, sigma)
    _check_unit_interval(f.values)
    w = attention_weights(f, net)
    return _unbatch(kde_pool(f, w, num_bins, sigma), single)


def apply_pooling(spec: PoolingSpec, features, net=None) -> Tensor:
    """Dispatch on ``spec.kind``; ``net`` is required for the attention kinds."""
    if spec.uses_attention and net is None:
        raise ParameterError(f"{spec.kind} pooling needs an attention network")
    if spec.kind == "max":
        return pool_max(features)
    if spec.kind == "mean":
        return pool_mean(features)
    if spec.kind == "attention":
        return pool_attention(features, net)
    if spec.kind == "distribution":
        return pool_distribution(features, spec.num_bins, spec.sigma)
    return pool_distribution_attention(features, net, spec.num_bins, spec.sigma)
