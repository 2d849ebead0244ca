"""Discriminator-guided channel dropout.

A GAP+FC domain discriminator sits on a middle layer.  Each channel's score
is the discriminator weight for the sample's true domain times the
channel's pooled activation; scores are normalised into drop probabilities
and exactly ``M`` channels are removed per sample by weighted random
selection (keys ``r ** (1 / s)``, largest ``M`` keys dropped).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError

__all__ = [
    "DropConfig",
    "DropMask",
    "DomainDiscriminator",
    "drop_count",
    "discriminate",
    "channel_scores",
    "drop_probabilities",
    "wrs_mask",
    "wrs_masks",
    "apply_mask",
    "domaindrop_forward",
    "domain_loss",
    "domain_loss_weights",
]


@dataclass(frozen=True)
class DropConfig:
    p_drop: float = 0.33
    p_active: float = 0.8
    grl_lambda: float = 0.25
    rescale: bool = True
    eps: float = 1e-12

    def __post_init__(self):
        if not 0 <= self.p_drop < 1:
            raise ConfigError(f"p_drop must lie in [0, 1), got {self.p_drop}")
        if not 0 <= self.p_active <= 1:
            raise ConfigError(f"p_active must lie in [0, 1], got {self.p_active}")
        if self.grl_lambda < 0:
            raise ConfigError(f"grl_lambda must be >= 0, got {self.grl_lambda}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")


@dataclass(frozen=True)
class DropMask:
    m: np.ndarray
    dropped: int

    def __post_init__(self):
        if int(np.sum(self.m == 0)) != self.dropped:
            raise ValueError("mask zero count differs from dropped count")


@dataclass
class DomainDiscriminator:
    """GAP followed by a ``K×C`` fully connected layer."""

    layer: int
    W: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, layer: int, n_domains: int, channels: int, rng: np.random.Generator) -> "DomainDiscriminator":
        bound = 1.0 / math.sqrt(channels)
        return cls(layer, rng.uniform(-bound, bound, (n_domains, channels)), rng.uniform(-bound, bound, n_domains))

    @property
    def n_domains(self) -> int:
        return self.W.shape[0]

    @property
    def channels(self) -> int:
        return self.W.shape[1]


def drop_count(p_drop: float, channels: int) -> int:
    """``M = round(p_drop * C)`` with halves rounded up."""
    m = math.floor(p_drop * channels + 0.5)
    if not 0 <= m < channels:
        raise ConfigError(f"p_drop={p_drop} drops {m} of {channels} channels; need 0 <= M < C")
    return m


def _pooled(feature) -> np.ndarray:
    data = feature.data if isinstance(feature, T.Tensor) else np.asarray(feature, dtype=np.float64)
    return data.mean(axis=(-2, -1))


def discriminate(disc: DomainDiscriminator, feature, W=None, bias=None) -> T.Tensor:
    """Domain logits ``W · GAP(feature) + bias``.

    ``W``/``bias`` may be tape-tracked tensors standing in for the
    discriminator's arrays during training.
    """
    feature = T.as_tensor(feature)
    if feature.shape[-3] != disc.channels:
        raise ValueError(f"feature has {feature.shape[-3]} channels, discriminator expects {disc.channels}")
    W = T.Tensor(disc.W) if W is None else W
    bias = T.Tensor(disc.bias) if bias is None else bias
    pooled = T.global_avg_pool(feature)
    if pooled.data.ndim == 1:
        pooled = T.reshape(pooled, (1, disc.channels))
        return T.reshape(T.add(T.matmul(pooled, T.transpose(W)), bias), (disc.n_domains,))
    return T.add(T.matmul(pooled, T.transpose(W)), bias)


def channel_scores(disc: DomainDiscriminator, feature, true_domain, eps: float = 1e-12) -> np.ndarray:
    """Per-channel scores ``W[true_domain, j] * GAP(feature)_j`` floored at ``eps``.

    Works on one ``C×H×W`` feature with an int domain, or a batch with one
    domain per sample.  The result is a plain array: no gradient flows
    through selection.
    """
    pooled = _pooled(feature)
    dom = np.asarray(true_domain, dtype=np.int64)
    if np.any(dom < 0) or np.any(dom >= disc.n_domains):
        raise IndexError(f"domain index out of range [0, {disc.n_domains})")
    if pooled.shape[-1] != disc.channels:
        raise ValueError(f"feature has {pooled.shape[-1]} channels, discriminator expects {disc.channels}")
    return np.maximum(disc.W[dom] * pooled, eps)


def drop_probabilities(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise AssertionError("channel scores must be positive after flooring")
    return s / s.sum(axis=-1, keepdims=True)


def _uniform_open(rng: np.random.Generator, shape) -> np.ndarray:
    r = rng.random(shape)
    r[r == 0.0] = np.nextafter(0.0, 1.0)
    return r


def wrs_masks(scores: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    """Row-wise weighted selection: zero the ``M`` largest keys ``r ** (1/s)``.

    Keys are compared in log space (``log r / s``), which preserves their
    order and avoids underflow for tiny scores.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    n, c = scores.shape
    if not 0 <= M < c:
        raise ValueError(f"M must satisfy 0 <= M < C={c}, got {M}")
    if np.any(scores <= 0):
        raise ValueError("scores must be positive")
    mask = np.ones((n, c))
    if M == 0:
        return mask
    log_keys = np.log(_uniform_open(rng, (n, c))) / scores
    top = np.argpartition(-log_keys, M - 1, axis=1)[:, :M]
    np.put_along_axis(mask, top, 0.0, axis=1)
    return mask


def wrs_mask(s, M: int, rng: np.random.Generator) -> DropMask:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError("wrs_mask takes one score vector; use wrs_masks for batches")
    return DropMask(wrs_masks(s[None], M, rng)[0], M)


def apply_mask(feature, mask, rescale: bool = True) -> T.Tensor:
    """Multiply channels by ``mask`` (``C`` or ``N×C``), optionally by ``C/(C-M)``."""
    feature = T.as_tensor(feature)
    m = mask.m if isinstance(mask, DropMask) else np.asarray(mask, dtype=np.float64)
    c = feature.shape[-3]
    if m.shape[-1] != c:
        raise ValueError(f"mask length {m.shape[-1]} != channel count {c}")
    factor = m.astype(np.float64)
    if rescale:
        kept = factor.sum(axis=-1, keepdims=True)
        factor = factor * (c / kept)
    return T.mul(feature, factor[..., None, None])


def domaindrop_forward(feature, disc: DomainDiscriminator, true_domain, cfg: DropConfig,
                       rng: np.random.Generator | None, training: bool, *, W=None, bias=None,
                       active: bool | None = None, mask: np.ndarray | None = None):
    """Full DomainDrop step on one middle-layer feature.

    Returns ``(feature', mask, domain_logits)``.  At inference the feature is
    returned untouched with an all-ones mask and no logits.  In training the
    domain logits come from the unmasked feature behind a GRL; with
    probability ``cfg.p_active`` (or when ``active`` forces it) the scored
    mask is applied.  ``mask`` forces a specific mask (gate treated as on).
    """
    feature = T.as_tensor(feature)
    lead = feature.shape[:-3]
    c = feature.shape[-3]
    ones = np.ones(lead + (c,))
    if not training:
        return feature, ones, None
    logits = discriminate(disc, T.grl(feature, cfg.grl_lambda), W=W, bias=bias)
    if mask is not None:
        return apply_mask(feature, mask, cfg.rescale), np.asarray(mask, dtype=np.float64), logits
    if active is None:
        active = bool(rng.random() < cfg.p_active)
    if not active:
        return feature, ones, logits
    M = drop_count(cfg.p_drop, c)
    scores = channel_scores(disc, feature, true_domain, cfg.eps)
    m = wrs_masks(scores.reshape(-1, c), M, rng).reshape(lead + (c,))
    return apply_mask(feature, m, cfg.rescale), m, logits


def domain_loss_weights(domain_labels) -> np.ndarray:
    """Per-sample weights ``1 / (K * n_k)`` over the domains present."""
    d = np.asarray(domain_labels, dtype=np.int64)
    present, counts = np.unique(d, return_counts=True)
    per = dict(zip(present.tolist(), counts.tolist()))
    k = len(present)
    return np.array([1.0 / (k * per[int(v)]) for v in d])


def domain_loss(domain_logits, domain_labels) -> T.Tensor:
    """Cross-entropy averaged within each domain, then across domains."""
    d = np.asarray(domain_labels, dtype=np.int64)
    return T.cross_entropy(domain_logits, d, weights=domain_loss_weights(d))
