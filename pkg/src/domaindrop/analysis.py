"""Measurements of how domain-dependent a trained network's features are.

All functions take a :class:`~domaindrop.model.Backbone` or a fitted
:class:`~domaindrop.estimator.DomainDropClassifier` and per-domain input
arrays; features are computed with DomainDrop closed.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import DataError, TrainingError
from .model import Backbone, SGDState, layer_features, sgd_step
from .rng import stream


def _backbone(model) -> Backbone:
    if isinstance(model, Backbone):
        return model
    net = getattr(model, "backbone_", None)
    if net is None:
        raise TypeError("expected a Backbone or a fitted DomainDropClassifier")
    return net


def _layer(net: Backbone, layer: int) -> int:
    if layer < 0:
        layer += net.n_layers
    if not 0 <= layer < net.n_layers:
        raise IndexError(f"layer {layer} outside 0..{net.n_layers - 1}")
    return layer


def _mean_map(net: Backbone, X, layer: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise DataError("empty domain")
    return layer_features(net, X, layer).mean(axis=0)


@dataclass
class ChannelStats:
    layer: int
    domain_means: np.ndarray  # K×C pooled activations
    stddev: np.ndarray  # C, population stddev over domains

    @property
    def mean_stddev(self) -> float:
        return float(self.stddev.mean())


def channel_sensitivity(model, domains: Sequence[np.ndarray], layer: int) -> ChannelStats:
    """Per-channel spread of domain-averaged pooled activations."""
    if len(domains) < 2:
        raise DataError("need at least two domains")
    net = _backbone(model)
    layer = _layer(net, layer)
    means = np.stack([_mean_map(net, X, layer).mean(axis=(-2, -1)) for X in domains])
    return ChannelStats(layer, means, means.std(axis=0))


def cmmd_from_means(mean_a: np.ndarray, mean_b: np.ndarray) -> float:
    """``(1/C) sum_c ||mean_a[c] - mean_b[c]||_2`` over ``C×H×W`` mean maps."""
    if mean_a.shape != mean_b.shape:
        raise ValueError(f"mean maps differ in shape: {mean_a.shape} vs {mean_b.shape}")
    diff = (mean_a - mean_b).reshape(mean_a.shape[0], -1)
    return float(np.sqrt((diff**2).sum(axis=1)).mean())


def cmmd_hat(model, domain_a, domain_b, layer: int) -> float:
    net = _backbone(model)
    layer = _layer(net, layer)
    return cmmd_from_means(_mean_map(net, domain_a, layer), _mean_map(net, domain_b, layer))


@dataclass
class DivergenceReport:
    layer: int
    source_names: list[str]
    target_name: str
    pairwise: np.ndarray  # K×K source-source estimates
    source_target: np.ndarray  # K source-target estimates
    beta: float
    gamma: float
    gap: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "sources": self.source_names,
            "target": self.target_name,
            "beta_hat": self.beta,
            "gamma_hat": self.gamma,
            "inter_domain_gap": self.gap,
            "source_target": self.source_target.tolist(),
            **self.extra,
        }

    def write(self, json_path, csv_path) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["domain"] + self.source_names)
            for name, row in zip(self.source_names, self.pairwise):
                w.writerow([name] + [repr(float(v)) for v in row])


REPORT_SCHEMA = {
    "type": "object",
    "required": ["layer", "sources", "target", "beta_hat", "gamma_hat", "inter_domain_gap", "source_target"],
    "properties": {
        "layer": {"type": "integer", "minimum": 0},
        "sources": {"type": "array", "items": {"type": "string"}, "minItems": 2},
        "target": {"type": "string"},
        "beta_hat": {"type": "number", "minimum": 0},
        "gamma_hat": {"type": "number", "minimum": 0},
        "inter_domain_gap": {"type": "number", "minimum": 0},
        "source_target": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "channel_stddev_mean": {"type": "number", "minimum": 0},
    },
}


def divergence_report(model, sources: Mapping[str, np.ndarray], target: tuple[str, np.ndarray],
                      layer: int) -> DivergenceReport:
    """Estimated source divergence (max pairwise) and source-target gap (mean)."""
    if len(sources) < 2:
        raise DataError("need at least two source domains")
    net = _backbone(model)
    layer = _layer(net, layer)
    names = list(sources)
    means = [_mean_map(net, sources[n], layer) for n in names]
    k = len(names)
    pair = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            pair[i, j] = pair[j, i] = cmmd_from_means(means[i], means[j])
    tname, tX = target
    tmean = _mean_map(net, tX, layer)
    st = np.array([cmmd_from_means(m, tmean) for m in means])
    return DivergenceReport(layer, names, tname, pair, st, float(pair.max()), float(st.mean()),
                            _gap_from_means(means))


def _gap_from_means(means: Sequence[np.ndarray]) -> float:
    k = len(means)
    total = sum(np.linalg.norm((means[a] - means[b]).ravel()) for a in range(k) for b in range(a + 1, k))
    return float(2.0 / (k * (k - 1)) * total)


def inter_domain_gap(model, sources: Sequence[np.ndarray], layer: int) -> float:
    """Average pairwise L2 distance between domain-averaged feature maps."""
    if len(sources) < 2:
        raise DataError("need at least two source domains")
    net = _backbone(model)
    layer = _layer(net, layer)
    return _gap_from_means([_mean_map(net, X, layer) for X in sources])


@dataclass(frozen=True)
class ProbeConfig:
    iterations: int = 200
    lr: float = 0.01
    momentum: float = 0.9
    holdout_fraction: float = 0.3
    seed: int = 0


def layer_probe_accuracy(model, X, domains, layer: int, cfg: ProbeConfig = ProbeConfig()) -> float:
    """Held-out accuracy of a fresh GAP+FC domain probe on frozen features.

    Pooled features are standardised with held-in statistics; the probe is
    trained full-batch on the held-in part.  The backbone never sees a
    gradient since the probe works on plain arrays.
    """
    net = _backbone(model)
    layer = _layer(net, layer)
    d = np.asarray(domains)
    labels, d = np.unique(d, return_inverse=True)
    k = len(labels)
    pooled = layer_features(net, np.asarray(X, dtype=np.float64), layer).mean(axis=(-2, -1))
    rng = stream(cfg.seed, "probe")
    order = rng.permutation(len(d))
    n_out = int(np.floor(len(d) * cfg.holdout_fraction))
    test, train = order[:n_out], order[n_out:]
    mu = pooled[train].mean(axis=0)
    sd = pooled[train].std(axis=0)
    sd[sd == 0] = 1.0
    Z = (pooled - mu) / sd
    c = Z.shape[1]
    bound = 1.0 / np.sqrt(c)
    params = {"W": rng.uniform(-bound, bound, (c, k)), "b": np.zeros(k)}
    state = SGDState(cfg.lr, cfg.momentum, 0.0, cfg.iterations)
    for it in range(cfg.iterations):
        tape = T.Tape()
        W, b = tape.watch(params["W"]), tape.watch(params["b"])
        loss = T.cross_entropy(T.add(T.matmul(T.Tensor(Z[train]), W), b), d[train])
        if not np.isfinite(loss.item()):
            raise TrainingError(f"probe loss became non-finite at iteration {it}")
        T.backward(tape, loss)
        sgd_step(params, {"W": W.grad, "b": b.grad}, state)
    pred = np.argmax(Z[test] @ params["W"] + params["b"], axis=1)
    return float(np.mean(pred == d[test]))
