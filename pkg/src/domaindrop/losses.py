"""Training objective: classification, dual consistency, and domain terms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .drop import DomainDiscriminator, DropConfig, domain_loss, domaindrop_forward
from .errors import ConfigError
from .model import Backbone, forward


@dataclass(frozen=True)
class LossWeights:
    consistency: float = 1.5
    temperature: float = 5.0
    grl_lambda: float = 0.25

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.consistency < 0 or self.grl_lambda < 0:
            raise ConfigError("loss weights must be non-negative")


def consistency_loss(logits1, logits2, T_: float) -> T.Tensor:
    """Symmetric KL between temperature-softened predictions.

    ``0.5 * (KL(p1 || p2) + KL(p2 || p1))`` with ``p = softmax(z / T)``;
    batched inputs are averaged over rows.  No ``T**2`` factor.

    Evaluated as ``0.5 * sum (p1 - p2) * (ln p1 - ln p2)``, the same
    quantity, where every term is non-negative in floating point too.
    """
    a, b = T.as_tensor(logits1), T.as_tensor(logits2)
    if a.shape != b.shape:
        raise ValueError(f"logit shapes differ: {a.shape} vs {b.shape}")
    if not T_ > 0:
        raise ValueError(f"temperature must be > 0, got {T_}")
    lp1, lp2 = T.log_softmax(a, T_), T.log_softmax(b, T_)
    terms = T.mul(T.sub(T.exp(lp1), T.exp(lp2)), T.sub(lp1, lp2))
    per = T.mul(T.tsum(terms, axis=-1), 0.5)
    return per if per.data.ndim == 0 else T.mean(per)


@dataclass
class LossBreakdown:
    total: float
    cls: float
    cons: float
    domain: float
    layers: tuple[int, ...]
    active: dict[int, list[bool]]


def total_loss(backbone: Backbone, discs: Mapping[int, DomainDiscriminator], X, y, domains,
               drop_cfg: DropConfig, weights: LossWeights, layers: Sequence[int],
               rng: np.random.Generator | None, *, use_consistency: bool = True,
               params: Mapping[str, T.Tensor] | None = None,
               disc_params: Mapping[int, tuple[T.Tensor, T.Tensor]] | None = None,
               masks: Mapping[int, tuple[np.ndarray, np.ndarray]] | None = None):
    """Composite loss on one batch; returns ``(loss tensor, LossBreakdown)``.

    DomainDrop is hooked at every index in ``layers`` (one index under the
    layer-wise scheme, empty for the plain baseline).  With consistency on,
    two passes draw independent gates and masks at the same layers; the
    classification term averages both passes and the domain term is taken
    once, from the first pass's unmasked features.  ``masks`` freezes the
    stochastic part: ``{layer: (mask_pass1, mask_pass2)}``.
    """
    drop_cfg = DropConfig(drop_cfg.p_drop, drop_cfg.p_active, weights.grl_lambda, drop_cfg.rescale, drop_cfg.eps)
    y = np.asarray(y, dtype=np.int64)
    domains = np.asarray(domains, dtype=np.int64)
    n_pass = 2 if use_consistency else 1
    domain_logits: dict[int, T.Tensor] = {}
    active: dict[int, list[bool]] = {l: [] for l in layers}

    def make_hook(layer: int, pass_idx: int):
        disc = discs[layer]
        W, b = disc_params[layer] if disc_params is not None else (None, None)

        def hook(feat):
            forced = None if masks is None else masks[layer][pass_idx]
            out, m, logits = domaindrop_forward(feat, disc, domains, drop_cfg, rng, True,
                                                W=W, bias=b, mask=forced)
            active[layer].append(bool(np.any(m == 0)))
            if pass_idx == 0:
                domain_logits[layer] = logits
            return out

        return hook

    outputs = []
    for pass_idx in range(n_pass):
        hooks = {l: make_hook(l, pass_idx) for l in layers}
        outputs.append(forward(backbone, X, hooks, params=params).logits)

    ce = [T.cross_entropy(z, y) for z in outputs]
    cls = ce[0] if n_pass == 1 else T.mul(T.add(ce[0], ce[1]), 0.5)
    total = cls
    cons_value = 0.0
    if use_consistency:
        cons = consistency_loss(outputs[0], outputs[1], weights.temperature)
        cons_value = cons.item()
        total = T.add(total, T.mul(cons, weights.consistency))
    dom_value = 0.0
    for layer in layers:
        dl = domain_loss(domain_logits[layer], domains)
        dom_value += dl.item()
        total = T.add(total, dl)
    info = LossBreakdown(total.item(), cls.item(), cons_value, dom_value, tuple(layers), active)
    return total, info
