"""scikit-learn compatible classifier trained with DomainDrop."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import tensor as T
from .drop import DomainDiscriminator, DropConfig
from .errors import CheckpointError, ConfigError, TrainingError
from .losses import LossWeights, total_loss
from .model import (
    Backbone,
    BackboneConfig,
    SGDState,
    bind,
    init_params,
    layer_features,
    load_checkpoint,
    lr_at_epoch,
    predict_logits,
    save_checkpoint,
    sgd_step,
)
from .rng import stream
from .scheduler import LayerSchedule, select_layer


@dataclass(frozen=True)
class Variant:
    domaindrop: bool
    layerwise: bool
    consistency: bool


VARIANTS = {
    "baseline": Variant(False, False, False),
    "dd": Variant(True, False, False),
    "dd+lt": Variant(True, True, False),
    "dd+cl": Variant(True, False, True),
    "full": Variant(True, True, True),
}


def _clip(grads: dict, max_norm: float) -> None:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm


def _encode(values, classes):
    idx = np.searchsorted(classes, values)
    idx = np.clip(idx, 0, len(classes) - 1)
    if np.any(classes[idx] != values):
        raise ValueError("labels not seen during fit")
    return idx


class DomainDropClassifier(ClassifierMixin, BaseEstimator):
    """Small conv/MLP classifier regularised by discriminator-guided channel dropout.

    ``variant`` selects the ablation arm: ``baseline`` (plain training),
    ``dd`` (DomainDrop at every candidate layer, each gated with
    ``all_layers_p_active``), ``dd+lt`` (one random layer per iteration,
    gated with ``p_active``), ``dd+cl`` / ``full`` (the same two with the
    dual consistency loss).

    ``fit`` needs per-sample ``domains`` in addition to ``X`` and ``y``.
    When a validation set is supplied the parameters from the epoch with
    the best validation accuracy are kept.
    """

    def __init__(self, backbone="auto", variant="full", epochs=50, batch_size=128, lr=0.002,
                 momentum=0.9, weight_decay=5e-4, p_drop=0.33, p_active=0.8, all_layers_p_active=0.5,
                 grl_lambda=0.25, consistency_weight=1.5, temperature=5.0, candidate_layers=None,
                 rescale=True, discriminator_lr_scale=1.0, clip_grad_norm=5.0, random_state=0):
        self.backbone = backbone
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.p_drop = p_drop
        self.p_active = p_active
        self.all_layers_p_active = all_layers_p_active
        self.grl_lambda = grl_lambda
        self.consistency_weight = consistency_weight
        self.temperature = temperature
        self.candidate_layers = candidate_layers
        self.rescale = rescale
        self.discriminator_lr_scale = discriminator_lr_scale
        self.clip_grad_norm = clip_grad_norm
        self.random_state = random_state

    # configuration ---------------------------------------------------------

    def _variant(self) -> Variant:
        try:
            return VARIANTS[self.variant]
        except KeyError:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}") from None

    def _backbone_config(self, input_shape, n_classes) -> BackboneConfig:
        if isinstance(self.backbone, BackboneConfig):
            return self.backbone
        if self.backbone == "auto":
            if len(input_shape) == 3:
                return BackboneConfig.conv_default(n_classes, input_shape)
            return BackboneConfig.mlp_default(n_classes, input_shape[0])
        return BackboneConfig.from_string(self.backbone, input_shape, n_classes)

    def _check_params(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.discriminator_lr_scale <= 0:
            raise ConfigError("discriminator_lr_scale must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("need lr > 0, 0 <= momentum < 1, weight_decay >= 0")
        if self.clip_grad_norm is not None and self.clip_grad_norm <= 0:
            raise ConfigError("clip_grad_norm must be positive or None")
        if not 0 <= self.all_layers_p_active <= 1:
            raise ConfigError("all_layers_p_active must lie in [0, 1]")
        DropConfig(self.p_drop, self.p_active, self.grl_lambda, self.rescale)
        LossWeights(self.consistency_weight, self.temperature, self.grl_lambda)

    # training ----------------------------------------------------------------

    def fit(self, X, y, domains, X_val=None, y_val=None, X_target=None, y_target=None,
            metrics: Callable[[dict], None] | None = None):
        """Train on source samples ``X`` with class ``y`` and domain ``domains``.

        ``X_target``/``y_target`` are only evaluated for reporting.
        ``metrics`` receives every MetricsRecord as a dict.
        """
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        domains = np.asarray(domains).reshape(-1)
        if len(domains) != len(y):
            raise ValueError("domains must have one entry per sample")
        self._check_params()
        variant = self._variant()
        self.classes_ = np.unique(y)
        self.domains_ = np.unique(domains)
        y_enc = _encode(y, self.classes_)
        d_enc = _encode(domains, self.domains_)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = tuple(X.shape[1:])
        config = self._backbone_config(self.input_shape_, len(self.classes_))
        seed = self.random_state
        init_rng = stream(seed, "init")
        net = init_params(config, init_rng)
        candidates = tuple(range(net.n_layers)) if self.candidate_layers is None else tuple(self.candidate_layers)
        schedule = LayerSchedule(candidates, self.p_active).validate(net.n_layers)
        discs = {}
        if variant.domaindrop:
            discs = {l: DomainDiscriminator.init(l, len(self.domains_), net.channels[l], init_rng) for l in candidates}
        drop_cfg = DropConfig(self.p_drop, self.p_active if variant.layerwise else self.all_layers_p_active,
                              self.grl_lambda, self.rescale)
        weights = LossWeights(self.consistency_weight, self.temperature, self.grl_lambda)
        state = SGDState(self.lr, self.momentum, self.weight_decay, self.epochs)
        disc_state = SGDState(self.lr * self.discriminator_lr_scale, self.momentum, self.weight_decay, self.epochs)
        rng_masks, rng_layer, rng_shuffle = stream(seed, "masks"), stream(seed, "layer-select"), stream(seed, "data-shuffle")

        val = None
        if X_val is not None and len(X_val):
            val = (check_array(X_val, allow_nd=True, dtype=np.float64), _encode(np.asarray(y_val), self.classes_))
        tgt = None
        if X_target is not None and len(X_target):
            tgt = (check_array(X_target, allow_nd=True, dtype=np.float64), np.asarray(y_target))

        self.history_ = []
        best = None
        n = len(y_enc)
        iteration = 0
        for epoch in range(self.epochs):
            state.epoch = epoch
            state.lr = lr_at_epoch(self.lr, epoch, self.epochs)
            disc_state.lr = state.lr * self.discriminator_lr_scale
            order = rng_shuffle.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                if not variant.domaindrop:
                    layers = []
                elif variant.layerwise:
                    layers = [select_layer(schedule, rng_layer)]
                else:
                    layers = list(candidates)
                tape = T.Tape()
                params = bind(net, tape)
                dparams = {l: (tape.watch(discs[l].W), tape.watch(discs[l].bias)) for l in layers}
                loss, info = total_loss(net, discs, X[idx], y_enc[idx], d_enc[idx], drop_cfg, weights, layers,
                                        rng_masks, use_consistency=variant.consistency,
                                        params=params, disc_params=dparams)
                if not np.isfinite(info.total):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} iteration {iteration}: "
                        f"cls={info.cls} cons={info.cons} domain={info.domain}")
                T.backward(tape, loss)
                grads = {k: t.grad for k, t in params.items()}
                dgrads, darrays = {}, {}
                for l, (W, b) in dparams.items():
                    dgrads[f"disc{l}.W"], dgrads[f"disc{l}.b"] = W.grad, b.grad
                    darrays[f"disc{l}.W"], darrays[f"disc{l}.b"] = discs[l].W, discs[l].bias
                if self.clip_grad_norm is not None:
                    _clip(grads, self.clip_grad_norm)
                    _clip(dgrads, self.clip_grad_norm)
                try:
                    sgd_step(net.params, grads, state)
                    sgd_step(darrays, dgrads, disc_state)
                except TrainingError as exc:
                    raise TrainingError(f"{exc} at epoch {epoch} iteration {iteration}") from None
                rec = {"kind": "iter", "epoch": epoch, "iteration": iteration, "lr": state.lr,
                       "loss": info.total, "cls": info.cls, "cons": info.cons, "domain": info.domain,
                       "layers": list(info.layers)}
                self._emit(rec, metrics)
                iteration += 1
            self.backbone_ = net
            rec = {"kind": "epoch", "epoch": epoch, "iteration": iteration, "lr": state.lr,
                   "train_acc": self._accuracy(X, y_enc)}
            if val is not None:
                rec["val_acc"] = self._accuracy(*val)
            if tgt is not None:
                rec["target_acc"] = self.score(*tgt)
            self._emit(rec, metrics)
            score = rec.get("val_acc", rec["train_acc"]) if val is not None else None
            if best is None or val is None or score > best[0]:
                best = (score, epoch, net.copy(), {l: DomainDiscriminator(d.layer, d.W.copy(), d.bias.copy())
                                                   for l, d in discs.items()},
                        {k: v.copy() for k, v in {**state.buffers, **disc_state.buffers}.items()})
        _, self.best_epoch_, self.backbone_, self.discriminators_, buffers = best
        self.optimizer_state_ = SGDState(state.lr, state.momentum, state.weight_decay, state.total_epochs,
                                         self.best_epoch_, buffers)
        self.rng_states_ = {"masks": rng_masks.bit_generator.state, "layer-select": rng_layer.bit_generator.state,
                            "data-shuffle": rng_shuffle.bit_generator.state}
        return self

    def _emit(self, rec, sink):
        self.history_.append(rec)
        if sink is not None:
            sink(rec)

    def _accuracy(self, X, y_enc) -> float:
        return float(np.mean(np.argmax(predict_logits(self.backbone_, X), axis=1) == y_enc))

    # inference ---------------------------------------------------------------

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "backbone_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if tuple(X.shape[1:]) != self.input_shape_:
            raise ValueError(f"expected samples of shape {self.input_shape_}, got {X.shape[1:]}")
        return predict_logits(self.backbone_, X)

    def predict_proba(self, X) -> np.ndarray:
        return T.softmax_t(self.decision_function(X)).data

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def transform(self, X, layer: int = -1) -> np.ndarray:
        """Globally pooled ``N×C`` features at ``layer`` (default: last block)."""
        return self.feature_maps(X, layer).mean(axis=(-2, -1))

    def feature_maps(self, X, layer: int = -1) -> np.ndarray:
        check_is_fitted(self, "backbone_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if layer < 0:
            layer += self.backbone_.n_layers
        return layer_features(self.backbone_, X, layer)

    # persistence -------------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        check_is_fitted(self, "backbone_")
        arrays = dict(self.backbone_.params)
        for l, d in sorted(self.discriminators_.items()):
            arrays[f"disc{l}.W"], arrays[f"disc{l}.b"] = d.W, d.bias
        for k in sorted(self.optimizer_state_.buffers):
            arrays[f"momentum/{k}"] = self.optimizer_state_.buffers[k]
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}
        if isinstance(params["backbone"], BackboneConfig):
            params["backbone"] = params["backbone"].describe()
        meta = {
            "estimator": params,
            "backbone": self.backbone_.config.describe(),
            "input_shape": list(self.input_shape_),
            "classes": self.classes_.tolist(),
            "domains": self.domains_.tolist(),
            "discriminator_layers": sorted(self.discriminators_),
            "best_epoch": self.best_epoch_,
            "optimizer": {"lr": self.optimizer_state_.lr, "momentum": self.optimizer_state_.momentum,
                          "weight_decay": self.optimizer_state_.weight_decay,
                          "epoch": self.optimizer_state_.epoch, "total_epochs": self.optimizer_state_.total_epochs},
            "rng": {k: _jsonable(v) for k, v in self.rng_states_.items()},
        }
        if extra:
            meta["extra"] = extra
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "DomainDropClassifier":
        arrays, meta = load_checkpoint(path)
        try:
            est = cls(**meta["estimator"])
            shape = tuple(meta["input_shape"])
            est.classes_ = np.asarray(meta["classes"])
            est.domains_ = np.asarray(meta["domains"])
            config = BackboneConfig.from_string(meta["backbone"], shape, len(est.classes_))
            names = [k for k in arrays if k.startswith("block") or k.startswith("head")]
            est.backbone_ = Backbone(config, {k: arrays[k] for k in names})
            est.discriminators_ = {l: DomainDiscriminator(l, arrays[f"disc{l}.W"], arrays[f"disc{l}.b"])
                                   for l in meta["discriminator_layers"]}
            opt = meta["optimizer"]
            buffers = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("momentum/")}
            est.optimizer_state_ = SGDState(opt["lr"], opt["momentum"], opt["weight_decay"], opt["total_epochs"],
                                            opt["epoch"], buffers)
        except (KeyError, ValueError, ConfigError) as exc:
            raise CheckpointError(f"incompatible checkpoint {path}: {exc}") from exc
        est.input_shape_ = shape
        est.n_features_in_ = int(np.prod(shape))
        est.best_epoch_ = meta["best_epoch"]
        est.rng_states_ = meta["rng"]
        est.history_ = []
        est.meta_ = meta
        return est


def _jsonable(state):
    if isinstance(state, dict):
        return {k: _jsonable(v) for k, v in state.items()}
    if isinstance(state, np.integer):
        return int(state)
    return state
