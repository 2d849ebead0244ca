"""Toy backbone, classifier head, SGD with momentum, and checkpoints."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, TrainingError

FeatureTransform = Callable[[T.Tensor], T.Tensor]


@dataclass(frozen=True)
class BlockSpec:
    kind: str  # "conv" or "linear"
    channels: int
    kernel: int = 3


@dataclass(frozen=True)
class BackboneConfig:
    input_shape: tuple[int, ...]
    blocks: tuple[BlockSpec, ...]
    num_classes: int

    @classmethod
    def conv_default(cls, num_classes: int = 4, input_shape=(1, 12, 12)) -> "BackboneConfig":
        blocks = (BlockSpec("conv", 8), BlockSpec("conv", 16), BlockSpec("conv", 16), BlockSpec("linear", 16))
        return cls(tuple(input_shape), blocks, num_classes)

    @classmethod
    def mlp_default(cls, num_classes: int = 4, input_dim: int = 32) -> "BackboneConfig":
        blocks = (BlockSpec("linear", 32), BlockSpec("linear", 32), BlockSpec("linear", 16), BlockSpec("linear", 16))
        return cls((input_dim,), blocks, num_classes)

    @classmethod
    def from_string(cls, text: str, input_shape: tuple[int, ...], num_classes: int) -> "BackboneConfig":
        """Parse ``"conv8,conv16,conv16,linear16"`` style descriptions."""
        blocks = []
        for tok in (t.strip() for t in text.split(",") if t.strip()):
            kind = "conv" if tok.startswith("conv") else "linear" if tok.startswith("linear") else None
            if kind is None:
                raise ConfigError(f"unknown block {tok!r} (expected convN or linearN)")
            num = tok[len(kind):]
            kernel = 3
            if kind == "conv" and "k" in num:
                num, k = num.split("k", 1)
                kernel = int(k)
            try:
                blocks.append(BlockSpec(kind, int(num), kernel))
            except ValueError:
                raise ConfigError(f"bad channel count in block {tok!r}") from None
        return cls(tuple(input_shape), tuple(blocks), num_classes)

    def describe(self) -> str:
        return ",".join(
            f"conv{b.channels}" + (f"k{b.kernel}" if b.kernel != 3 else "") if b.kind == "conv" else f"linear{b.channels}"
            for b in self.blocks
        )

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """Validate the configuration and return each block's ``C×H×W``."""
        if not self.blocks:
            raise ConfigError("backbone needs at least one block")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        shape = tuple(self.input_shape)
        if len(shape) == 1:
            shape = (shape[0], 1, 1)
        if len(shape) != 3 or min(shape) < 1:
            raise ConfigError(f"input_shape must be (C,H,W) or (D,), got {self.input_shape}")
        out = []
        for i, b in enumerate(self.blocks):
            if b.channels < 1:
                raise ConfigError(f"block {i} has {b.channels} channels")
            c, h, w = shape
            if b.kind == "conv":
                if b.kernel > h or b.kernel > w or b.kernel < 1:
                    raise ConfigError(f"block {i}: kernel {b.kernel} does not fit a {h}×{w} input")
                shape = (b.channels, h - b.kernel + 1, w - b.kernel + 1)
            elif b.kind == "linear":
                shape = (b.channels, 1, 1)
            else:
                raise ConfigError(f"block {i}: unknown kind {b.kind!r}")
            out.append(shape)
        return out


class Backbone:
    """Parameters of the stacked blocks plus the GAP→FC classifier head.

    ``params`` maps names to float64 arrays in a fixed order; ``forward``
    works on either these arrays or tape-tracked copies of them.
    """

    def __init__(self, config: BackboneConfig, params: Mapping[str, np.ndarray]):
        self.config = config
        self.shapes = config.layer_shapes()
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        expected = param_shapes(config)
        if list(self.params) != list(expected) or any(self.params[k].shape != s for k, s in expected.items()):
            raise ConfigError("parameter names or shapes do not match the backbone configuration")

    @property
    def n_layers(self) -> int:
        return len(self.config.blocks)

    @property
    def channels(self) -> list[int]:
        return [s[0] for s in self.shapes]

    def copy(self) -> "Backbone":
        return Backbone(self.config, {k: v.copy() for k, v in self.params.items()})


def param_shapes(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    shapes = config.layer_shapes()
    prev = tuple(config.input_shape) if len(config.input_shape) == 3 else (config.input_shape[0], 1, 1)
    out: dict[str, tuple[int, ...]] = {}
    for i, (b, s) in enumerate(zip(config.blocks, shapes)):
        if b.kind == "conv":
            out[f"block{i}.w"] = (b.channels, prev[0], b.kernel, b.kernel)
            out[f"block{i}.b"] = (b.channels,)
        else:
            out[f"block{i}.w"] = (int(np.prod(prev)), b.channels)
            out[f"block{i}.b"] = (b.channels,)
        prev = s
    out["head.w"] = (prev[0], config.num_classes)
    out["head.b"] = (config.num_classes,)
    return out


def fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(".b"):
        return 0
    return int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]


def init_params(config: BackboneConfig, seed_or_rng) -> Backbone:
    """Uniform ±1/sqrt(fan_in) weights and biases; same seed, same bits."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    shapes = param_shapes(config)
    params = {}
    for name, shape in shapes.items():
        owner = name.rsplit(".", 1)[0]
        fi = fan_in(owner + ".w", shapes[owner + ".w"])
        bound = 1.0 / math.sqrt(fi)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return Backbone(config, params)


class ForwardOutput(NamedTuple):
    logits: T.Tensor
    before: dict[int, T.Tensor]
    after: dict[int, T.Tensor]
    features: list[T.Tensor]


def bind(backbone: Backbone, tape: T.Tape) -> dict[str, T.Tensor]:
    """Watch every parameter on ``tape``; returns name -> tracked tensor."""
    return {k: tape.watch(v) for k, v in backbone.params.items()}


def forward(backbone: Backbone, x, hooks: Mapping[int, FeatureTransform] | None = None,
            params: Mapping[str, T.Tensor] | None = None) -> ForwardOutput:
    """Run a batch ``N×input_shape`` through the network.

    ``hooks`` maps a middle-layer index to a transform applied to that
    block's output before it flows on; ``before``/``after`` hold the raw and
    transformed features at hooked layers.  ``features`` lists every block
    output as seen downstream.
    """
    cfg = backbone.config
    hooks = dict(hooks or {})
    for layer in hooks:
        if not 0 <= layer < len(cfg.blocks):
            raise IndexError(f"hook layer {layer} outside middle layers 0..{len(cfg.blocks) - 1}")
    p = params if params is not None else {k: T.Tensor(v) for k, v in backbone.params.items()}
    h = T.as_tensor(x)
    if h.data.ndim == len(cfg.input_shape):
        raise ValueError("forward expects a leading batch axis")
    if h.data.ndim == 2:
        h = T.reshape(h, (h.shape[0], h.shape[1], 1, 1))
    n = h.shape[0]
    before, after, feats = {}, {}, []
    for i, b in enumerate(cfg.blocks):
        w, bias = p[f"block{i}.w"], p[f"block{i}.b"]
        if b.kind == "conv":
            z = T.conv2d(h, w)
            z = T.add(z, T.reshape(bias, (1, b.channels, 1, 1)))
            h = T.relu(z)
        else:
            flat = T.reshape(h, (n, int(np.prod(h.shape[1:]))))
            h = T.relu(T.add(T.matmul(flat, w), bias))
            h = T.reshape(h, (n, b.channels, 1, 1))
        if i in hooks:
            before[i] = h
            h = hooks[i](h)
            after[i] = h
        feats.append(h)
    pooled = T.global_avg_pool(h)
    logits = T.add(T.matmul(pooled, p["head.w"]), p["head.b"])
    return ForwardOutput(logits, before, after, feats)


def predict_logits(backbone: Backbone, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = [forward(backbone, X[i:i + batch_size]).logits.data for i in range(0, len(X), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, backbone.config.num_classes))


def layer_features(backbone: Backbone, X: np.ndarray, layer: int, batch_size: int = 512) -> np.ndarray:
    """Unhooked ``N×C×H×W`` feature maps at ``layer``."""
    if not 0 <= layer < backbone.n_layers:
        raise IndexError(f"layer {layer} outside 0..{backbone.n_layers - 1}")
    out = [forward(backbone, X[i:i + batch_size]).features[layer].data for i in range(0, len(X), batch_size)]
    return np.concatenate(out, axis=0)


# optimisation -------------------------------------------------------------


@dataclass
class SGDState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    total_epochs: int = 50
    epoch: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def lr_at_epoch(initial_lr: float, epoch: int, total_epochs: int) -> float:
    """Step schedule: ×0.1 from epoch ``floor(0.8 * total_epochs)`` on."""
    return initial_lr if epoch < math.floor(0.8 * total_epochs) else initial_lr * 0.1


def sgd_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: SGDState) -> dict[str, np.ndarray]:
    """In-place update ``v <- mu v + (g + wd p); p <- p - lr v``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        v = state.buffers.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = state.momentum * v + (g + state.weight_decay * p)
        state.buffers[name] = v
        p -= state.lr * v
    return params


# checkpoints --------------------------------------------------------------

MAGIC = b"DDLABCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping) -> None:
    """Write ``MAGIC | u16 version | u32 header length | JSON header | float64 data``.

    The header records the name and shape of every array in order plus
    arbitrary JSON-serialisable ``meta``.  Output is byte-deterministic.
    """
    names = list(arrays)
    header = {
        "arrays": [[n, list(np.shape(arrays[n]))] for n in names],
        "meta": meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<HI", blob, off)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off += struct.calcsize("<HI")
    header = json.loads(blob[off:off + hlen])
    off += hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(blob):
            raise CheckpointError(f"checkpoint truncated while reading {name!r}")
        arrays[name] = np.frombuffer(blob[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    if off != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return arrays, header["meta"]
